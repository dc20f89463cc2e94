"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 registration failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .harness import (ManifestError, load_manifest, run_benchmark, run_reproducibility,
                      write_phantom_dataset)
from .phantom import PhantomSpec
from .pipeline import (AllUndefined, PreparedReference, RegistrationConfig, register,
                       tracking_lattice)
from .probe_model import CacheFormatError, read_cache, write_cache
from .similarity import Box
from .transform import rms
from .volume import Grid
from .vvf import FormatError, read_volume

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
log = logging.getLogger("trusreg")


class RegistrationFailed(RuntimeError):
    pass


def _load_config(path, mode=None) -> RegistrationConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    if mode is not None:
        d["mode"] = {"3d3d": "3D3D", "3do2d": "3DO2D"}.get(mode.lower(), mode)
    return RegistrationConfig.from_json(d)


def _noise(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2 or min(parts) < 0:
        raise argparse.ArgumentTypeError("noise is 'mm,degrees' with non-negative values")
    return parts[0], parts[1]


def cmd_phantom_gen(args) -> int:
    d = json.loads(Path(args.spec).read_text())
    geometry = Grid.from_dict(d.pop("geometry")) if "geometry" in d else None
    spec = PhantomSpec.from_json(d)
    manifest = write_phantom_dataset(spec, args.out, args.count, args.seed, args.panorama,
                                     geometry)
    print(manifest)
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _load_config(args.config, args.mode)
    ref = PreparedReference.build(read_volume(args.ref), Box.parse(args.bbox), cfg)
    mov = read_volume(args.mov)
    if args.cache:
        ref.attach_cache(tracking_lattice(mov.grid, cfg), read_cache(args.cache))
    try:
        result = register(ref, None, mov)
    except AllUndefined as e:
        raise RegistrationFailed(str(e)) from None
    Path(args.out).write_text(json.dumps(result.to_json(), indent=2))
    if result.failure_reason == "undefined_energy":
        raise RegistrationFailed("final energy is undefined")
    return EXIT_OK


def cmd_precompute(args) -> int:
    cfg = _load_config(args.config)
    volume = read_volume(args.ref)
    ref = PreparedReference.build(volume, Box.parse(args.bbox), cfg)
    if args.tracking_like:
        geometry = read_volume(args.tracking_like).grid
    else:
        geometry = cfg.tracking_geometry or volume.grid
    cache = ref.cache_for(tracking_lattice(geometry, cfg))
    write_cache(cache, args.out)
    return EXIT_OK


def cmd_eval_repro(args) -> int:
    cfg = _load_config(args.config)
    m = load_manifest(args.pair)
    ref = PreparedReference.build(read_volume(m.reference), m.bbox, cfg)
    tracking = read_volume(m.pairs[0][1])
    try:
        rep = run_reproducibility(ref, tracking, args.restarts, args.noise, args.seed)
    except AllUndefined as e:
        raise RegistrationFailed(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["restart", "eps_e_mm", "eps_a_deg"])
        for i, (e, a) in enumerate(zip(rep.eps_e, rep.eps_a)):
            w.writerow([i, repr(e), repr(a)])
    summary = {
        "mean_transform": None if rep.mean is None else rep.mean.to_json(),
        "eps_e_rms_mm": rms(rep.eps_e) if rep.eps_e else None,
        "eps_a_rms_deg": rms(rep.eps_a) if rep.eps_a else None,
        "failed_restarts": rep.failures,
    }
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    if rep.mean is None:
        raise RegistrationFailed("every restart failed")
    return EXIT_OK


def cmd_eval_bench(args) -> int:
    cfg = _load_config(args.config, args.mode)
    report = run_benchmark(args.manifest, cfg, out_dir=args.out, workers=args.workers,
                           record_timing=not args.no_timing, overlays=args.overlays,
                           consensus_restarts=args.consensus_restarts)
    a = report.aggregates
    print(f"success {a['n_success']}/{a['n_pairs']} ({100 * a['success_rate']:.1f}%)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trusreg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic datasets")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    gen = phs.add_parser("gen", help="reference image plus tracking volumes with truth")
    gen.add_argument("--spec", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--panorama", action="store_true")
    gen.set_defaults(func=cmd_phantom_gen)

    reg = sub.add_parser("register", help="register a tracking volume to a reference")
    reg.add_argument("--ref", required=True)
    reg.add_argument("--bbox", required=True)
    reg.add_argument("--mov", required=True)
    reg.add_argument("--mode", choices=["3d3d", "3do2d"], required=True)
    reg.add_argument("--config")
    reg.add_argument("--out", required=True)
    reg.add_argument("--cache", help="exploration cache written by 'precompute'")
    reg.set_defaults(func=cmd_register)

    pre = sub.add_parser("precompute", help="write the exploration cache of a reference")
    pre.add_argument("--ref", required=True)
    pre.add_argument("--bbox", required=True)
    pre.add_argument("--config")
    pre.add_argument("--tracking-like",
                     help="tracking volume whose lattice the cache is built for")
    pre.add_argument("--out", required=True)
    pre.set_defaults(func=cmd_precompute)

    ev = sub.add_parser("eval", help="experiments")
    evs = ev.add_subparsers(dest="eval_command", required=True)
    rep = evs.add_parser("repro", help="restarts from perturbed starts")
    rep.add_argument("--pair", required=True)
    rep.add_argument("--restarts", type=int, default=10)
    rep.add_argument("--noise", type=_noise, default=(2.0, 2.0))
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--config")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_eval_repro)
    bench = evs.add_parser("bench", help="benchmark a manifest of pairs")
    bench.add_argument("--manifest", required=True)
    bench.add_argument("--config")
    bench.add_argument("--out", required=True)
    bench.add_argument("--mode", choices=["3d3d", "3do2d"])
    bench.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: CPU count)")
    bench.add_argument("--no-timing", action="store_true",
                       help="write 0 for times so reports are byte-reproducible")
    bench.add_argument("--overlays", action="store_true",
                       help="also write checkerboard overlay volumes")
    bench.add_argument("--consensus-restarts", type=int, default=None,
                       help="perturbed restarts per pair for the restart-mean criterion "
                            "(default: 10 for pairs without truth, else 0)")
    bench.set_defaults(func=cmd_eval_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RegistrationFailed as e:
        print(f"registration failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    except (FormatError, ManifestError, CacheFormatError, ValueError, KeyError, TypeError,
            FileNotFoundError, json.JSONDecodeError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
