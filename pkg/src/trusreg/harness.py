"""Experiment runner: reproducibility restarts, benchmark suites and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .phantom import (NoLandmarks, PhantomScene, acquire_reference, acquire_tracking,
                      landmark_errors)
from .pipeline import (AllUndefined, PreparedReference, RegistrationConfig, RegistrationResult,
                       classify_success, coarse_search, final_search, tracking_lattice)
from .probe_model import read_cache
from .similarity import Box
from .transform import (RigidTransform, angular_error, average_transforms,
                        euclidean_error, rms)
from .volume import OrthoSlices, Volume, reslice
from .vvf import read_volume, write_volume

CSV_COLUMNS = ("pair_id", "mode", "success", "eps_e_mm", "eps_a_deg", "calc_rms_mm",
               "calc_max_mm", "needle_rms_deg", "needle_max_deg", "time_ms")
# aggregate name -> (row column pooled by r.m.s., row column pooled by max)
AGGREGATES = {
    "eps_e": ("eps_e_mm", "eps_e_mm"),
    "eps_a": ("eps_a_deg", "eps_a_deg"),
    "calc": ("calc_rms_mm", "calc_max_mm"),
    "needle": ("needle_rms_deg", "needle_max_deg"),
}


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------- restarts

def truncated_normal(rng: np.random.Generator, sigma: float, size=None, limit: float = 2.0):
    """Zero-mean normal samples with |x| <= limit * sigma (by rejection)."""
    out = rng.standard_normal(size)
    bad = np.abs(out) > limit
    while np.any(bad):
        out = np.where(bad, rng.standard_normal(np.shape(out)), out)
        bad = np.abs(out) > limit
    return out * sigma


def sample_perturbation(rng: np.random.Generator, noise: tuple, center) -> RigidTransform:
    """Isotropic translation noise plus a random-axis rotation about ``center``."""
    mm, deg = noise
    shift = truncated_normal(rng, mm, 3)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = abs(float(truncated_normal(rng, math.radians(deg))))
    return RigidTransform.from_rotvec(axis * angle, shift, center=center)


@dataclass
class ReproResult:
    mean: Optional[RigidTransform]
    eps_e: list
    eps_a: list
    transforms: list
    failures: list = field(default_factory=list)


def run_reproducibility(reference: PreparedReference, tracking: Union[Volume, OrthoSlices],
                        n_restarts: int = 10, noise: tuple = (2.0, 2.0), seed: int = 0,
                        seeds: Optional[Sequence[int]] = None, search=None) -> ReproResult:
    """Repeat the final multi-level search from perturbed starts.

    The exploration and candidate refinement are run once; each restart
    perturbs the best refined candidate about the gland center and re-runs
    the final search.  Errors are measured at the tracking image center.
    """
    if n_restarts < 2:
        raise ValueError("n_restarts must be >= 2")
    if seeds is not None and len(seeds) != n_restarts:
        raise ValueError("need one seed per restart")
    search = coarse_search(reference, tracking) if search is None else search
    base = search.best.refined_transform
    transforms, failures = [], []
    for i in range(n_restarts):
        rng = np.random.default_rng([seed, i] if seeds is None else seeds[i])
        start = sample_perturbation(rng, noise, reference.center) @ base
        res = final_search(reference, search, start)
        if res.failure_reason == "undefined_energy":
            failures.append(i)
            continue
        transforms.append(res.transform)
    if not transforms:
        return ReproResult(None, [], [], [], failures)
    mean = average_transforms(transforms)
    c = tracking_center(tracking)
    return ReproResult(mean, [euclidean_error(t, mean, c) for t in transforms],
                       [angular_error(t, mean) for t in transforms], transforms, failures)


def tracking_center(tracking: Union[Volume, OrthoSlices]) -> np.ndarray:
    if isinstance(tracking, OrthoSlices):
        return tracking.shared_origin
    return tracking.grid.center()


# --------------------------------------------------------------------------- reports

def aggregate(rows: Sequence[dict]) -> dict:
    """Success rate, r.m.s. and max over successful pairs, mean time over all pairs.

    Landmark r.m.s. values pool the per-pair r.m.s. values.
    """
    ok = [r for r in rows if r["success"]]
    out = {"n_pairs": len(rows), "n_success": len(ok),
           "success_rate": len(ok) / len(rows) if rows else 0.0}
    for name, (rms_col, max_col) in AGGREGATES.items():
        vals = [r[rms_col] for r in ok if r[rms_col] is not None]
        maxes = [r[max_col] for r in ok if r[max_col] is not None]
        out[f"{name}_rms"] = rms(vals) if vals else None
        out[f"{name}_max"] = max(maxes) if maxes else None
    times = [r["time_ms"] for r in rows]
    out["mean_time_ms"] = math.fsum(times) / len(times) if times else None
    return out


@dataclass
class ExperimentReport:
    mode: str
    rows: list
    aggregates: dict
    config: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, mode: str, rows: list, config: Optional[dict] = None) -> "ExperimentReport":
        return cls(mode, rows, aggregate(rows), config or {})

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_csv_cell(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"mode": self.mode, "csv_columns": list(CSV_COLUMNS), "config": self.config,
                "rows": self.rows, "aggregates": self.aggregates}

    def cross_check(self) -> None:
        """Recompute aggregates from the emitted CSV and compare exactly."""
        again = aggregate(parse_csv(self.csv_text()))
        if again != self.aggregates:
            raise AssertionError(f"aggregates differ when recomputed from rows: {again}")

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.cross_check()
        csv_path, json_path = out / "report.csv", out / "report.json"
        _atomic_write(csv_path, self.csv_text())
        _atomic_write(json_path, json.dumps(self.to_json(), indent=2))
        return csv_path, json_path


def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for c in CSV_COLUMNS:
            v = rec[c]
            if c in ("pair_id", "mode"):
                row[c] = v
            elif c == "success":
                row[c] = v == "1"
            else:
                row[c] = float(v) if v != "" else None
        rows.append(row)
    return rows


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --------------------------------------------------------------------------- pairs

def evaluate_pair(reference: PreparedReference, tracking: Union[Volume, OrthoSlices],
                  pair_id: str, scene: Optional[PhantomScene] = None,
                  consensus_restarts: int = 0, record_timing: bool = True,
                  ) -> tuple[dict, Optional[RegistrationResult]]:
    """Register one pair and build its report row.

    With a scene, success is judged against the phantom truth at the gland
    center.  ``consensus_restarts`` > 1 additionally computes the restart
    mean; without a scene, success is judged against that mean.
    """
    cfg = reference.config
    row = {"pair_id": pair_id, "mode": cfg.mode, "success": False, "eps_e_mm": None,
           "eps_a_deg": None, "calc_rms_mm": None, "calc_max_mm": None, "needle_rms_deg": None,
           "needle_max_deg": None, "time_ms": 0.0, "failure_reason": None}
    try:
        search = coarse_search(reference, tracking)
        result = final_search(reference, search)
    except AllUndefined as e:
        row["failure_reason"] = f"all_undefined: {e}"
        return row, None
    t = result.transform
    row["time_ms"] = float(result.stage_timings["total"]) if record_timing else 0.0
    row["failure_reason"] = result.failure_reason
    row["transform"] = t.to_json()
    if consensus_restarts > 1:
        rep = run_reproducibility(reference, tracking, consensus_restarts, search=search)
        if rep.mean is not None:
            _, ee, ea = classify_success(t, rep.mean, tracking_center(tracking))
            row["consensus_eps_e_mm"], row["consensus_eps_a_deg"] = ee, ea
            if scene is None:
                row["success"], row["eps_e_mm"], row["eps_a_deg"] = ee < 2.0 and ea < 5.0, ee, ea
    if scene is not None:
        c = scene.true_pose.inverse().apply(reference.center)
        row["success"], row["eps_e_mm"], row["eps_a_deg"] = classify_success(
            t, scene.true_pose, c)
        try:
            calc, needles = landmark_errors(scene, t)
        except NoLandmarks:
            calc, needles = [], []
        if calc:
            row["calc_rms_mm"], row["calc_max_mm"] = rms(calc), max(calc)
        if needles:
            row["needle_rms_deg"], row["needle_max_deg"] = rms(needles), max(needles)
    return row, result


def checkerboard(reference: Volume, tracking: Volume, t: RigidTransform, block: int = 8) -> Volume:
    """Tracking image interleaved with the reference resliced by ``t``, in cubes of ``block``."""
    moved = reslice(reference, t, tracking.grid)
    ii, jj, kk = np.meshgrid(*(np.arange(n) // block for n in tracking.dims), indexing="ij")
    pick = (ii + jj + kk) % 2 == 1
    data = np.where(pick, moved.data, tracking.data)
    mask = np.where(pick, moved.valid_mask, tracking.valid_mask)
    return tracking.with_data(data, mask)


# --------------------------------------------------------------------------- manifests

@dataclass
class Manifest:
    reference: Path
    bbox: Box
    pairs: list  # (pair_id, tracking path, truth path or None)
    cache: Optional[Path] = None


def load_manifest(path) -> Manifest:
    """Manifest JSON: reference, bbox (six numbers), optional cache, pairs
    with id, tracking and optional truth; paths relative to the manifest.

    A pair file (tracking and truth at top level) loads as a one-pair manifest.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} not found")
    try:
        d = json.loads(path.read_text())
        base = path.parent

        def existing(p):
            q = base / p
            if not q.is_file():
                raise ManifestError(f"file listed in manifest is missing: {q}")
            return q

        bbox = d["bbox"]
        box = Box.parse(bbox) if isinstance(bbox, str) else Box(bbox[:3], bbox[3:])
        # a single-pair file carries its tracking entry at top level
        plist = d["pairs"] if "pairs" in d else [dict(d, id=d.get("id", path.stem))]
        pairs = [(str(p["id"]), existing(p["tracking"]),
                  existing(p["truth"]) if p.get("truth") else None) for p in plist]
        cache = existing(d["cache"]) if d.get("cache") else None
        return Manifest(existing(d["reference"]), box, pairs, cache)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from None


_WORKER: dict = {}


def _prepare(manifest: Manifest, config: RegistrationConfig) -> PreparedReference:
    ref = PreparedReference.build(read_volume(manifest.reference), manifest.bbox, config)
    if manifest.cache is not None and config.tracking_geometry is not None:
        ref.attach_cache(tracking_lattice(config.tracking_geometry, config),
                         read_cache(manifest.cache))
    return ref


def _worker_init(manifest: Manifest, config: RegistrationConfig) -> None:
    _WORKER["ref"] = _prepare(manifest, config)


def _run_pair(args) -> dict:
    pair_id, trk_path, truth_path, out_dir, record_timing, overlays, consensus = args
    ref = _WORKER["ref"]
    tracking = read_volume(trk_path)
    scene = PhantomScene.from_json(json.loads(Path(truth_path).read_text())) if truth_path else None
    if consensus is None:
        consensus = 0 if scene is not None else 10
    row, result = evaluate_pair(ref, tracking, pair_id, scene, consensus, record_timing)
    if out_dir is not None:
        pdir = Path(out_dir) / "pairs"
        pdir.mkdir(parents=True, exist_ok=True)
        res = None if result is None else result.to_json()
        if res is not None and not record_timing:
            res["stage_timings_ms"] = {k: 0.0 for k in res["stage_timings_ms"]}
        payload = {"row": row, "result": res}
        _atomic_write(pdir / f"{pair_id}.json", json.dumps(payload, indent=2))
        if overlays and result is not None:
            write_volume(checkerboard(ref.volume, tracking, result.transform),
                         pdir / f"{pair_id}.overlay.vvf")
    return row


def run_benchmark(manifest, config: RegistrationConfig, mode: Optional[str] = None,
                  out_dir=None, workers: Optional[int] = None, record_timing: bool = True,
                  overlays: bool = False, consensus_restarts: Optional[int] = None,
                  ) -> ExperimentReport:
    """Register every manifest pair and build the report (rows in manifest order).

    ``consensus_restarts`` perturbed restarts per pair give the restart-mean
    criterion; by default they run only for pairs without truth (where that
    criterion decides success).
    """
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    if mode is not None:
        config = replace(config, mode=mode)
    jobs = [(pid, trk, truth, out_dir, record_timing, overlays, consensus_restarts)
            for pid, trk, truth in manifest.pairs]
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(jobs) <= 1:
        _worker_init(manifest, config)
        rows = [_run_pair(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers, initializer=_worker_init,
                                 initargs=(manifest, config)) as pool:
            rows = list(pool.map(_run_pair, jobs))
    report = ExperimentReport.from_rows(config.mode, rows, config.to_json())
    if out_dir is not None:
        report.write(out_dir)
    return report


def write_phantom_dataset(spec, out_dir, count: int, seed: int, panorama: bool = True,
                          geometry=None) -> Path:
    """Reference image, ``count`` tracking acquisitions with truth, per-pair
    files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = replace(spec, seed=int(seed))
    ref, poses = acquire_reference(spec, geometry, panorama)
    write_volume(ref, out / "reference.vvf")
    box = spec.gland_box
    bbox = box.lo.tolist() + box.hi.tolist()
    _atomic_write(out / "reference.json", json.dumps({
        "bbox": bbox, "spec": spec.to_json(),
        "acquisition_poses": [p.to_json() for p in poses]}, indent=2))
    pairs = []
    for i in range(count):
        vol, scene, pose = acquire_tracking(spec, i, geometry)
        name = f"trk_{i:03d}"
        write_volume(vol, out / f"{name}.vvf")
        truth = scene.to_json()
        truth["probe_pose_rad"] = [pose.alpha, pose.beta, pose.lam]
        _atomic_write(out / f"{name}.truth.json", json.dumps(truth, indent=2))
        entry = {"id": f"pair_{i:03d}", "tracking": f"{name}.vvf", "truth": f"{name}.truth.json"}
        pairs.append(entry)
        _atomic_write(out / f"pair_{i:03d}.json", json.dumps(
            {"reference": "reference.vvf", "bbox": bbox, **entry}, indent=2))
    manifest = out / "manifest.json"
    _atomic_write(manifest, json.dumps({"reference": "reference.vvf", "bbox": bbox,
                                        "pairs": pairs}, indent=2))
    return manifest


__all__ = [
    "write_phantom_dataset",
    "CSV_COLUMNS", "ExperimentReport", "Manifest", "ManifestError", "ReproResult",
    "aggregate", "checkerboard", "evaluate_pair", "load_manifest", "parse_csv",
    "run_benchmark", "run_reproducibility", "sample_perturbation", "truncated_normal",
]
