"""Acceptance criteria A1-A10, one test each; every test records a PASS/FAIL line."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_rotation, random_transform
from oracles import geodesic, geodesic_mean_grid, greedy_prune
from test_transform import perturbed_cluster
from trusreg.harness import evaluate_pair, run_reproducibility
from trusreg.optimizer import OptimizerConfig, powell_minimize
from trusreg.phantom import (Cone, PhantomSpec, acquire_reference, acquire_tracking,
                             landmark_errors, make_patient, phantom_model, render_phantom)
from trusreg.pipeline import (GridParams, PreparedReference, RegistrationConfig, central_slices,
                              exploration_energies, level_energy, prepare_tracking,
                              select_candidates, too_close)
from trusreg.probe_model import generate_grid, grid_transforms, pose_to_transform
from trusreg.similarity import (Box, attribute_energy, domain_from_volume, moving_samples,
                                pearson_cc)
from trusreg.transform import (Dispersed, RigidTransform, angular_error, average_transforms,
                               euclidean_error, rms)
from trusreg.volume import Grid, Volume, gradient_magnitude
from trusreg.vvf import FormatError, read_volume, write_volume
from vvf_corpus import malformed_corpus

PATIENTS = 4
PAIRS_PER_PATIENT = 10
REPRO_PAIRS = 10
PAIR_TIME_CAP_S = 300.0


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------------------- phantom suite

@pytest.fixture(scope="module")
def suite():
    """40 seeded pairs registered in both modes, plus restarts on 10 successful ones."""
    rows3, rows2, landmarks, times, repro = [], [], ([], []), [], []
    for p in range(PATIENTS):
        spec = make_patient(p)
        reference, _ = acquire_reference(spec)
        ref3 = PreparedReference.build(reference, spec.gland_box, RegistrationConfig())
        ref2 = PreparedReference.build(reference, spec.gland_box,
                                       RegistrationConfig(mode="3DO2D"))
        for i in range(PAIRS_PER_PATIENT):
            vol, scene, _ = acquire_tracking(spec, i)
            pid = f"p{p}_{i:02d}"
            t0 = time.perf_counter()
            row, result = evaluate_pair(ref3, vol, pid, scene)
            times.append(time.perf_counter() - t0)
            rows3.append(row)
            if row["success"]:
                calc, needles = landmark_errors(scene, result.transform)
                landmarks[0].extend(calc)
                landmarks[1].extend(needles)
                if len(repro) < REPRO_PAIRS:
                    rep = run_reproducibility(ref3, vol, 10, (2.0, 2.0), seed=len(repro))
                    repro.append(rep)
            rows2.append(evaluate_pair(ref2, central_slices(vol), pid, scene)[0])
    return {"rows3": rows3, "rows2": rows2, "landmarks": landmarks, "times": times,
            "repro": repro}


def test_a1_global_capture(suite):
    rows = suite["rows3"]
    rate = np.mean([r["success"] for r in rows])
    slowest = max(suite["times"])
    record("A1", rate >= 0.90 and slowest <= PAIR_TIME_CAP_S,
           f"3D-3D success {sum(r['success'] for r in rows)}/{len(rows)} = {100 * rate:.1f}% "
           f"(need >= 90%), mean {np.mean(suite['times']):.1f} s, max {slowest:.1f} s per pair")


def test_a2_o2d_capture(suite):
    rows = suite["rows2"]
    rate = np.mean([r["success"] for r in rows])
    record("A2", rate >= 0.80,
           f"3D-o2D success {sum(r['success'] for r in rows)}/{len(rows)} = {100 * rate:.1f}% "
           f"(need >= 80%)")


def test_a3_reproducibility(suite):
    reps = suite["repro"]
    ee = [e for r in reps for e in r.eps_e]
    ea = [a for r in reps for a in r.eps_a]
    failed = sum(len(r.failures) for r in reps)
    ok = len(reps) == REPRO_PAIRS and failed == 0 and rms(ee) <= 1.0 and rms(ea) <= 2.5
    record("A3", ok, f"{len(reps)} pairs x 10 restarts: eps_E rms {rms(ee):.3f} mm (<= 1.0), "
                     f"eps_A rms {rms(ea):.3f} deg (<= 2.5), failed restarts {failed}")


def test_a4_landmarks(suite):
    calc, needles = suite["landmarks"]
    ok = (len(calc) > 0 and rms(calc) <= 2.0 and max(calc) <= 4.5 and rms(needles) <= 5.0)
    record("A4", ok, f"calcification rms {rms(calc):.3f} mm (<= 2.0), max {max(calc):.3f} mm "
                     f"(<= 4.5), needle rms {rms(needles):.3f} deg (<= 5.0), "
                     f"{len(calc)} calcifications, {len(needles)} needles")


# --------------------------------------------------------------------------- properties

def test_a5_exploration_accounting():
    spec = make_patient(0)
    model = phantom_model(spec)
    grid = generate_grid(model)
    n_ok = len(grid) == 12960
    ts = grid_transforms(model, grid)
    c = model.ellipsoid_center
    rng = np.random.default_rng(5)
    prune_ok = True
    for _ in range(100):
        e = rng.random(len(ts))
        e[rng.random(len(ts)) < 0.1] = np.inf
        oracle = greedy_prune(e, lambda i, j: too_close(ts[i], ts[j], c, (5.0, 10.0)), 5)
        prune_ok &= select_candidates(e, ts, c, 5, (5.0, 10.0)) == oracle
    geometry = Grid((64, 64, 64), [0.8] * 3)
    cfg = RegistrationConfig(pyramid_levels=4, final_level=1)
    reference, _ = acquire_reference(spec, geometry)
    ref = PreparedReference.build(reference, spec.gland_box, cfg)
    vol, _, _ = acquire_tracking(spec, 0, geometry)
    fixed = prepare_tracking(vol, cfg)[cfg.coarsest]
    cached = exploration_energies(ref, fixed, use_cache=True)
    cache = ref.cache_for(fixed.lattice)
    exact = True
    for i in rng.choice(len(ts), 50, replace=False):
        e = level_energy(ref, fixed, ref.transforms[i])
        exact &= (cached[i] == np.inf) if e is None else (cached[i] == e)
        want = moving_samples(fixed.domain, ref.pyramid[cfg.coarsest], ref.transforms[i], ref.box)
        exact &= np.array_equal(cache.intensity[i, fixed.domain.index], want, equal_nan=True)
    record("A5", n_ok and prune_ok and exact,
           f"{len(grid)} poses (need 12960), pruning == greedy oracle on 100 vectors: {prune_ok}, "
           f"cached == uncached bit-exact on 50 poses: {exact}")


def test_a6_energy_identities():
    spec = replace(make_patient(1), speckle_sigma=0.3)
    vol, _ = render_phantom(spec, RigidTransform.identity(), Grid((32, 32, 32), [1.6] * 3))
    data = np.round(vol.data).astype(np.float64)
    ref = vol.with_data(data, vol.mask)
    d_int, d_grad = domain_from_volume(ref), domain_from_volume(gradient_magnitude(ref))
    ident = RigidTransform.identity()

    def energy(moving):
        return attribute_energy(d_int, d_grad, moving, gradient_magnitude(moving), ident)

    checks = {
        "self": abs(energy(ref)) <= 1e-6,
        "negated": abs(energy(ref.with_data(-data, ref.mask))) <= 1e-6,
        "cc self": abs(pearson_cc(d_int, ref, ident) - 1.0) <= 1e-9,
        "cc negated": abs(pearson_cc(d_int, ref.with_data(-data, ref.mask), ident) + 1.0) <= 1e-9,
    }
    # a second acquisition with fresh speckle; integer data and power-of-two scales keep
    # every affine image exactly representable in the float32 storage
    other, _ = render_phantom(replace(spec, seed=99), RigidTransform.identity(), vol.grid)
    odata = np.round(other.data).astype(np.float64)
    base = energy(other.with_data(odata, other.mask))
    worst = 0.0
    for a, b in [(0.25, 3.0), (0.5, -40.0), (2.0, 17.0), (4.0, -250.0)]:
        worst = max(worst, abs(energy(other.with_data(a * odata + b, other.mask)) - base))
        cc = pearson_cc(d_int, ref.with_data(a * data + b, ref.mask), ident)
        checks[f"cc affine {a}"] = abs(cc - 1.0) <= 1e-9
    checks["affine invariance"] = worst <= 1e-9
    failed = [k for k, v in checks.items() if not v]
    record("A6", not failed, f"{len(checks)} identities, affine energy drift {worst:.2e} "
                             f"(<= 1e-9), failed: {failed or 'none'}")


def _dense_oracle_case(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng([seed, 7])
    spec = make_patient(seed)
    wide = replace(spec, cone=Cone(apex=(25.4, 25.4, -60.0), half_angle_deg=45.0,
                                   depth_mm=200.0, sweep_half_angle_deg=None))
    geometry = Grid((32, 32, 32), [1.6] * 3)
    # the reference extends 8 voxels past the tracking lattice on every side and the box
    # covers all of it, so no tracking point enters or leaves the domain near the optimum
    # and the energy is continuous at the 0.1 mm / 0.1 deg scale of the grid
    outer = Grid((48, 48, 48), [1.6] * 3, [-12.8] * 3)
    reference, _ = render_phantom(replace(wide, seed=1000 + seed), RigidTransform.identity(),
                                  outer)
    pose = (rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.5, 0.5))
    truth = pose_to_transform(phantom_model(spec), pose)
    tracking, _ = render_phantom(replace(wide, seed=2000 + seed), truth, geometry)
    cfg = RegistrationConfig(pyramid_levels=2, final_level=1, grid=GridParams(3, 3, 4))
    lo, hi = outer.index_to_world(np.zeros((1, 3)))[0], outer.index_to_world([[47, 47, 47]])[0]
    ref = PreparedReference.build(reference, Box(lo, hi), cfg)
    fixed = prepare_tracking(tracking, cfg)[cfg.coarsest]
    c = np.asarray(spec.gland_center, dtype=np.float64)

    def at(z):
        # z: rotation vector in degrees about the gland center, then translation in mm
        z = np.asarray(z, dtype=np.float64)
        return RigidTransform.from_rotvec(np.radians(z[:3]), z[3:], center=c) @ truth

    def f(z):
        # the energy restricted to the neighborhood: undefined outside it
        if np.any(np.abs(z) > 1.0 + 1e-12):
            return math.inf
        e = level_energy(ref, fixed, at(z))
        return math.inf if e is None else e

    res = powell_minimize(f, np.zeros(6), OptimizerConfig(1e-6, 1e-14, 500, 0.2))
    z = res.x
    steps = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.1), 10)
    mesh = np.stack(np.meshgrid(steps, steps, steps, indexing="ij"), -1).reshape(-1, 3)
    worst = 0
    for part in (slice(0, 3), slice(3, 6)):
        vals = []
        for g in mesh:
            q = z.copy()
            q[part] = g
            vals.append(f(q))
        best = mesh[int(np.argmin(vals))]
        worst = max(worst, int(np.max(np.round(np.abs(best - z[part]) / 0.1 - 1e-9 + 0.5))))
        if min(vals) < res.fun - 1e-12 and np.max(np.abs(best - z[part])) > 0.1 + 1e-9:
            return False, f"case {seed}: grid {best} beats Powell {np.round(z[part], 3)}"
    return worst <= 1, f"case {seed}: off by {worst} cell(s)"


def test_a7_optimizer_oracle():
    outcomes = [_dense_oracle_case(s) for s in range(5)]
    record("A7", all(ok for ok, _ in outcomes), "; ".join(msg for _, msg in outcomes))


def test_a8_geometry_invariants():
    model = phantom_model(PhantomSpec())
    rng = np.random.default_rng(8)
    lim = math.radians(45.0)
    surf, line = 0.0, 0.0
    for a, b, lam in zip(rng.uniform(-lim, lim, 10**4), rng.uniform(-lim, lim, 10**4),
                         rng.uniform(-math.pi, math.pi, 10**4)):
        t = pose_to_transform(model, (a, b, lam))
        origin = t.apply(model.probe_origin_ref)
        surf = max(surf, abs(model.implicit(origin)))
        d = t.rotation @ model.probe_axis_ref
        r = model.fp_rect - origin
        line = max(line, float(np.linalg.norm(r - (r @ d) * d)))
    t0 = pose_to_transform(model, (0.0, 0.0, 0.0))
    ident = (np.allclose(t0.rotation, np.eye(3), atol=1e-12)
             and np.allclose(t0.translation, 0.0, atol=1e-9))
    record("A8", surf < 1e-9 and line < 1e-6 and ident,
           f"10^4 poses: surface residual {surf:.2e} (< 1e-9), axis-to-fixed-point distance "
           f"{line:.2e} mm (< 1e-6), zero pose is identity: {ident}")


def test_a9_transform_math():
    rng = np.random.default_rng(9)
    checks = {}
    group = True
    for _ in range(100):
        a, b = random_transform(rng), random_transform(rng)
        p = rng.normal(scale=30, size=3)
        group &= np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-9, rtol=0)
        group &= np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-9, rtol=0)
        group &= np.max(np.abs((a @ a.inverse()).rotation - np.eye(3))) <= 1e-9
    checks["group laws"] = group
    t = random_transform(rng)
    checks["average identical"] = average_transforms([t] * 4) is t
    rz = [RigidTransform.from_rotvec([0, 0, math.radians(d)], [1, 2, 3]) for d in (10, -10)]
    m = average_transforms(rz)
    checks["average symmetric"] = (np.allclose(m.rotation, np.eye(3), atol=1e-12)
                                   and np.allclose(m.translation, [1, 2, 3], atol=1e-12))
    try:
        average_transforms([RigidTransform.identity(), RigidTransform.from_rotvec([0, 0, 1.8])])
        checks["dispersed"] = False
    except Dispersed:
        checks["dispersed"] = True
    shifted = RigidTransform(t.rotation, t.translation + [3, 0, 0])
    checks["euclidean"] = abs(euclidean_error(shifted, t, rng.normal(size=3)) - 3.0) <= 1e-12
    axis = random_rotation(rng)[:, 0]
    checks["angular"] = abs(angular_error(RigidTransform.identity(),
                                          RigidTransform.from_rotvec(axis * math.radians(25)))
                            - 25.0) <= 1e-9
    worst = 0.0
    for _ in range(20):
        ts = perturbed_cluster(rng)
        oracle = geodesic_mean_grid([x.rotation for x in ts], ts[0].rotation)
        worst = max(worst, geodesic(average_transforms(ts).rotation, oracle))
    checks["20 clusters"] = worst < 1e-3
    failed = [k for k, v in checks.items() if not v]
    record("A9", not failed, f"{len(checks)} checks, worst cluster deviation {worst:.2e} rad "
                             f"(< 1e-3), failed: {failed or 'none'}")


def test_a10_io(tmp_path):
    rng = np.random.default_rng(10)
    exact = 0
    for k in range(20):
        dims = tuple(int(d) for d in rng.integers(1, 12, size=3))
        vol = Volume(rng.normal(scale=100, size=dims), rng.uniform(0.05, 5, 3),
                     rng.normal(scale=50, size=3), random_rotation(rng), rng.random(dims) > 0.3)
        path = tmp_path / f"v{k}.vvf"
        write_volume(vol, path)
        back = read_volume(path)
        exact += (back.dims == vol.dims and np.array_equal(back.spacing, vol.spacing)
                  and np.array_equal(back.origin, vol.origin)
                  and np.array_equal(back.axes, vol.axes)
                  and np.array_equal(back.data.view(np.uint32), vol.data.view(np.uint32))
                  and np.array_equal(back.mask, vol.mask))
    rejected = 0
    corpus = malformed_corpus()
    for name, blob in corpus.items():
        path = tmp_path / f"{name}.vvf"
        path.write_bytes(blob)
        try:
            read_volume(path)
        except FormatError:
            rejected += 1
    record("A10", exact == 20 and rejected == len(corpus) == 10,
           f"{exact}/20 bit-exact round trips, {rejected}/{len(corpus)} malformed files rejected")
