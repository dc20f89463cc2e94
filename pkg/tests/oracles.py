"""Independent reference implementations used as test oracles."""
import itertools

import numpy as np
from scipy.spatial.transform import Rotation


def geodesic(ra, rb) -> float:
    c = np.clip((np.trace(ra.T @ rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def geodesic_mean_grid(rotations, start, half_width=0.1, points=11, tol=1e-5):
    """Rotation minimizing the summed squared geodesic distance.

    Refined grid search over ``start @ exp(w)``: each round scans a cubic
    grid of ``points``^3 offsets, recenters on the best one and shrinks the
    grid until its step is below ``tol`` radians.
    """
    center = np.asarray(start, float)
    step = 2 * half_width / (points - 1)
    offsets = np.arange(points) - (points - 1) / 2

    def cost(r):
        return sum(geodesic(r, q) ** 2 for q in rotations)

    while step > tol:
        best, best_r = np.inf, center
        for i, j, k in itertools.product(offsets, repeat=3):
            r = center @ Rotation.from_rotvec(step * np.array([i, j, k])).as_matrix()
            c = cost(r)
            if c < best:
                best, best_r = c, r
        center = best_r
        step /= 4
    return center


def greedy_prune(energies, too_close, count):
    """Best-first selection skipping anything too close to an accepted pick."""
    order = sorted((e, i) for i, e in enumerate(energies) if np.isfinite(e))
    picked = []
    for _, i in order:
        if all(not too_close(i, j) for j in picked):
            picked.append(i)
            if len(picked) == count:
                break
    return picked


def pearson_loop(x, y) -> float:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / np.sqrt(sxx * syy)
