"""Incidence-angle correction for photometric depth.

With the light at the camera centre, a Lambertian point at range r seen under
incidence angle theta has linear radiance I = cos(theta) / r**2 (albedo and
gain folded into the unknown scale). With psi = r**2 and A = 1 / I, and
gradients taken over the sphere of viewing directions, this reads

    |grad psi|**2 = 4 * (A**2 - psi**2),    psi <= A,

with equality where the surface faces the camera. The solver returns the
maximal solution, computed by fast sweeping: Gauss-Seidel passes in the four
diagonal orders, each pixel updated by a Hopf-Lax step over the eight
triangles of its 8-neighbourhood. The sphere metric is expressed in
normalized image coordinates, so the intrinsics enter only through the ray
slopes of each pixel.

Wherever the image border cuts the surface the solution has to assume
frontal incidence there; the error this introduces decays inwards along the
characteristics.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .core import CameraIntrinsics

# 8-neighbourhood in ring order, so consecutive entries span a triangle.
_DI = np.array([0, -1, -1, -1, 0, 1, 1, 1], dtype=np.int64)
_DJ = np.array([1, 1, 0, -1, -1, -1, 0, 1], dtype=np.int64)


@njit(cache=True)
def _hopf_lax(a, b, dx, dy, ex, ey, p00, p01, p11, c):
    """Minimize a + lam*(b - a) + c*|d - lam*e|_P over lam in [0, 1].

    Returns the interpolated value and the metric length at the minimizer.
    """
    al = dx * dx * p00 + 2.0 * dx * dy * p01 + dy * dy * p11
    be = dx * ex * p00 + (dx * ey + dy * ex) * p01 + dy * ey * p11
    ga = ex * ex * p00 + 2.0 * ex * ey * p01 + ey * ey * p11
    disc = max(al * ga - be * be, 0.0)
    delta = b - a
    best = a + c * np.sqrt(max(al, 0.0))
    lam = 0.0
    end = b + c * np.sqrt(max(al - 2.0 * be + ga, 0.0))
    if end < best:
        best = end
        lam = 1.0
    if c > 0.0 and delta * delta < c * c * ga:
        mu = np.sqrt(disc * delta * delta / (c * c * ga - delta * delta))
        if delta > 0.0:
            mu = -mu
        cand = (mu + be) / ga
        if 0.0 < cand < 1.0:
            val = a + cand * delta + c * np.sqrt(max(ga * cand * cand - 2.0 * be * cand + al, 0.0))
            if val < best:
                lam = cand
    ell = np.sqrt(max(ga * lam * lam - 2.0 * be * lam + al, 0.0))
    return a + lam * delta, ell


@njit(cache=True)
def _local_solve(base, ell, A):
    """psi solving psi = base + 2*ell*sqrt(A**2 - psi**2), capped at A."""
    if base >= A:
        return A
    k = 1.0 + 4.0 * ell * ell
    return (base + 2.0 * ell * np.sqrt(max(A * A * k - base * base, 0.0))) / k


@njit(cache=True)
def _update(psi, A, valid, i, j, X, Y):
    h, w = psi.shape
    x = X[i, j]
    y = Y[i, j]
    q2 = 1.0 + x * x + y * y
    p00 = (1.0 - x * x / q2) / q2
    p01 = -x * y / q2 / q2
    p11 = (1.0 - y * y / q2) / q2
    a_here = A[i, j]
    best = psi[i, j]
    for k in range(8):
        i1 = i + _DI[k]
        j1 = j + _DJ[k]
        if i1 < 0 or i1 >= h or j1 < 0 or j1 >= w or not valid[i1, j1]:
            continue
        i2 = i + _DI[(k + 1) % 8]
        j2 = j + _DJ[(k + 1) % 8]
        pair = 0 <= i2 < h and 0 <= j2 < w and valid[i2, j2]
        a = psi[i1, j1]
        dx = x - X[i1, j1]
        dy = y - Y[i1, j1]
        b = psi[i2, j2] if pair else a
        guess = min(a, b)
        if guess >= best:
            continue  # the update can never drop below its neighbours
        # The step cost depends on the unknown itself; a few fixed-point
        # rounds are plenty because it varies slowly.
        for _ in range(3):
            c = 2.0 * np.sqrt(max(a_here * a_here - guess * guess, 0.0))
            if pair:
                base, ell = _hopf_lax(a, b, dx, dy, X[i2, j2] - X[i1, j1], Y[i2, j2] - Y[i1, j1], p00, p01, p11, c)
            else:
                base = a
                ell = np.sqrt(dx * dx * p00 + 2.0 * dx * dy * p01 + dy * dy * p11)
            guess = _local_solve(base, ell, a_here)
        if guess < best:
            best = guess
    return best


@njit(cache=True)
def _sweep(psi, A, valid, X, Y, max_rounds, tol):
    h, w = psi.shape
    for rnd in range(max_rounds):
        change = 0.0
        for order in range(4):
            for ii in range(h):
                i = ii if order < 2 else h - 1 - ii
                for jj in range(w):
                    j = jj if order % 2 == 0 else w - 1 - jj
                    if not valid[i, j]:
                        continue
                    v = _update(psi, A, valid, i, j, X, Y)
                    if v < psi[i, j]:
                        rel = (psi[i, j] - v) / psi[i, j]
                        if rel > change:
                            change = rel
                        psi[i, j] = v
        if change < tol:
            return rnd + 1
    return max_rounds


def shading_range(
    radiance: np.ndarray,
    valid: np.ndarray,
    K: CameraIntrinsics,
    max_rounds: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, int]:
    """Range along each pixel ray, up to scale, from linear radiance.

    Returns the range map (0 on invalid pixels) and the number of sweep
    rounds used.
    """
    radiance = np.asarray(radiance, dtype=float)
    valid = np.asarray(valid, dtype=bool) & (radiance > 0)
    if radiance.shape != K.shape:
        raise ValueError(f"radiance {radiance.shape} does not match the intrinsics {K.shape}")
    A = np.where(valid, 1.0 / np.where(valid, radiance, 1.0), 0.0)
    psi = A.copy()
    X, Y = K.pixel_rays()
    rounds = _sweep(psi, A, valid, np.ascontiguousarray(X), np.ascontiguousarray(Y), max_rounds, tol)
    return np.sqrt(psi), int(rounds)
