"""Euclidean distance matrix algebra.

Squared-distance convention throughout: an EDM entry (u, v) holds
``||p_u - p_v||**2``. The module provides the forward map from points to
EDMs, the centered Gram construction, a built-in Jacobi eigensolver,
classical multidimensional scaling, strict-upper-triangle packing, and
anchor-based rigid alignment with an optional mirrored retry.
"""

from dataclasses import dataclass

import numpy as np

from .validation import (
    ConvergenceError,
    as_float_array,
    check_edm,
    packed_size,
    points_from_packed_size,
)

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _njit = None

# Reflection applied by mirrored alignments: through the x = 0 plane.
MIRROR_SIGNS = np.array([-1.0, 1.0, 1.0])

JACOBI_SWEEP_CAP = 100
JACOBI_TOL = 1e-12


def edm_from_points(points):
    """Squared pairwise distances of an (n, 3) point array as an (n, n) matrix."""
    p = as_float_array(points, "points")
    if p.ndim != 2:
        raise ValueError(f"points: expected a 2-d array, got shape {p.shape}")
    diff = p[:, None, :] - p[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d, 0.0)
    return d


def gram_from_edm(d):
    """Centered Gram matrix -1/2 J D J of a squared EDM (J the centering matrix)."""
    d = check_edm(d)
    n = d.shape[0]
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    g = -0.5 * (j @ d @ j)
    return 0.5 * (g + g.T)


def _round_robin_pairs(k):
    """Disjoint pivot pairs per round covering all index pairs once per sweep.

    Circle-method schedule: k-1 rounds (k even) of k/2 disjoint pairs, so the
    rotations within a round commute and can be applied simultaneously.
    """
    players = list(range(k)) if k % 2 == 0 else list(range(k + 1))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < k and b < k:
                pairs.append((min(a, b), max(a, b)))
        rounds.append(
            (
                np.array([p for p, _ in pairs], dtype=np.intp),
                np.array([q for _, q in pairs], dtype=np.intp),
            )
        )
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_norms(a):
    # summed directly over off-diagonal entries; subtracting the diagonal
    # mass from the total would cancel catastrophically near convergence
    off = a * (1.0 - np.eye(a.shape[-1]))
    return np.sqrt(np.einsum("...ij,...ij->...", off, off))


def _jacobi_sweeps_numpy(a, v, sweep_cap, tol, scale):
    """Vectorized sweeps with a round-robin pivot schedule (rounds touch
    disjoint rows, so a round applies across the whole batch at once)."""
    rounds = _round_robin_pairs(a.shape[-1])
    for _ in range(sweep_cap):
        if np.all(_off_norms(a) <= tol * scale):
            return True
        for ps, qs in rounds:
            apq = a[:, ps, qs]
            app = a[:, ps, ps]
            aqq = a[:, qs, qs]
            # stable zeroing rotation: t = tan(theta) without forming the
            # overflow-prone ratio (aqq - app) / (2 apq)
            delta = aqq - app
            sgn = np.where(delta >= 0.0, 1.0, -1.0)
            denom = np.abs(delta) + np.hypot(delta, 2.0 * apq)
            t = np.where(
                apq != 0.0, 2.0 * apq * sgn / np.where(denom > 0, denom, 1.0), 0.0
            )
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cr, sr = c[:, :, None], s[:, :, None]
            rp, rq = a[:, ps, :], a[:, qs, :]
            a[:, ps, :] = cr * rp - sr * rq
            a[:, qs, :] = sr * rp + cr * rq
            cc, sc = c[:, None, :], s[:, None, :]
            cp, cq = a[:, :, ps], a[:, :, qs]
            a[:, :, ps] = cc * cp - sc * cq
            a[:, :, qs] = sc * cp + cc * cq
            a[:, ps, qs] = 0.0
            a[:, qs, ps] = 0.0
            vp, vq = v[:, :, ps], v[:, :, qs]
            v[:, :, ps] = cc * vp - sc * vq
            v[:, :, qs] = sc * vp + cc * vq
    return bool(np.all(_off_norms(a) <= tol * scale))


def _jacobi_sweeps_loop(a, v, sweep_cap, tol, scale):
    """Classic row-cyclic sweeps, one matrix at a time. Compiled with numba
    when available; the pure-Python body doubles as the reference."""
    b, k = a.shape[0], a.shape[1]
    for m in range(b):
        am = a[m]
        vm = v[m]
        ok = False
        for _ in range(sweep_cap):
            off = 0.0
            for i in range(k):
                for j in range(k):
                    if i != j:
                        off += am[i, j] * am[i, j]
            if np.sqrt(off) <= tol * scale[m]:
                ok = True
                break
            for p in range(k - 1):
                for q in range(p + 1, k):
                    apq = am[p, q]
                    if apq == 0.0:
                        continue
                    delta = am[q, q] - am[p, p]
                    sgn = 1.0 if delta >= 0.0 else -1.0
                    t = 2.0 * apq * sgn / (abs(delta) + np.hypot(delta, 2.0 * apq))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    for i in range(k):
                        aip = am[i, p]
                        aiq = am[i, q]
                        am[i, p] = c * aip - s * aiq
                        am[i, q] = s * aip + c * aiq
                    for i in range(k):
                        api = am[p, i]
                        aqi = am[q, i]
                        am[p, i] = c * api - s * aqi
                        am[q, i] = s * api + c * aqi
                    am[p, q] = 0.0
                    am[q, p] = 0.0
                    for i in range(k):
                        vip = vm[i, p]
                        viq = vm[i, q]
                        vm[i, p] = c * vip - s * viq
                        vm[i, q] = s * vip + c * viq
        if not ok:
            return False
    return True


if _njit is not None:
    _jacobi_sweeps_compiled = _njit(cache=True)(_jacobi_sweeps_loop)
else:  # pragma: no cover
    _jacobi_sweeps_compiled = None


def jacobi_eigh(a, sweep_cap=JACOBI_SWEEP_CAP, tol=JACOBI_TOL):
    """Eigendecomposition of symmetric matrices by cyclic Jacobi rotations.

    Accepts a (k, k) matrix or a (batch, k, k) stack; inputs are symmetrized
    first. Returns eigenvalues sorted descending (stable order for ties) and
    the matching orthonormal eigenvector columns.

    Convergence: off-diagonal Frobenius mass below ``tol`` (relative to the
    matrix scale when that exceeds one). Raises ConvergenceError after
    ``sweep_cap`` sweeps.
    """
    a = as_float_array(a, "matrix")
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"matrix: expected (..., k, k), got shape {a.shape}")
    a = np.ascontiguousarray(0.5 * (a + a.transpose(0, 2, 1)))
    b, k = a.shape[0], a.shape[-1]
    v = np.tile(np.eye(k), (b, 1, 1))
    scale = np.maximum(1.0, np.sqrt(np.einsum("bij,bij->b", a, a)))

    if _jacobi_sweeps_compiled is not None:
        converged = _jacobi_sweeps_compiled(a, v, sweep_cap, tol, scale)
    else:  # pragma: no cover
        converged = _jacobi_sweeps_numpy(a, v, sweep_cap, tol, scale)
    if not converged:
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge in {sweep_cap} sweeps"
        )

    vals = np.einsum("bii->bi", a).copy()
    order = np.argsort(-vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    vecs = np.take_along_axis(v, order[:, None, :], axis=2)
    if single:
        return vals[0], vecs[0]
    return vals, vecs


@dataclass
class EigenDecomposition:
    """Eigenvalues (descending) and orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray


def symmetric_eig(m):
    """Decompose a symmetric matrix as  U diag(values) U^T."""
    m = as_float_array(m, "matrix")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix: expected square, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max())) if m.size else 1.0
    if np.abs(m - m.T).max() > 1e-9 * scale:
        raise ValueError("matrix: not symmetric within 1e-9")
    vals, vecs = jacobi_eigh(m)
    return EigenDecomposition(values=vals, vectors=vecs)


def classical_mds(d, dim):
    """Recover a geometrically centered point set from a squared EDM.

    Centers the EDM into a Gram matrix, eigendecomposes it and keeps the
    ``dim`` leading components; negative eigenvalues (noise) are clamped to
    zero before the square root.
    """
    d = check_edm(d)
    n = d.shape[0]
    if not 0 < dim <= n:
        raise ValueError(f"dim must be in 1..{n}, got {dim}")
    eig = symmetric_eig(gram_from_edm(d))
    lam = np.maximum(eig.values[:dim], 0.0)
    return eig.vectors[:, :dim] * np.sqrt(lam)


def pack_upper(d):
    """Row-major strict upper triangle of a square matrix as a flat vector."""
    d = as_float_array(d, "edm")
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"edm: expected square, got shape {d.shape}")
    iu = np.triu_indices(d.shape[0], k=1)
    return d[iu].copy()


def unpack(v, n_points=None):
    """Rebuild the full symmetric zero-diagonal matrix from a packed vector."""
    v = as_float_array(v, "packed")
    if v.ndim != 1:
        raise ValueError(f"packed: expected 1-d, got shape {v.shape}")
    n = points_from_packed_size(v.size, "packed")
    if n_points is not None and n_points != n:
        raise ValueError(
            f"packed: length {v.size} does not match n_points={n_points} "
            f"(expected {packed_size(n_points)})"
        )
    d = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    d[iu] = v
    return d + d.T


@dataclass
class RigidTransform:
    """Proper rotation + translation, optionally preceded by a reflection.

    ``mirrored`` records that points are first reflected through the x = 0
    plane; the stored rotation always has det = +1.
    """

    rotation: np.ndarray
    translation: np.ndarray
    mirrored: bool = False

    def apply(self, points):
        p = as_float_array(points, "points")
        if self.mirrored:
            p = p * MIRROR_SIGNS
        return p @ self.rotation.T + self.translation


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (y * x + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (z * x - w * y), 2 * (z * y + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def quaternion_profile_matrix(m):
    """Symmetric 4x4 matrix whose top eigenvector is the optimal rotation
    quaternion for the correspondence cross-covariance ``m`` (Horn's method)."""
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    return np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )


def fit_rigid(src, dst):
    """Least-squares proper rotation R and translation t with R @ src + t ~ dst.

    The optimal proper rotation (the Kabsch solution) is computed via the
    quaternion eigenvector formulation, which never needs a determinant
    correction.
    """
    src = as_float_array(src, "src")
    dst = as_float_array(dst, "dst")
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both have shape (m, 3)")
    s_mean = src.mean(axis=0)
    d_mean = dst.mean(axis=0)
    m = (src - s_mean).T @ (dst - d_mean)
    vals, vecs = jacobi_eigh(quaternion_profile_matrix(m))
    r = _quat_to_matrix(vecs[:, 0])
    t = d_mean - r @ s_mean
    return r, t


def _anchor_spread(targets):
    diff = targets[:, None, :] - targets[None, :, :]
    return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).max()))


def align_to_anchors(points, anchor_indices, anchor_targets):
    """Rigidly align a point set so its anchors land on known coordinates.

    Fits the proper rotation + translation minimizing the anchor residual.
    If the residual exceeds 1e-6 times the anchor spread, the fit is retried
    after reflecting all points through the x = 0 plane and the smaller
    residual wins, with ``mirrored`` set accordingly. Note that three anchors
    span a plane, which any reflection of them also fits exactly with a
    proper rotation: detecting mirrored inputs through this residual requires
    at least four non-coplanar anchors.

    Returns (aligned points, RigidTransform).
    """
    p = as_float_array(points, "points")
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"points: expected (n, 3), got shape {p.shape}")
    idx = np.asarray(anchor_indices, dtype=np.intp)
    targets = as_float_array(anchor_targets, "anchor_targets")
    if idx.ndim != 1 or idx.size < 3:
        raise ValueError("need at least 3 anchors")
    if targets.shape != (idx.size, 3):
        raise ValueError(
            f"anchor_targets: expected shape {(idx.size, 3)}, got {targets.shape}"
        )
    src = p[idx]
    for name, pts in (("anchors", src), ("anchor_targets", targets)):
        centered = pts - pts.mean(axis=0)
        scatter_vals, _ = jacobi_eigh(centered.T @ centered)
        if scatter_vals[1] <= 1e-12 * max(scatter_vals[0], 1e-30):
            raise ValueError(f"{name} are collinear; rotation is underdetermined")

    spread = _anchor_spread(targets)
    r, t = fit_rigid(src, targets)
    plain = RigidTransform(rotation=r, translation=t, mirrored=False)
    resid_plain = np.linalg.norm(plain.apply(src) - targets, axis=1).max()
    if resid_plain <= 1e-6 * spread:
        return plain.apply(p), plain

    r_m, t_m = fit_rigid(src * MIRROR_SIGNS, targets)
    mirrored = RigidTransform(rotation=r_m, translation=t_m, mirrored=True)
    resid_mirror = np.linalg.norm(mirrored.apply(src) - targets, axis=1).max()
    best = mirrored if resid_mirror < resid_plain else plain
    return best.apply(p), best
