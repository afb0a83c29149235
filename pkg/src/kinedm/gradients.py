"""Losses and manual reverse-mode differentiation of the full pipeline.

The configuration-space loss path runs

    network output -> unpack -> centered Gram -> eigendecomposition ->
    leading components -> anchor alignment -> chirality selection ->
    sequential angle recovery -> wrapped L1

and every stage here carries a hand-written adjoint, batched over samples.
The distance loss acts directly on the network output. Samples whose
geometry would make the backward ill-posed (near-degenerate eigenvalues,
rank-deficient predictions, observed points falling onto a joint axis) are
excluded from the configuration path and counted.
"""

from dataclasses import dataclass

import numpy as np

from .distgeo import jacobi_eigh, quaternion_profile_matrix
from .kinematics import BASE_ANCHOR_TARGETS, wrap_angle
from .network import backward_network, forward_cached
from .validation import as_float_array, check_edm

EIG_GAP_REL = 1e-8
RANK_FLOOR_REL = 1e-10
IK_RADIUS_SQ_MIN = 1e-12

_FLIP_Z = np.array([1.0, 1.0, -1.0])
_EYE3 = np.eye(3)

# centered anchor targets are constant: anchors are rows 0..2 of the point set
_ANCHOR_MEAN = BASE_ANCHOR_TARGETS.mean(axis=0)
_ANCHOR_CENTERED = BASE_ANCHOR_TARGETS - _ANCHOR_MEAN


def loss_distance(pred, target):
    """Frobenius norm of the difference of two full squared EDMs."""
    pred = as_float_array(pred, "pred")
    target = as_float_array(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.linalg.norm(pred - target))


def loss_config(pred, target):
    """Mean absolute joint-angle difference, wrapped to (-pi, pi] first."""
    pred = as_float_array(pred, "pred")
    target = as_float_array(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(wrap_angle(pred - target))))


def loss_total(l_c, l_d, weight, mode="full"):
    """Combined loss; the EDM-only mode drops the configuration term."""
    if weight < 0:
        raise ValueError("loss weight must be nonnegative")
    if mode == "edm_only":
        return l_d
    if mode == "full":
        return l_c + weight * l_d
    raise ValueError(f"unknown loss mode {mode!r}")


@dataclass
class ChainOps:
    """Chain quantities laid out for batched pipeline evaluation."""

    chain: object
    point_idx: np.ndarray
    ref_angle: np.ndarray
    translations: np.ndarray
    rotations: np.ndarray
    ee_offset: np.ndarray
    n_points: int
    iu: tuple
    centering: np.ndarray

    @classmethod
    def from_chain(cls, chain):
        if not chain._recovery:
            chain._build_recovery_plan()
        m = chain.n_points
        return cls(
            chain=chain,
            point_idx=np.array([s.point_index for s in chain._recovery]),
            ref_angle=np.array([s.reference_angle for s in chain._recovery]),
            translations=chain.translations,
            rotations=chain.rotations,
            ee_offset=chain.ee_offset,
            n_points=m,
            iu=np.triu_indices(m, k=1),
            centering=np.eye(m) - np.full((m, m), 1.0 / m),
        )

    @property
    def n_joints(self):
        return self.point_idx.size

    def unpack_batch(self, packed):
        b = packed.shape[0]
        d = np.zeros((b, self.n_points, self.n_points))
        d[:, self.iu[0], self.iu[1]] = packed
        return d + d.transpose(0, 2, 1)

    def pack_batch(self, full):
        return full[:, self.iu[0], self.iu[1]]


def _safe_recip(x, floor=1e-100):
    ok = np.abs(x) > floor
    return np.where(ok, 1.0 / np.where(ok, x, 1.0), 0.0)


def _cmds_forward(ops, packed):
    """Batched EDM -> leading-component embedding, with validity flags."""
    d = ops.unpack_batch(packed)
    j = ops.centering
    g = -0.5 * np.matmul(j, np.matmul(d, j))
    g = 0.5 * (g + g.transpose(0, 2, 1))
    vals, vecs = jacobi_eigh(g)
    lead = vals[:, 0]
    scale = np.maximum(lead, 1e-30)
    # backward needs separated eigenvalues around the three kept components
    # and a genuinely 3-dimensional embedding
    gaps = np.abs(vals[:, None, :3] - vals[:, :, None])
    gaps[:, np.arange(3), np.arange(3)] = np.inf
    eig_ok = (
        (lead > 0)
        & (gaps.min(axis=(1, 2)) > EIG_GAP_REL * scale)
        & (vals[:, 2] > RANK_FLOOR_REL * scale)
    )
    s = np.sqrt(np.maximum(vals[:, :3], 0.0))
    points = vecs[:, :, :3] * s[:, None, :]
    cache = {"vals": vals, "vecs": vecs, "s": s}
    return points, eig_ok, cache


def _cmds_backward(ops, cache, d_points):
    vals, vecs, s = cache["vals"], cache["vecs"], cache["s"]
    d_u3 = d_points * s[:, None, :]
    ds = np.einsum("bkj,bkj->bj", vecs[:, :, :3], d_points)
    d_vals3 = ds * np.where(s > 0, 0.5 * _safe_recip(s), 0.0)
    b, m = vals.shape
    d_vals = np.zeros((b, m))
    d_vals[:, :3] = d_vals3
    d_u = np.zeros((b, m, m))
    d_u[:, :, :3] = d_u3
    diff = vals[:, None, :] - vals[:, :, None]  # diff[b, i, j] = val_j - val_i
    f = _safe_recip(diff)
    f[:, np.arange(m), np.arange(m)] = 0.0
    inner = f * np.matmul(vecs.transpose(0, 2, 1), d_u)
    inner[:, np.arange(m), np.arange(m)] = d_vals
    dg = np.matmul(vecs, np.matmul(inner, vecs.transpose(0, 2, 1)))
    dg = 0.5 * (dg + dg.transpose(0, 2, 1))
    j = ops.centering
    dd = -0.5 * np.matmul(j, np.matmul(dg, j))
    return dd[:, ops.iu[0], ops.iu[1]] + dd[:, ops.iu[1], ops.iu[0]]


def _quat_to_matrix_batch(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = w * w + x * x - y * y - z * z
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (y * x + w * z)
    r[:, 1, 1] = w * w - x * x + y * y - z * z
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (z * x - w * y)
    r[:, 2, 1] = 2 * (z * y + w * x)
    r[:, 2, 2] = w * w - x * x - y * y + z * z
    return r


def _profile_matrix_batch(m):
    k = np.empty((m.shape[0], 4, 4))
    sxx, sxy, sxz = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    syx, syy, syz = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    szx, szy, szz = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    k[:, 0, 0] = sxx + syy + szz
    k[:, 0, 1] = k[:, 1, 0] = syz - szy
    k[:, 0, 2] = k[:, 2, 0] = szx - sxz
    k[:, 0, 3] = k[:, 3, 0] = sxy - syx
    k[:, 1, 1] = sxx - syy - szz
    k[:, 1, 2] = k[:, 2, 1] = sxy + syx
    k[:, 1, 3] = k[:, 3, 1] = sxz + szx
    k[:, 2, 2] = -sxx + syy - szz
    k[:, 2, 3] = k[:, 3, 2] = syz + szy
    k[:, 3, 3] = -sxx - syy + szz
    return k


def _align_forward(points):
    """Batched proper-rotation anchor alignment (quaternion formulation)."""
    src = points[:, :3, :]
    s_mean = src.mean(axis=1)
    s_cent = src - s_mean[:, None, :]
    m = np.einsum("bka,kc->bac", s_cent, _ANCHOR_CENTERED)
    k = _profile_matrix_batch(m)
    kvals, kvecs = jacobi_eigh(k)
    q = kvecs[:, :, 0]
    kscale = np.maximum(kvals[:, 0] - kvals[:, 3], 1e-30)
    horn_ok = (kvals[:, 0] - kvals[:, 1]) > EIG_GAP_REL * kscale
    rot = _quat_to_matrix_batch(q)
    trans = _ANCHOR_MEAN - np.einsum("bij,bj->bi", rot, s_mean)
    aligned = np.einsum("bkj,bij->bki", points, rot) + trans[:, None, :]
    cache = {
        "points": points,
        "s_mean": s_mean,
        "kvals": kvals,
        "kvecs": kvecs,
        "q": q,
        "rot": rot,
    }
    return aligned, horn_ok, cache


def _quat_rotation_adjoint(d_rot, q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    dq = np.empty_like(q)
    tr = d_rot[:, 0, 0] + d_rot[:, 1, 1] + d_rot[:, 2, 2]
    dq[:, 0] = 2 * (
        w * tr
        + z * (d_rot[:, 1, 0] - d_rot[:, 0, 1])
        + y * (d_rot[:, 0, 2] - d_rot[:, 2, 0])
        + x * (d_rot[:, 2, 1] - d_rot[:, 1, 2])
    )
    dq[:, 1] = 2 * (
        x * (d_rot[:, 0, 0] - d_rot[:, 1, 1] - d_rot[:, 2, 2])
        + y * (d_rot[:, 0, 1] + d_rot[:, 1, 0])
        + z * (d_rot[:, 0, 2] + d_rot[:, 2, 0])
        + w * (d_rot[:, 2, 1] - d_rot[:, 1, 2])
    )
    dq[:, 2] = 2 * (
        y * (-d_rot[:, 0, 0] + d_rot[:, 1, 1] - d_rot[:, 2, 2])
        + x * (d_rot[:, 0, 1] + d_rot[:, 1, 0])
        + w * (d_rot[:, 0, 2] - d_rot[:, 2, 0])
        + z * (d_rot[:, 1, 2] + d_rot[:, 2, 1])
    )
    dq[:, 3] = 2 * (
        z * (-d_rot[:, 0, 0] - d_rot[:, 1, 1] + d_rot[:, 2, 2])
        + w * (d_rot[:, 1, 0] - d_rot[:, 0, 1])
        + x * (d_rot[:, 0, 2] + d_rot[:, 2, 0])
        + y * (d_rot[:, 1, 2] + d_rot[:, 2, 1])
    )
    return dq


def _profile_matrix_adjoint(dk):
    """Adjoint of the (symmetric) profile-matrix construction."""
    b = dk.shape[0]
    dm = np.empty((b, 3, 3))
    dm[:, 0, 0] = dk[:, 0, 0] + dk[:, 1, 1] - dk[:, 2, 2] - dk[:, 3, 3]
    dm[:, 1, 1] = dk[:, 0, 0] - dk[:, 1, 1] + dk[:, 2, 2] - dk[:, 3, 3]
    dm[:, 2, 2] = dk[:, 0, 0] - dk[:, 1, 1] - dk[:, 2, 2] + dk[:, 3, 3]
    dm[:, 1, 2] = (dk[:, 0, 1] + dk[:, 1, 0]) + (dk[:, 2, 3] + dk[:, 3, 2])
    dm[:, 2, 1] = -(dk[:, 0, 1] + dk[:, 1, 0]) + (dk[:, 2, 3] + dk[:, 3, 2])
    dm[:, 2, 0] = (dk[:, 0, 2] + dk[:, 2, 0]) + (dk[:, 1, 3] + dk[:, 3, 1])
    dm[:, 0, 2] = -(dk[:, 0, 2] + dk[:, 2, 0]) + (dk[:, 1, 3] + dk[:, 3, 1])
    dm[:, 0, 1] = (dk[:, 0, 3] + dk[:, 3, 0]) + (dk[:, 1, 2] + dk[:, 2, 1])
    dm[:, 1, 0] = -(dk[:, 0, 3] + dk[:, 3, 0]) + (dk[:, 1, 2] + dk[:, 2, 1])
    return dm


def _align_backward(cache, d_aligned):
    points, rot, q = cache["points"], cache["rot"], cache["q"]
    d_points = np.einsum("bki,bij->bkj", d_aligned, rot)
    d_rot = np.einsum("bki,bkj->bij", d_aligned, points)
    d_trans = d_aligned.sum(axis=1)
    # trans = anchor_mean - rot @ s_mean
    d_rot -= np.einsum("bi,bj->bij", d_trans, cache["s_mean"])
    d_s_mean = -np.einsum("bij,bi->bj", rot, d_trans)

    dq = _quat_rotation_adjoint(d_rot, q)
    # eigenvector adjoint of the top component of the 4x4 profile matrix
    kvals, kvecs = cache["kvals"], cache["kvecs"]
    diff = kvals[:, None, :] - kvals[:, :, None]
    f = _safe_recip(diff)
    f[:, np.arange(4), np.arange(4)] = 0.0
    du = np.zeros((q.shape[0], 4, 4))
    du[:, :, 0] = dq
    inner = f * np.matmul(kvecs.transpose(0, 2, 1), du)
    dk = np.matmul(kvecs, np.matmul(inner, kvecs.transpose(0, 2, 1)))
    dk = 0.5 * (dk + dk.transpose(0, 2, 1))
    dm = _profile_matrix_adjoint(dk)
    # m = s_cent^T @ anchor_centered
    d_s_cent = np.einsum("bac,kc->bka", dm, _ANCHOR_CENTERED)
    d_src = d_s_cent - d_s_cent.mean(axis=1, keepdims=True)
    d_src += d_s_mean[:, None, :] / 3.0
    d_points[:, :3, :] += d_src
    return d_points


def _rot_z_batch(theta):
    c, s = np.cos(theta), np.sin(theta)
    z = np.zeros((theta.shape[0], 3, 3))
    z[:, 0, 0] = c
    z[:, 0, 1] = -s
    z[:, 1, 0] = s
    z[:, 1, 1] = c
    z[:, 2, 2] = 1.0
    return z


def _ik_forward(ops, pts):
    """Batched sequential angle recovery with rebuild residual.

    Returns (theta, per-step saves, radius validity, residual of the point
    set rebuilt from the recovered angles against the input points).
    """
    b = pts.shape[0]
    n = ops.n_joints
    rot = np.tile(_EYE3, (b, 1, 1))
    origin = np.zeros((b, 3))
    theta = np.empty((b, n))
    steps = []
    radius_ok = np.ones(b, dtype=bool)
    resid = np.einsum(
        "bkj,bkj->b",
        pts[:, :3, :] - BASE_ANCHOR_TARGETS,
        pts[:, :3, :] - BASE_ANCHOR_TARGETS,
    )
    for i in range(n):
        y = pts[:, ops.point_idx[i]]
        v = np.einsum("bji,bj->bi", rot, y - origin)
        r_sq = v[:, 0] ** 2 + v[:, 1] ** 2
        radius_ok &= r_sq > IK_RADIUS_SQ_MIN
        theta[:, i] = wrap_angle(np.arctan2(v[:, 1], v[:, 0]) - ops.ref_angle[i])
        z = _rot_z_batch(theta[:, i])
        steps.append({"rot": rot, "origin": origin, "v": v, "r_sq": r_sq, "z": z})
        rz = np.matmul(rot, z)
        origin = origin + rz @ ops.translations[i]
        rot = np.matmul(rz, ops.rotations[i])
        if i < n - 1:
            dp = origin - pts[:, 2 * (i + 1) + 1]
            dq = origin + rot[:, :, 2] - pts[:, 2 * (i + 1) + 2]
            resid += np.einsum("bj,bj->b", dp, dp) + np.einsum("bj,bj->b", dq, dq)
        else:
            de = origin + rot @ ops.ee_offset - pts[:, 2 * n + 1]
            resid += np.einsum("bj,bj->b", de, de)
    return theta, steps, radius_ok, resid


def _ik_backward(ops, pts, steps, d_theta):
    """Adjoint of the sequential recovery, propagating frame sensitivities."""
    b, n = d_theta.shape
    d_pts = np.zeros_like(pts)
    rot_bar = np.zeros((b, 3, 3))
    origin_bar = np.zeros((b, 3))
    for i in range(n - 1, -1, -1):
        st = steps[i]
        rot, origin, v, z = st["rot"], st["origin"], st["v"], st["z"]
        g = d_theta[:, i].copy()
        if i < n - 1:
            # frames i+1 consumed downstream: R' = R Z E, o' = o + R Z u
            u = ops.translations[i]
            e = ops.rotations[i]
            dz = np.einsum(
                "bji,bjk->bik",
                rot,
                np.einsum("bij,kj->bik", rot_bar, e)
                + np.einsum("bi,j->bij", origin_bar, u),
            )
            sin_t, cos_t = z[:, 1, 0], z[:, 0, 0]
            g += (
                -sin_t * dz[:, 0, 0]
                - cos_t * dz[:, 0, 1]
                + cos_t * dz[:, 1, 0]
                - sin_t * dz[:, 1, 1]
            )
            ze = np.matmul(z, e)
            zu = z @ u
            rot_bar = np.einsum("bij,bkj->bik", rot_bar, ze) + np.einsum(
                "bi,bj->bij", origin_bar, zu
            )
        else:
            rot_bar = np.zeros((b, 3, 3))
            origin_bar = np.zeros((b, 3))
        dv = np.zeros((b, 3))
        inv_r = _safe_recip(st["r_sq"])
        dv[:, 0] = -v[:, 1] * inv_r * g
        dv[:, 1] = v[:, 0] * inv_r * g
        push = np.einsum("bij,bj->bi", rot, dv)
        d_pts[:, ops.point_idx[i]] += push
        origin_bar = origin_bar - push
        rot_bar = rot_bar + np.einsum(
            "bi,bj->bij", pts[:, ops.point_idx[i]] - origin, dv
        )
    return d_pts


def pipeline_angles(ops, packed_batch):
    """Batched EDM-to-angles decode used by training and bulk evaluation.

    Returns (theta, valid mask, mirrored mask, forward caches) where the
    caches carry everything the backward pass needs.
    """
    points, eig_ok, cmds_cache = _cmds_forward(ops, packed_batch)
    aligned, horn_ok, align_cache = _align_forward(points)
    _, _, ok_a, res_a = _ik_forward(ops, aligned)
    flipped = aligned * _FLIP_Z
    _, _, ok_b, res_b = _ik_forward(ops, flipped)
    res_a = np.where(ok_a, res_a, np.inf)
    res_b = np.where(ok_b, res_b, np.inf)
    mirrored = res_b < res_a
    selected = np.where(mirrored[:, None, None], flipped, aligned)
    theta, steps, radius_ok, _ = _ik_forward(ops, selected)
    valid = eig_ok & horn_ok & radius_ok
    caches = {
        "cmds": cmds_cache,
        "align": align_cache,
        "steps": steps,
        "selected": selected,
        "mirrored": mirrored,
    }
    return theta, valid, mirrored, caches


def pipeline_backward(ops, caches, d_theta):
    """Map d(loss)/d(theta) back to d(loss)/d(packed network output)."""
    d_selected = _ik_backward(ops, caches["selected"], caches["steps"], d_theta)
    d_aligned = np.where(
        caches["mirrored"][:, None, None], d_selected * _FLIP_Z, d_selected
    )
    d_points = _align_backward(caches["align"], d_aligned)
    return _cmds_backward(ops, caches["cmds"], d_points)


def loss_and_gradients(
    params,
    inputs,
    target_packed,
    target_theta,
    ops,
    loss_mode="full",
    loss_weight=0.5,
    dropout=0.5,
    dropout_rng=None,
    train=True,
    update_running=True,
):
    """Scalar batch loss, gradients for every trainable array, and counters.

    The distance term is the batch mean of per-sample Frobenius norms over
    full matrices (evaluated on packed vectors: off-diagonal entries count
    twice). The configuration term is the batch-and-joint mean of wrapped
    absolute differences over the samples that pass the degeneracy guards.
    """
    inputs = as_float_array(inputs, "inputs")
    target_packed = as_float_array(target_packed, "target_packed")
    target_theta = as_float_array(target_theta, "target_theta")
    b = inputs.shape[0]
    out, net_cache = forward_cached(
        params, inputs, train=train, dropout=dropout, dropout_rng=dropout_rng,
        update_running=update_running,
    )

    diff = out - target_packed
    per_sample = np.sqrt(2.0 * np.einsum("bk,bk->b", diff, diff))
    l_d = float(per_sample.mean())
    d_out_dist = 2.0 * diff * _safe_recip(per_sample)[:, None] / b

    stats = {"skipped": 0, "mirrored": 0, "l_d": l_d}
    if loss_mode == "edm_only":
        stats["l_c"] = 0.0
        stats["loss"] = l_d
        grads = backward_network(params, net_cache, d_out_dist)
        return stats["loss"], grads, stats

    theta_hat, valid, mirrored, caches = pipeline_angles(ops, out)
    n = theta_hat.shape[1]
    n_valid = int(valid.sum())
    delta = wrap_angle(theta_hat - target_theta)
    if n_valid > 0:
        l_c = float(np.abs(delta[valid]).sum() / (n * n_valid))
        d_theta = np.sign(delta) * valid[:, None] / (n * n_valid)
        d_out_cfg = pipeline_backward(ops, caches, d_theta)
    else:
        l_c = 0.0
        d_out_cfg = np.zeros_like(out)

    total = l_c + loss_weight * l_d
    grads = backward_network(
        params, net_cache, d_out_cfg + loss_weight * d_out_dist
    )
    stats.update(
        l_c=l_c,
        loss=total,
        skipped=b - n_valid,
        mirrored=int(mirrored.sum()),
    )
    return total, grads, stats
