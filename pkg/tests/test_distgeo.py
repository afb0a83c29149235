"""EDM algebra: forward maps, eigensolver, cMDS, packing, alignment."""

import numpy as np
import pytest

from kinedm.distgeo import (
    EigenDecomposition,
    align_to_anchors,
    classical_mds,
    edm_from_points,
    fit_rigid,
    gram_from_edm,
    jacobi_eigh,
    pack_upper,
    symmetric_eig,
    unpack,
)
from kinedm.validation import ConvergenceError


def naive_edm(points):
    n = len(points)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = np.linalg.norm(points[i] - points[j]) ** 2
    return d


class TestEdmFromPoints:
    def test_unit_segment(self):
        d = edm_from_points([(0, 0, 0), (1, 0, 0)])
        np.testing.assert_allclose(d, [[0, 1], [1, 0]])

    def test_unit_square(self):
        square = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
        expect = [[0, 1, 2, 1], [1, 0, 1, 2], [2, 1, 0, 1], [1, 2, 1, 0]]
        np.testing.assert_allclose(edm_from_points(square), expect)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        p = rng.normal(size=(16, 3))
        np.testing.assert_allclose(edm_from_points(p), naive_edm(p), atol=1e-12)

    def test_agrees_with_gram_expansion(self):
        # diag(G) 1^T + 1 diag(G)^T - 2 G gives the same matrix
        rng = np.random.default_rng(8)
        p = rng.normal(size=(10, 3))
        g = p @ p.T
        dg = np.diag(g)
        alt = dg[:, None] + dg[None, :] - 2 * g
        np.testing.assert_allclose(edm_from_points(p), alt, atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            edm_from_points([(0, 0, np.nan), (1, 0, 0)])


class TestGramFromEdm:
    def test_two_point_case(self):
        g = gram_from_edm([[0, 1], [1, 0]])
        np.testing.assert_allclose(g, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)

    def test_zero_edm(self):
        np.testing.assert_allclose(gram_from_edm(np.zeros((5, 5))), np.zeros((5, 5)))

    def test_centered_gram_oracle(self):
        rng = np.random.default_rng(9)
        p = rng.normal(size=(12, 3))
        centered = p - p.mean(axis=0)
        g = gram_from_edm(edm_from_points(p))
        np.testing.assert_allclose(g, centered @ centered.T, atol=1e-10)

    def test_row_sums_vanish(self):
        rng = np.random.default_rng(10)
        g = gram_from_edm(edm_from_points(rng.normal(size=(9, 3))))
        np.testing.assert_allclose(g.sum(axis=0), 0, atol=1e-12)


class TestSymmetricEig:
    def test_identity(self):
        eig = symmetric_eig(np.eye(2))
        assert isinstance(eig, EigenDecomposition)
        np.testing.assert_allclose(eig.values, [1, 1])

    def test_classic_2x2(self):
        eig = symmetric_eig([[2, 1], [1, 2]])
        np.testing.assert_allclose(eig.values, [3, 1], atol=1e-12)
        v0 = eig.vectors[:, 0] * np.sign(eig.vectors[0, 0])
        v1 = eig.vectors[:, 1] * np.sign(eig.vectors[0, 1])
        np.testing.assert_allclose(v0, [1, 1] / np.sqrt(2), atol=1e-12)
        np.testing.assert_allclose(v1, [1, -1] / np.sqrt(2), atol=1e-12)

    def test_reconstruction_random_16(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(16, 16))
        m = 0.5 * (m + m.T)
        eig = symmetric_eig(m)
        recon = eig.vectors @ np.diag(eig.values) @ eig.vectors.T
        assert np.abs(recon - m).max() < 1e-9
        assert np.abs(eig.vectors.T @ eig.vectors - np.eye(16)).max() < 1e-9

    def test_matches_numpy_eigh_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            m = rng.normal(size=(10, 10))
            m = 0.5 * (m + m.T)
            eig = symmetric_eig(m)
            ref = np.linalg.eigvalsh(m)[::-1]
            np.testing.assert_allclose(eig.values, ref, atol=1e-10)

    def test_batched_agrees_with_single(self):
        rng = np.random.default_rng(13)
        ms = rng.normal(size=(6, 8, 8))
        ms = 0.5 * (ms + ms.transpose(0, 2, 1))
        vals, vecs = jacobi_eigh(ms)
        for i in range(6):
            single = symmetric_eig(ms[i])
            np.testing.assert_allclose(vals[i], single.values, atol=1e-12)
            recon = vecs[i] @ np.diag(vals[i]) @ vecs[i].T
            np.testing.assert_allclose(recon, ms[i], atol=1e-10)

    def test_iteration_cap_signals_failure(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        with pytest.raises(ConvergenceError):
            jacobi_eigh(m, sweep_cap=0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            symmetric_eig([[0, 1], [2, 0]])


class TestClassicalMds:
    def test_zero_edm_collapses_to_origin(self):
        p = classical_mds(np.zeros((4, 4)), 3)
        np.testing.assert_allclose(p, np.zeros((4, 3)))

    def test_two_points_dim1(self):
        p = classical_mds([[0, 1], [1, 0]], 1).ravel()
        np.testing.assert_allclose(np.sort(p), [-0.5, 0.5], atol=1e-12)

    def test_unit_square_round_trip(self):
        square = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)], dtype=float)
        d = edm_from_points(square)
        p = classical_mds(d, 2)
        p3 = np.column_stack([p, np.zeros(4)])
        assert np.abs(edm_from_points(p3) - d).max() < 1e-10

    def test_random_16x3_round_trip_and_centering(self):
        rng = np.random.default_rng(14)
        pts = rng.normal(size=(16, 3))
        d = edm_from_points(pts)
        rec = classical_mds(d, 3)
        assert np.abs(rec.mean(axis=0)).max() < 1e-10
        err = np.linalg.norm(edm_from_points(rec) - d) / np.linalg.norm(d)
        assert err < 1e-9

    def test_gram_rank_three_structure(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(size=(16, 3))
        eig = symmetric_eig(gram_from_edm(edm_from_points(pts)))
        assert np.abs(eig.values[3:]).max() < 1e-8 * eig.values[0]

    def test_noise_is_absorbed_by_truncation(self):
        rng = np.random.default_rng(16)
        pts = rng.uniform(-1, 1, size=(16, 3)) * [2, 2, 1]
        d = edm_from_points(pts)
        eps = 1e-3
        noise = rng.uniform(-eps, eps, size=d.shape)
        noise = 0.5 * (noise + noise.T)
        np.fill_diagonal(noise, 0.0)
        rec = classical_mds(d + noise, 3)
        assert np.abs(edm_from_points(rec) - d).max() < 50 * eps

    def test_dim_out_of_range(self):
        with pytest.raises(ValueError, match="dim"):
            classical_mds(np.zeros((3, 3)), 4)


class TestPacking:
    def test_sizes(self):
        assert pack_upper(np.zeros((16, 16))).size == 120
        assert pack_upper(np.zeros((7, 7))).size == 21

    def test_round_trip_exact(self):
        rng = np.random.default_rng(17)
        pts = rng.normal(size=(9, 3))
        d = edm_from_points(pts)
        assert np.array_equal(unpack(pack_upper(d)), d)

    def test_row_major_order(self):
        d = unpack(np.arange(1.0, 7.0))  # 4x4
        np.testing.assert_allclose(d[0, 1:], [1, 2, 3])
        np.testing.assert_allclose(d[1, 2:], [4, 5])
        np.testing.assert_allclose(d[2, 3], 6)

    def test_bad_length_rejected(self):
        with pytest.raises(ValueError, match="triangular"):
            unpack(np.zeros(4))

    def test_explicit_size_mismatch(self):
        with pytest.raises(ValueError, match="n_points"):
            unpack(np.zeros(6), n_points=5)


def random_rotation(rng):
    m = rng.normal(size=(3, 3))
    q, _ = np.linalg.qr(m)
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestFitRigid:
    def test_matches_svd_kabsch_oracle(self):
        rng = np.random.default_rng(18)
        for _ in range(20):
            src = rng.normal(size=(6, 3))
            dst = rng.normal(size=(6, 3))
            r, t = fit_rigid(src, dst)
            # oracle: SVD-based Kabsch with determinant correction
            h = (src - src.mean(0)).T @ (dst - dst.mean(0))
            u, _, vt = np.linalg.svd(h)
            d = np.sign(np.linalg.det(vt.T @ u.T))
            r_ref = vt.T @ np.diag([1, 1, d]) @ u.T
            np.testing.assert_allclose(r, r_ref, atol=1e-9)
            assert np.linalg.det(r) > 0

    def test_recovers_applied_motion(self):
        rng = np.random.default_rng(19)
        src = rng.normal(size=(8, 3))
        r_true = random_rotation(rng)
        t_true = rng.normal(size=3)
        r, t = fit_rigid(src, src @ r_true.T + t_true)
        np.testing.assert_allclose(r, r_true, atol=1e-10)
        np.testing.assert_allclose(t, t_true, atol=1e-10)


class TestAlignToAnchors:
    ANCHORS = [0, 1, 2]
    TARGETS = np.array([(1.0, 0, 0), (0, 1.0, 0), (0, 0, 0)])

    def base_points(self, rng, n=16):
        pts = rng.normal(size=(n, 3))
        pts[:3] = self.TARGETS
        return pts

    def test_identity_when_already_aligned(self):
        rng = np.random.default_rng(20)
        pts = self.base_points(rng)
        aligned, tf = align_to_anchors(pts, self.ANCHORS, self.TARGETS)
        assert not tf.mirrored
        np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(tf.translation, 0, atol=1e-9)
        np.testing.assert_allclose(aligned, pts, atol=1e-9)

    def test_recovers_rigid_motion(self):
        rng = np.random.default_rng(21)
        pts = self.base_points(rng)
        theta = np.pi / 2
        r = np.array(
            [
                [np.cos(theta), -np.sin(theta), 0],
                [np.sin(theta), np.cos(theta), 0],
                [0, 0, 1],
            ]
        )
        moved = pts @ r.T + np.array([1.0, 2.0, 3.0])
        aligned, tf = align_to_anchors(moved, self.ANCHORS, self.TARGETS)
        assert not tf.mirrored
        assert np.linalg.norm(aligned[:3] - self.TARGETS, axis=1).max() < 1e-10
        np.testing.assert_allclose(aligned, pts, atol=1e-9)

    def test_random_rigid_motions(self):
        rng = np.random.default_rng(22)
        for _ in range(25):
            pts = self.base_points(rng)
            moved = pts @ random_rotation(rng).T + rng.normal(size=3)
            aligned, tf = align_to_anchors(moved, self.ANCHORS, self.TARGETS)
            assert not tf.mirrored
            np.testing.assert_allclose(aligned, pts, atol=1e-9)

    def test_mirror_detected_with_four_anchors(self):
        # Three anchors span a plane and cannot see chirality; a fourth,
        # off-plane anchor makes the reflected fit win.
        rng = np.random.default_rng(23)
        for _ in range(10):
            pts = rng.normal(size=(10, 3))
            reflected = pts * np.array([1.0, 1.0, -1.0])
            aligned, tf = align_to_anchors(reflected, [0, 1, 2, 3], pts[:4])
            assert tf.mirrored
            assert np.linalg.norm(aligned[:4] - pts[:4], axis=1).max() < 1e-10
            np.testing.assert_allclose(aligned, pts, atol=1e-8)

    def test_three_coplanar_anchors_cannot_flag_mirror(self):
        # Documented limitation: any reflection of a planar anchor triple is
        # also reachable by a proper rotation, so the residual never fires.
        rng = np.random.default_rng(24)
        pts = self.base_points(rng)
        reflected = pts * np.array([1.0, 1.0, -1.0])
        _, tf = align_to_anchors(reflected, self.ANCHORS, self.TARGETS)
        assert not tf.mirrored

    def test_collinear_anchors_rejected(self):
        pts = np.array([(0.0, 0, 0), (1.0, 0, 0), (2.0, 0, 0), (0, 1.0, 0)])
        with pytest.raises(ValueError, match="collinear"):
            align_to_anchors(pts, [0, 1, 2], pts[:3])

    def test_nonfinite_rejected(self):
        pts = np.full((4, 3), np.inf)
        with pytest.raises(ValueError, match="non-finite"):
            align_to_anchors(pts, [0, 1, 2], self.TARGETS)
