"""Acceptance criteria, one test per criterion, with a PASS line each.

Run ``pytest tests/test_acceptance.py -s`` to see the per-criterion lines.
Criteria 6 and 7 train at desk scale (several minutes each on two CPU
cores) and carry the ``slow`` marker; everything else finishes in seconds.
"""

import json
import time

import numpy as np
import pytest

from kinedm.cli import main as cli_main
from kinedm.datasets import (
    bundled_camera_path,
    generate_dataset,
    inputs_from_records,
    load_camera,
    sample_configuration,
)
from kinedm.distgeo import (
    classical_mds,
    edm_from_points,
    gram_from_edm,
    pack_upper,
    symmetric_eig,
)
from kinedm.gradients import ChainOps, loss_and_gradients, pipeline_angles
from kinedm.kinematics import (
    align_reconstruction,
    angles_from_edm,
    build_point_set,
    bundled_chain_path,
    config_to_edm,
    load_chain,
    recover_angles,
    structural_distance_mask,
    wrap_angle,
)
from kinedm.metrics import evaluate
from kinedm.network import TRAINABLE_FIELDS, init_params
from kinedm.training import (
    TrainConfig,
    targets_from_thetas,
    train,
    tune_allocator,
)

tune_allocator()


def report(num, description, ok, detail=""):
    suffix = f" [{detail}]" if detail else ""
    line = f"ACCEPTANCE #{num} {'PASS' if ok else 'FAIL'}: {description}{suffix}"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def panda():
    return load_chain(bundled_chain_path("panda7"))


@pytest.fixture(scope="module")
def lab():
    return load_chain(bundled_chain_path("lab7"))


@pytest.fixture(scope="module")
def lab_camera():
    return load_camera(bundled_camera_path("camera1"))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk-scale artifacts shared by the training criteria: 22k samples of
    the learnability fixture, a full-loss model trained with the reference
    hyperparameters, and an EDM-only model for the correlation criterion."""
    chain = load_chain(bundled_chain_path("lab7"))
    camera = load_camera(bundled_camera_path("camera1"))
    records = generate_dataset(chain, [camera], 22000, seed=2024)
    train_records, held_out = records[:20000], records[20000:]
    x, thetas, visible = inputs_from_records(
        train_records, {camera.name: camera.diag_sq}
    )
    x, thetas = x[visible], thetas[visible]

    t0 = time.perf_counter()
    full_ckpt, _ = train(x, thetas, chain, TrainConfig(seed=11), camera.diag_sq)
    full_time = time.perf_counter() - t0

    edm_ckpt, _ = train(
        x, thetas, chain,
        TrainConfig(seed=11, loss_mode="edm_only", epochs=60),
        camera.diag_sq,
    )
    return {
        "chain": chain,
        "camera": camera,
        "held_out": held_out,
        "full_ckpt": full_ckpt,
        "full_time": full_time,
        "edm_ckpt": edm_ckpt,
    }


def test_criterion_1_kinematic_round_trip(panda):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        rng = np.random.default_rng(np.random.SeedSequence((7, i)))
        theta = sample_configuration(panda, rng)
        recovered, _ = angles_from_edm(config_to_edm(panda, theta), panda)
        worst = max(worst, float(np.abs(wrap_angle(recovered - theta)).max()))
    elapsed = time.perf_counter() - t0
    report(
        1,
        "1000 round trips through EDM -> cMDS -> align -> angles < 1e-9 rad "
        "in < 5 s",
        worst < 1e-9 and elapsed < 5.0,
        f"max err {worst:.2e} rad, {elapsed:.2f} s",
    )


def test_criterion_2_edm_algebra():
    rng = np.random.default_rng(1)
    worst_rel = 0.0
    worst_tail = 0.0
    for _ in range(100):
        points = rng.normal(size=(16, 3))
        d = edm_from_points(points)
        recon = edm_from_points(classical_mds(d, 3))
        worst_rel = max(
            worst_rel, np.linalg.norm(recon - d) / np.linalg.norm(d)
        )
        eig = symmetric_eig(gram_from_edm(d))
        worst_tail = max(worst_tail, np.abs(eig.values[3:]).max() / eig.values[0])
    report(
        2,
        "cMDS round trip < 1e-9 relative and Gram rank-3 tail < 1e-8",
        worst_rel < 1e-9 and worst_tail < 1e-8,
        f"worst rel {worst_rel:.2e}, worst tail {worst_tail:.2e}",
    )


def test_criterion_3_structural_invariance(panda):
    entries = structural_distance_mask(panda)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        theta = sample_configuration(panda, rng)
        d = config_to_edm(panda, theta)
        worst = max(worst, max(abs(d[i, j] - v) for i, j, v in entries))
    report(
        3,
        "all masked EDM entries constant within 1e-12 over 100 configurations",
        worst < 1e-12,
        f"worst deviation {worst:.2e}, {len(entries)} masked entries",
    )


def _gradient_agreement(panda, loss_mode, rng):
    """Fraction of checked parameter coordinates where analytic gradients
    match central differences (h = 1e-6) within 1e-4 relative error.

    Checks every coordinate of the small arrays and a seeded stratified
    sample of the weight matrices (full-coordinate differencing over 337k
    parameters is computationally out of reach; see the repo notes)."""
    ops = ChainOps.from_chain(panda)
    thetas = np.stack(
        [sample_configuration(panda, rng) for _ in range(10)]
    )
    target_packed = targets_from_thetas(panda, thetas)
    inputs = rng.uniform(0.0, 0.3, size=(10, 21))
    params = init_params(17)

    def run(p):
        loss, grads, stats = loss_and_gradients(
            p, inputs, target_packed, thetas, ops, loss_mode=loss_mode,
            loss_weight=0.5, dropout=0.5,
            dropout_rng=np.random.default_rng(7171), train=True,
            update_running=False,
        )
        return loss, grads, stats

    loss, grads, stats = run(params)
    assert stats["skipped"] == 0, "samples must be non-degenerate"
    h = 1e-6
    checked = passed = 0
    for name in TRAINABLE_FIELDS:
        flat = getattr(params, name).ravel()
        if flat.size <= 1024:
            indices = np.arange(flat.size)
        else:
            indices = rng.choice(flat.size, 120, replace=False)
        for k in indices:
            orig = flat[k]
            flat[k] = orig + h
            lp, _, _ = run(params)
            flat[k] = orig - h
            lm, _, _ = run(params)
            flat[k] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].ravel()[k]
            checked += 1
            passed += abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-4)
    return passed, checked


@pytest.mark.slow
def test_criterion_4_gradient_fidelity(panda):
    rng = np.random.default_rng(3)
    full_pass, full_n = _gradient_agreement(panda, "full", rng)
    edm_pass, edm_n = _gradient_agreement(panda, "edm_only", rng)
    report(
        4,
        "analytic gradients match central differences (>=95% full loss, "
        "100% edm_only)",
        full_pass >= 0.95 * full_n and edm_pass == edm_n,
        f"full {full_pass}/{full_n}, edm_only {edm_pass}/{edm_n}",
    )


def test_criterion_5_architecture_fidelity():
    params = init_params(0)
    ok = (
        params.n_trainable() == 337_528
        and params.n_inputs == 21
        and params.n_outputs == 120
    )
    report(
        5,
        "exactly 337,528 trainable parameters with 21 -> 120 interface",
        ok,
        f"count {params.n_trainable()}, in {params.n_inputs}, "
        f"out {params.n_outputs}",
    )


@pytest.mark.slow
def test_criterion_6_desk_scale_training(desk):
    rep = evaluate(
        desk["full_ckpt"], desk["held_out"], desk["chain"],
        cameras=[desk["camera"]],
    )
    minutes = desk["full_time"] / 60.0
    ok = (
        rep.angle_mae_mean < 0.15
        and rep.angle_mae_top50 < 0.07
        and desk["full_time"] < 1800.0
    )
    report(
        6,
        "desk-scale training: held-out MAE < 0.15 rad, top-50% < 0.07 rad, "
        "< 30 min",
        ok,
        f"MAE {rep.angle_mae_mean:.4f} rad, top50 {rep.angle_mae_top50:.4f} "
        f"rad, {minutes:.1f} min",
    )


@pytest.mark.slow
def test_criterion_7_error_correlation(desk):
    rep = evaluate(
        desk["edm_ckpt"], desk["held_out"], desk["chain"],
        cameras=[desk["camera"]],
    )
    report(
        7,
        "EDM-only model: Pearson(angle error, EDM error) >= 0.7 on held-out",
        rep.pearson_angle_vs_edm >= 0.7,
        f"pearson {rep.pearson_angle_vs_edm:.3f}",
    )


def test_criterion_8_mirror_robustness(panda):
    rng = np.random.default_rng(4)
    worst = 0.0
    all_flagged = True
    for k in range(100):
        theta = sample_configuration(panda, rng)
        points = build_point_set(panda, theta)
        signs = np.ones(3)
        signs[k % 3] = -1.0
        aligned, tf = align_reconstruction(points * signs, panda)
        all_flagged &= tf.mirrored
        recovered = recover_angles(aligned, panda)
        worst = max(worst, float(np.abs(wrap_angle(recovered - theta)).max()))
    report(
        8,
        "100 reflected point sets: mirrored flag set and recovery < 1e-9 rad",
        all_flagged and worst < 1e-9,
        f"worst err {worst:.2e} rad",
    )


def test_criterion_9_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("KINEDM_OUT", str(tmp_path))

    def run(*argv):
        assert cli_main([str(a) for a in argv]) == 0

    digests = {}
    for tag in ("a", "b"):
        data = tmp_path / f"data_{tag}.jsonl"
        ckpt = tmp_path / f"model_{tag}.ckpt"
        log = tmp_path / f"log_{tag}.jsonl"
        rep = tmp_path / f"report_{tag}.json"
        run("generate", "--chain", "lab7", "--camera", "camera1",
            "--count", 300, "--seed", 5, "--out", data)
        run("train", "--chain", "lab7", "--camera", "camera1",
            "--data", data, "--epochs", 2, "--seed", 5,
            "--out", ckpt, "--log", log)
        run("eval", "--chain", "lab7", "--camera", "camera1",
            "--checkpoint", ckpt, "--data", data, "--out", rep)
        digests[tag] = (data.read_bytes(), ckpt.read_bytes(), rep.read_bytes())
    ok = digests["a"] == digests["b"]
    report(
        9,
        "generate/train/eval artifacts bit-identical across same-seed runs",
        ok,
    )


def test_criterion_10_noise_behavior(panda):
    rng = np.random.default_rng(6)
    eps = 1e-3
    worst = 0.0
    for _ in range(25):
        theta = sample_configuration(panda, rng)
        d = config_to_edm(panda, theta)
        noise = rng.uniform(-eps, eps, size=d.shape)
        noise = 0.5 * (noise + noise.T)
        np.fill_diagonal(noise, 0.0)
        # coincident points give exact-zero entries; clamping keeps the
        # perturbed matrix a valid EDM
        recon = edm_from_points(classical_mds(np.maximum(d + noise, 0.0), 3))
        worst = max(worst, float(np.abs(recon - d).max()))
    report(
        10,
        "1e-3 symmetric EDM noise: reconstructed-EDM max error < 50 eps",
        worst < 50 * eps,
        f"worst {worst:.2e} vs bound {50 * eps:.2e}",
    )
