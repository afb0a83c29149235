"""Command-line entry point: generate, train, eval, infer, roundtrip.

Shared conventions: ``--chain``/``--camera`` accept file paths or the names
of bundled fixtures (``panda7``, ``camera0``); every command is
deterministic given its seed; output paths default into the directory named
by the KINEDM_OUT environment variable (or the working directory). Training
options can also come from a ``key = value`` config file, with command-line
flags taking precedence.
"""

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .datasets import (
    bundled_camera_path,
    generate_dataset,
    input_edm_from_2d,
    inputs_from_records,
    load_camera,
    read_records,
    sample_configuration,
    write_records,
)
from .kinematics import (
    angles_from_edm,
    bundled_chain_path,
    config_to_edm,
    load_chain,
    wrap_angle,
)
from .metrics import evaluate
from .training import (
    TrainConfig,
    TrainingDiverged,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
    tune_allocator,
)
from .validation import ChainValidationError, DegenerateGeometryError, SchemaError

EXIT_FAILURE = 1
RAD_TO_TEN_DEG = 18.0 / np.pi  # radians -> the 10-degree unit


def _out_dir():
    path = Path(os.environ.get("KINEDM_OUT", "."))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(value, bundled_path_fn):
    path = Path(value)
    if path.exists():
        return str(path)
    if path.suffix == "" and path.name == value:
        candidate = Path(bundled_path_fn(value))
        if candidate.exists():
            return str(candidate)
    raise FileNotFoundError(f"no such file or bundled fixture: {value}")


def _load_chain_arg(value):
    return load_chain(_resolve(value, bundled_chain_path))


def _load_cameras_arg(values):
    return [load_camera(_resolve(v, bundled_camera_path)) for v in values]


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _parse_config_file(path):
    """Line-oriented ``key = value`` file mirroring the train config fields."""
    by_name = {"float": float, "int": int, "str": str}
    casters = {
        f.name: by_name[f.type] if isinstance(f.type, str) else f.type
        for f in dataclass_fields(TrainConfig)
    }
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in casters:
                raise SchemaError(f"{path}:{lineno}: unknown option {key!r}")
            try:
                values[key] = casters[key](text.strip())
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return values


def _build_train_config(args):
    """Precedence: command-line flag > config file > built-in default."""
    values = _parse_config_file(args.config) if args.config else {}
    flag_map = {
        "learning_rate": args.lr,
        "warmup_iters": args.warmup_iters,
        "batch_size": args.batch_size,
        "dropout": args.dropout,
        "epochs": args.epochs,
        "lr_decay_epoch": args.lr_decay_epoch,
        "loss_weight": args.loss_weight,
        "loss_mode": args.loss,
        "seed": args.seed,
        "val_fraction": args.val_fraction,
    }
    for key, flag_value in flag_map.items():
        if flag_value is not None:
            values[key] = flag_value
    return TrainConfig(**values).validate()


def cmd_generate(args):
    chain = _load_chain_arg(args.chain)
    cameras = _load_cameras_arg(args.camera or ["camera0"])
    records = generate_dataset(
        chain, cameras, args.count, args.seed, pixel_noise=args.noise_px
    )
    out = Path(args.out) if args.out else _out_dir() / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, records)
    fully_visible = sum(bool(r.visible.all()) for r in records)
    print(
        f"wrote {len(records)} records to {out} "
        f"(fully visible: {fully_visible / len(records):.3f})"
    )
    return 0


def cmd_train(args):
    chain = _load_chain_arg(args.chain)
    cameras = _load_cameras_arg(args.camera or ["camera0"])
    normalizers = {cam.name: cam.diag_sq for cam in cameras}
    cfg = _build_train_config(args)

    records = read_records(args.data, chain)
    x, thetas, fully_visible = inputs_from_records(records, normalizers)
    if not args.keep_occluded:
        dropped = int((~fully_visible).sum())
        if dropped:
            print(f"filtered {dropped} records with occluded keypoints")
        x, thetas = x[fully_visible], thetas[fully_visible]
    x_val = theta_val = None
    if args.val_data:
        val_records = read_records(args.val_data, chain)
        x_val, theta_val, _ = inputs_from_records(val_records, normalizers)

    out = Path(args.out) if args.out else _out_dir() / "model.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else _out_dir() / "train_log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    with open(log_path, "w") as log_fh:

        def log_fn(record):
            line = json.dumps(record, sort_keys=True)
            log_fh.write(line + "\n")
            print(line)

        ckpt, history = train(
            x, thetas, chain, cfg, cameras[0].diag_sq,
            val_inputs=x_val, val_thetas=theta_val, log_fn=log_fn,
        )
    save_checkpoint(out, ckpt)
    print(f"saved checkpoint to {out} (best epoch {ckpt.best_epoch})")
    return 0


def cmd_eval(args):
    chain = _load_chain_arg(args.chain)
    ckpt = load_checkpoint(args.checkpoint)
    cameras = _load_cameras_arg(args.camera) if args.camera else None
    records = read_records(args.data, chain)
    out = Path(args.out) if args.out else _out_dir() / "eval_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate(ckpt, records, chain, cameras=cameras, report_path=out)
    mean, std = report.angle_mae_mean, report.angle_mae_std
    print(
        f"angle MAE: {mean:.6f} +/- {std:.6f} rad "
        f"= {mean * RAD_TO_TEN_DEG:.4f} +/- {std * RAD_TO_TEN_DEG:.4f} [10 deg]"
    )
    print(
        f"top-50% MAE: {report.angle_mae_top50:.6f} rad "
        f"= {report.angle_mae_top50 * RAD_TO_TEN_DEG:.4f} [10 deg]"
    )
    print(f"edm MAE: {report.edm_mae_mean:.6f} +/- {report.edm_mae_std:.6f} m^2")
    print(f"pearson(angle err, edm err): {report.pearson_angle_vs_edm:.4f}")
    print(
        f"samples: {report.n_samples}, excluded: {report.n_excluded}, "
        f"mirrored: {report.n_mirrored}"
    )
    print(f"report written to {out}")
    return 0


def cmd_infer(args):
    chain = _load_chain_arg(args.chain)
    ckpt = load_checkpoint(args.checkpoint)
    records = read_records(args.input, chain)
    if not 0 <= args.index < len(records):
        raise ValueError(
            f"record index {args.index} out of range (file has {len(records)})"
        )
    record = records[args.index]
    if args.camera:
        cam = _load_cameras_arg([args.camera])[0]
        diag_sq = cam.diag_sq
    else:
        diag_sq = ckpt.normalizer
    packed_input = input_edm_from_2d(record.kp2d, diag_sq)
    edm, theta = infer(ckpt, packed_input, chain)
    print(" ".join(f"{t:.12g}" for t in theta))
    if args.emit_edm:
        iu = np.triu_indices(chain.n_points, k=1)
        print(" ".join(f"{v:.12g}" for v in edm[iu]))
    return 0


def cmd_roundtrip(args):
    tune_allocator()
    chain = _load_chain_arg(args.chain)
    worst = 0.0
    failures = 0
    for i in range(args.trials):
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, i)))
        theta = sample_configuration(chain, rng)
        recovered, _ = angles_from_edm(config_to_edm(chain, theta), chain)
        err = float(np.abs(wrap_angle(recovered - theta)).max())
        worst = max(worst, err)
        failures += err > args.tol
    status = "pass" if failures == 0 else "FAIL"
    print(
        f"{status}: {args.trials} trials, max joint error {worst:.3e} rad, "
        f"{failures} over tolerance {args.tol:g}"
    )
    return 0 if failures == 0 else EXIT_FAILURE


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kinedm",
        description=(
            "joint-angle recovery from 2D keypoints via distance-matrix "
            "regression, classical MDS, and kinematic inversion"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic dataset")
    gen.add_argument("--chain", default="panda7")
    gen.add_argument("--camera", action="append", default=None)
    gen.add_argument("--count", type=_positive_int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise-px", type=float, default=0.0,
                     help="isotropic keypoint noise in pixels")
    gen.add_argument("--out", default=None)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train the regression network")
    tr.add_argument("--chain", default="panda7")
    tr.add_argument("--camera", action="append", default=None)
    tr.add_argument("--data", required=True)
    tr.add_argument("--val-data", default=None)
    tr.add_argument("--config", default=None, help="key = value options file")
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--warmup-iters", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--dropout", type=float, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--lr-decay-epoch", type=int, default=None)
    tr.add_argument("--loss-weight", type=float, default=None)
    tr.add_argument("--loss", choices=("full", "edm_only"), default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--val-fraction", type=float, default=None)
    tr.add_argument("--keep-occluded", action="store_true",
                    help="keep records with out-of-view keypoints")
    tr.add_argument("--out", default=None, help="checkpoint path")
    tr.add_argument("--log", default=None, help="metrics log path")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--chain", default="panda7")
    ev.add_argument("--camera", action="append", default=None)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", default=None, help="report path")
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", help="recover angles for one record")
    inf.add_argument("--chain", default="panda7")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--input", required=True, help="record file (JSON lines)")
    inf.add_argument("--index", type=int, default=0)
    inf.add_argument("--camera", default=None,
                     help="camera for input normalization (default: "
                          "checkpoint constant)")
    inf.add_argument("--emit-edm", action="store_true")
    inf.set_defaults(func=cmd_infer)

    rt = sub.add_parser("roundtrip", help="self-check the geometric pipeline")
    rt.add_argument("--chain", default="panda7")
    rt.add_argument("--trials", type=_positive_int, default=1000)
    rt.add_argument("--seed", type=int, default=0)
    rt.add_argument("--tol", type=float, default=1e-9)
    rt.set_defaults(func=cmd_roundtrip)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        SchemaError,
        ChainValidationError,
        DegenerateGeometryError,
        TrainingDiverged,
        FileNotFoundError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
