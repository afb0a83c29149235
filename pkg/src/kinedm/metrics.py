"""Evaluation metrics and dataset-level reports.

Angle errors are wrapped to (-pi, pi] before taking absolute values; EDM
errors are mean absolute entrywise differences over the strict upper
triangle. The evaluation report aggregates both per-sample series, their
top-fraction statistics, and the correlation between them.
"""

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import inputs_from_records
from .gradients import ChainOps, pipeline_angles
from .kinematics import wrap_angle
from .network import forward
from .training import targets_from_thetas
from .validation import SchemaError, as_float_array


def mae_angles(pred, target):
    """Mean absolute joint-angle error with 2-pi wrapping."""
    pred = as_float_array(pred, "pred")
    target = as_float_array(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(wrap_angle(pred - target))))


def top_fraction_mean(errors, fraction):
    """Mean of the ceil(fraction * N) smallest errors (ties by index)."""
    errors = as_float_array(errors, "errors")
    if errors.ndim != 1 or errors.size == 0:
        raise ValueError("errors must be a nonempty 1-d series")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    k = int(np.ceil(fraction * errors.size))
    order = np.argsort(errors, kind="stable")
    return float(errors[order[:k]].mean())


def pearson(xs, ys):
    """Sample Pearson correlation coefficient."""
    xs = as_float_array(xs, "xs")
    ys = as_float_array(ys, "ys")
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need two equal-length series with at least 2 entries")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx <= 0 or vy <= 0:
        raise ValueError("pearson is undefined for a zero-variance series")
    return float((dx @ dy) / np.sqrt(vx * vy))


@dataclass
class EvalReport:
    """Aggregate evaluation results; std values are across samples."""

    chain_name: str
    n_samples: int
    n_excluded: int
    n_mirrored: int
    angle_mae_mean: float
    angle_mae_std: float
    angle_mae_top50: float
    edm_mae_mean: float
    edm_mae_std: float
    pearson_angle_vs_edm: float
    angle_mae_per_sample: list = field(repr=False, default_factory=list)
    edm_mae_per_sample: list = field(repr=False, default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(checkpoint, records, chain, cameras=None, report_path=None):
    """Run inference over a record list and aggregate the error series.

    ``cameras`` supplies per-camera input normalizers; without it the
    checkpoint's stored constant is applied to every record. Samples whose
    decode hits a degeneracy guard are excluded from the statistics and
    counted (with a warning). The report is also written as JSON when
    ``report_path`` is given.
    """
    if chain.name != checkpoint.chain_name:
        raise SchemaError(
            f"checkpoint was trained for chain {checkpoint.chain_name!r}, "
            f"got {chain.name!r}"
        )
    if not records:
        raise ValueError("no records to evaluate")
    if cameras:
        normalizers = {cam.name: cam.diag_sq for cam in cameras}
    else:
        normalizers = checkpoint.normalizer
    x, thetas, _ = inputs_from_records(records, normalizers)
    target_packed = targets_from_thetas(chain, thetas)

    ops = ChainOps.from_chain(chain)
    out = forward(checkpoint.params, x, mode="infer")
    theta_hat, valid, mirrored, _ = pipeline_angles(ops, out)

    n_excluded = int((~valid).sum())
    if n_excluded:
        warnings.warn(
            f"{n_excluded} of {len(records)} samples hit a degeneracy guard "
            "and were excluded from the report",
            stacklevel=2,
        )
    if not valid.any():
        raise ValueError("every sample failed to decode; nothing to report")

    angle_err = np.abs(wrap_angle(theta_hat - thetas)).mean(axis=1)[valid]
    edm_err = np.abs(out - target_packed).mean(axis=1)[valid]
    try:
        correlation = pearson(angle_err, edm_err)
    except ValueError:
        # constant error series (e.g. an exact model): correlation undefined
        correlation = float("nan")

    report = EvalReport(
        chain_name=chain.name,
        n_samples=len(records),
        n_excluded=n_excluded,
        n_mirrored=int(mirrored[valid].sum()),
        angle_mae_mean=float(angle_err.mean()),
        angle_mae_std=float(angle_err.std()),
        angle_mae_top50=top_fraction_mean(angle_err, 0.5),
        edm_mae_mean=float(edm_err.mean()),
        edm_mae_std=float(edm_err.std()),
        pearson_angle_vs_edm=correlation,
        angle_mae_per_sample=[float(v) for v in angle_err],
        edm_mae_per_sample=[float(v) for v in edm_err],
    )
    if report_path is not None:
        with open(report_path, "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    return report
