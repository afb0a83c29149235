"""Training loop, optimizer, learning-rate schedule, and checkpoints.

Everything is deterministic per seed: initialization, the train/validation
split, per-epoch shuffles, and per-step dropout masks all derive from the
config seed through independent seed-sequence domains, so two runs with the
same inputs produce bit-identical artifacts.
"""

import ctypes
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .gradients import ChainOps, loss_and_gradients, pipeline_angles
from .kinematics import config_to_edm, wrap_angle
from .network import (
    ARRAY_FIELDS,
    MlpParams,
    forward,
    init_params,
)
from .distgeo import pack_upper, unpack
from .kinematics import angles_from_edm
from .validation import SchemaError, as_float_array, packed_size

CHECKPOINT_VERSION = 1

# seed-sequence domains, so the streams never collide
_DOMAIN_SPLIT = 0
_DOMAIN_SHUFFLE = 1
_DOMAIN_DROPOUT = 2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


_allocator_tuned = False


def tune_allocator():
    """Keep freed large blocks on the heap instead of returning them to the
    kernel; the training loop reallocates megabyte-sized temporaries every
    step and the mmap/page-fault churn otherwise dominates the step time.
    Silently does nothing on non-glibc platforms."""
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 28))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(1 << 28))  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):  # pragma: no cover
        pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_iters: int = 2000
    batch_size: int = 64
    dropout: float = 0.5
    epochs: int = 100
    lr_decay_epoch: int = 50
    loss_weight: float = 0.5
    loss_mode: str = "full"
    seed: int = 0
    val_fraction: float = 0.1

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_iters < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("warmup_iters, batch_size and epochs must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.loss_weight < 0:
            raise ValueError("loss_weight must be nonnegative")
        if self.loss_mode not in ("full", "edm_only"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**known).validate()


def lr_schedule(iteration, epoch, cfg):
    """Linear warmup to the base rate, halved once past the decay epoch."""
    lr = cfg.learning_rate * min(1.0, iteration / cfg.warmup_iters)
    if epoch > cfg.lr_decay_epoch:
        lr *= 0.5
    return lr


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def like(cls, params):
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.trainable_items()},
            v={name: np.zeros_like(arr) for name, arr in params.trainable_items()},
        )


def adam_step(params, grads, state, lr):
    """One Adam update with bias-corrected moments; mutates params and state."""
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for name, arr in params.trainable_items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        tmp = g * (1.0 - ADAM_BETA1)
        m += tmp
        v *= ADAM_BETA2
        tmp = g * g
        tmp *= 1.0 - ADAM_BETA2
        v += tmp
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += ADAM_EPS
        update = m / denom
        update *= lr / c1
        arr -= update
    return params, state


@dataclass
class Checkpoint:
    """Trained model plus everything needed to reuse it: format version,
    chain name, the input normalizer, and the config snapshot."""

    chain_name: str
    normalizer: float
    config: TrainConfig
    params: MlpParams
    version: int = CHECKPOINT_VERSION
    best_epoch: int = field(default=0)


def save_checkpoint(path, ckpt):
    """Header as one JSON line (with an array manifest), then the arrays as
    raw little-endian float64 in manifest order."""
    manifest = [
        {"name": name, "shape": list(getattr(ckpt.params, name).shape)}
        for name in ARRAY_FIELDS
    ]
    header = json.dumps(
        {
            "version": ckpt.version,
            "chain_name": ckpt.chain_name,
            "normalizer": ckpt.normalizer,
            "best_epoch": ckpt.best_epoch,
            "config": ckpt.config.to_dict(),
            "arrays": manifest,
        },
        separators=(",", ":"),
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for name in ARRAY_FIELDS:
            arr = np.ascontiguousarray(getattr(ckpt.params, name), dtype="<f8")
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: malformed checkpoint header") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(
                f"{path}: unsupported checkpoint version {header.get('version')}"
            )
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise SchemaError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = (
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            )
    missing = set(ARRAY_FIELDS) - set(arrays)
    if missing:
        raise SchemaError(f"{path}: missing arrays {sorted(missing)}")
    return Checkpoint(
        chain_name=header["chain_name"],
        normalizer=header["normalizer"],
        config=TrainConfig.from_dict(header["config"]),
        params=MlpParams(**arrays),
        version=header["version"],
        best_epoch=header.get("best_epoch", 0),
    )


def targets_from_thetas(chain, thetas):
    """Packed ground-truth EDMs recomputed from configurations."""
    return np.stack([pack_upper(config_to_edm(chain, t)) for t in thetas])


def _validation_metrics(params, ops, x, target_packed, target_theta, cfg):
    out = forward(params, x, mode="infer")
    diff = out - target_packed
    l_d = float(np.mean(np.sqrt(2.0 * np.einsum("bk,bk->b", diff, diff))))
    theta_hat, valid, _, _ = pipeline_angles(ops, out)
    delta = np.abs(wrap_angle(theta_hat - target_theta))
    per_sample = delta.mean(axis=1)
    mae = float(per_sample[valid].mean()) if valid.any() else float("inf")
    metrics = {"val_l_d": l_d, "val_mae": mae, "val_invalid": int((~valid).sum())}
    if cfg.loss_mode == "edm_only":
        metrics["val_loss"] = l_d
    else:
        l_c = float(delta[valid].mean()) if valid.any() else float("inf")
        metrics["val_loss"] = l_c + cfg.loss_weight * l_d
        metrics["val_l_c"] = l_c
    return metrics


def train(inputs, thetas, chain, cfg, normalizer, val_inputs=None,
          val_thetas=None, log_fn=None):
    """Train the regression network; returns (Checkpoint, history).

    ``inputs`` are packed normalized 2D EDMs, ``thetas`` the ground-truth
    configurations; packed target EDMs are recomputed from the
    configurations. Without an explicit validation set a seeded fraction of
    the data is held out. The checkpoint keeps the parameters of the epoch
    with the best validation angle error.
    """
    cfg.validate()
    tune_allocator()
    inputs = as_float_array(inputs, "inputs")
    thetas = as_float_array(thetas, "thetas")
    if inputs.ndim != 2 or thetas.ndim != 2 or inputs.shape[0] != thetas.shape[0]:
        raise ValueError("inputs and thetas must be (n, k) arrays of equal length")
    if inputs.shape[0] == 0:
        raise ValueError("dataset is empty")
    if thetas.shape[1] != chain.n_joints:
        raise ValueError(
            f"thetas have {thetas.shape[1]} joints, chain has {chain.n_joints}"
        )
    ops = ChainOps.from_chain(chain)

    if val_inputs is None and cfg.val_fraction > 0:
        split_rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _DOMAIN_SPLIT))
        )
        perm = split_rng.permutation(inputs.shape[0])
        n_val = int(round(cfg.val_fraction * inputs.shape[0]))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        val_inputs, val_thetas = inputs[val_idx], thetas[val_idx]
        inputs, thetas = inputs[train_idx], thetas[train_idx]
    has_val = val_inputs is not None and len(val_inputs) > 0
    if has_val:
        val_inputs = as_float_array(val_inputs, "val_inputs")
        val_thetas = as_float_array(val_thetas, "val_thetas")
        val_targets = targets_from_thetas(chain, val_thetas)

    targets = targets_from_thetas(chain, thetas)
    n_train = inputs.shape[0]
    params = init_params(
        cfg.seed, n_inputs=inputs.shape[1], n_outputs=targets.shape[1]
    )
    state = AdamState.like(params)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _DOMAIN_SHUFFLE))
    )

    history = []
    best_mae = np.inf
    best_params = params.copy()
    best_epoch = 0
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n_train)
        n_batches = max(n_train // cfg.batch_size, 1)
        epoch_stats = {"loss": 0.0, "l_d": 0.0, "l_c": 0.0, "skipped": 0,
                       "mirrored": 0}
        lr = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            lr = lr_schedule(iteration, epoch, cfg)
            dropout_rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, _DOMAIN_DROPOUT, iteration))
            )
            loss, grads, stats = loss_and_gradients(
                params, inputs[idx], targets[idx], thetas[idx], ops,
                loss_mode=cfg.loss_mode, loss_weight=cfg.loss_weight,
                dropout=cfg.dropout, dropout_rng=dropout_rng, train=True,
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, iteration {iteration}: "
                    f"l_d={stats['l_d']}, l_c={stats['l_c']}"
                )
            adam_step(params, grads, state, lr)
            iteration += 1
            epoch_stats["loss"] += loss
            epoch_stats["l_d"] += stats["l_d"]
            epoch_stats["l_c"] += stats["l_c"]
            epoch_stats["skipped"] += stats["skipped"]
            epoch_stats["mirrored"] += stats["mirrored"]

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_stats["loss"] / n_batches,
            "train_l_d": epoch_stats["l_d"] / n_batches,
            "skipped_config_path": epoch_stats["skipped"],
            "mirrored_alignments": epoch_stats["mirrored"],
        }
        if cfg.loss_mode == "full":
            record["train_l_c"] = epoch_stats["l_c"] / n_batches
        if has_val:
            record.update(
                _validation_metrics(params, ops, val_inputs, val_targets,
                                    val_thetas, cfg)
            )
            if record["val_mae"] < best_mae:
                best_mae = record["val_mae"]
                best_params = params.copy()
                best_epoch = epoch
        history.append(record)
        if log_fn is not None:
            log_fn(record)

    if not has_val:
        best_params, best_epoch = params, cfg.epochs
    ckpt = Checkpoint(
        chain_name=chain.name,
        normalizer=float(normalizer),
        config=cfg,
        params=best_params,
        best_epoch=best_epoch,
    )
    return ckpt, history


def infer(checkpoint, packed_input, chain):
    """Predicted full EDM and recovered configuration for one input.

    The input must already be normalized with the checkpoint's constant.
    """
    if chain.name != checkpoint.chain_name:
        raise SchemaError(
            f"checkpoint was trained for chain {checkpoint.chain_name!r}, "
            f"got {chain.name!r}"
        )
    expected = packed_size(chain.n_joints)
    x = as_float_array(packed_input, "input", shape=(expected,))
    out = forward(checkpoint.params, x, mode="infer")
    edm = unpack(out, chain.n_points)
    theta, _ = angles_from_edm(edm, chain)
    return edm, theta
