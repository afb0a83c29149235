"""Shallow regression network mapping packed 2D distance features to packed
3D distance targets.

Architecture: two Dense -> BatchNorm -> ReLU -> Dropout blocks followed by a
Dense -> ReLU output head, so predictions are nonnegative by construction.
All forward/backward passes are written out explicitly in numpy; training
uses batch statistics and inverted dropout, inference uses running statistics
and is deterministic.
"""

from dataclasses import dataclass, fields

import numpy as np

from .validation import as_float_array

N_HIDDEN = 512
BN_EPS = 1e-10
BN_MOMENTUM = 0.1

TRAINABLE_FIELDS = (
    "w1", "b1", "gamma1", "beta1",
    "w2", "b2", "gamma2", "beta2",
    "w3", "b3",
)
RUNNING_FIELDS = ("run_mean1", "run_var1", "run_mean2", "run_var2")
ARRAY_FIELDS = TRAINABLE_FIELDS + RUNNING_FIELDS


@dataclass
class MlpParams:
    """All network arrays; the running batch-norm statistics are state, not
    trainable parameters."""

    w1: np.ndarray
    b1: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    run_mean1: np.ndarray
    run_var1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    run_mean2: np.ndarray
    run_var2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def n_inputs(self):
        return self.w1.shape[0]

    @property
    def n_outputs(self):
        return self.w3.shape[1]

    def trainable_items(self):
        return [(name, getattr(self, name)) for name in TRAINABLE_FIELDS]

    def n_trainable(self):
        return sum(arr.size for _, arr in self.trainable_items())

    def copy(self):
        kwargs = {f.name: getattr(self, f.name).copy() for f in fields(self)}
        return MlpParams(**kwargs)

    def equals(self, other):
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
        )


def init_params(seed, n_inputs=21, n_outputs=120, hidden=N_HIDDEN):
    """He-initialized weights (zero-mean normal, variance 2/fan_in), zero
    biases, unit batch-norm scale, and (0, 1) running statistics."""
    rng = np.random.default_rng(seed)

    def he(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return MlpParams(
        w1=he(n_inputs, (n_inputs, hidden)),
        b1=np.zeros(hidden),
        gamma1=np.ones(hidden),
        beta1=np.zeros(hidden),
        run_mean1=np.zeros(hidden),
        run_var1=np.ones(hidden),
        w2=he(hidden, (hidden, hidden)),
        b2=np.zeros(hidden),
        gamma2=np.ones(hidden),
        beta2=np.zeros(hidden),
        run_mean2=np.zeros(hidden),
        run_var2=np.ones(hidden),
        w3=he(hidden, (hidden, n_outputs)),
        b3=np.zeros(n_outputs),
    )


def _bn_forward(z, mean, var):
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = z - mean
    xhat *= inv_std
    return xhat, inv_std


def forward_cached(params, x, train, dropout=0.5, dropout_rng=None,
                   update_running=True):
    """Batch forward pass returning (output, cache-for-backward).

    Train mode normalizes with batch statistics, applies inverted dropout and
    (optionally) updates the running statistics in place; infer mode uses the
    running statistics and no dropout.
    """
    x = as_float_array(x, "input")
    if x.ndim != 2 or x.shape[1] != params.n_inputs:
        raise ValueError(
            f"input: expected (batch, {params.n_inputs}), got shape {x.shape}"
        )
    if train and dropout > 0 and dropout_rng is None:
        raise ValueError("train-mode forward with dropout needs dropout_rng")
    cache = {"x": x, "train": train}
    # hot path: intermediates are named and folded in place; feeding large
    # anonymous temporaries into further ufuncs is pathologically slow here

    z1 = x @ params.w1
    z1 += params.b1
    if train:
        mean1, var1 = z1.mean(axis=0), z1.var(axis=0)
        if update_running:
            params.run_mean1 += BN_MOMENTUM * (mean1 - params.run_mean1)
            params.run_var1 += BN_MOMENTUM * (var1 - params.run_var1)
    else:
        mean1, var1 = params.run_mean1, params.run_var1
    xhat1, inv_std1 = _bn_forward(z1, mean1, var1)
    a1 = xhat1 * params.gamma1
    a1 += params.beta1
    r1 = np.maximum(a1, 0.0)
    if train and dropout > 0:
        mask1 = (dropout_rng.random(r1.shape) >= dropout).astype(float)
        mask1 *= 1.0 / (1.0 - dropout)
        d1 = r1 * mask1
    else:
        mask1, d1 = None, r1

    z2 = d1 @ params.w2
    z2 += params.b2
    if train:
        mean2, var2 = z2.mean(axis=0), z2.var(axis=0)
        if update_running:
            params.run_mean2 += BN_MOMENTUM * (mean2 - params.run_mean2)
            params.run_var2 += BN_MOMENTUM * (var2 - params.run_var2)
    else:
        mean2, var2 = params.run_mean2, params.run_var2
    xhat2, inv_std2 = _bn_forward(z2, mean2, var2)
    a2 = xhat2 * params.gamma2
    a2 += params.beta2
    r2 = np.maximum(a2, 0.0)
    if train and dropout > 0:
        mask2 = (dropout_rng.random(r2.shape) >= dropout).astype(float)
        mask2 *= 1.0 / (1.0 - dropout)
        d2 = r2 * mask2
    else:
        mask2, d2 = None, r2

    z3 = d2 @ params.w3
    z3 += params.b3
    out = np.maximum(z3, 0.0)
    cache.update(
        xhat1=xhat1, inv_std1=inv_std1, a1=a1, mask1=mask1, d1=d1,
        xhat2=xhat2, inv_std2=inv_std2, a2=a2, mask2=mask2, d2=d2,
        z3=z3,
    )
    return out, cache


def forward(params, x, mode="infer", dropout_rng=None, dropout=0.5):
    """Network output for a single packed input or a batch of them."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = as_float_array(x, "input")
    single = x.ndim == 1
    if single:
        x = x[None, :]
    out, _ = forward_cached(
        params, x, train=(mode == "train"), dropout=dropout,
        dropout_rng=dropout_rng,
    )
    return out[0] if single else out


def _bn_backward(d_a, gamma, xhat, inv_std):
    d_gamma = np.einsum("bi,bi->i", d_a, xhat)
    d_beta = d_a.sum(axis=0)
    d_xhat = d_a * gamma
    n = d_a.shape[0]
    dz = d_xhat * n
    dz -= d_xhat.sum(axis=0)
    proj = xhat * np.einsum("bi,bi->i", d_xhat, xhat)
    dz -= proj
    dz *= inv_std / n
    return dz, d_gamma, d_beta


def backward_network(params, cache, d_out):
    """Gradients of all trainable arrays given d(loss)/d(output).

    Batch-norm gradients follow the batch-statistics path used in the
    train-mode forward; infer-mode caches treat the statistics as constants.
    """
    grads = {}
    dz3 = d_out * (cache["z3"] > 0)
    grads["w3"] = cache["d2"].T @ dz3
    grads["b3"] = dz3.sum(axis=0)
    dd2 = dz3 @ params.w3.T

    dr2 = dd2 * cache["mask2"] if cache["mask2"] is not None else dd2
    da2 = dr2 * (cache["a2"] > 0)
    if cache["train"]:
        dz2, grads["gamma2"], grads["beta2"] = _bn_backward(
            da2, params.gamma2, cache["xhat2"], cache["inv_std2"]
        )
    else:
        grads["gamma2"] = np.einsum("bi,bi->i", da2, cache["xhat2"])
        grads["beta2"] = da2.sum(axis=0)
        dz2 = da2 * params.gamma2
        dz2 *= cache["inv_std2"]
    grads["w2"] = cache["d1"].T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dd1 = dz2 @ params.w2.T

    dr1 = dd1 * cache["mask1"] if cache["mask1"] is not None else dd1
    da1 = dr1 * (cache["a1"] > 0)
    if cache["train"]:
        dz1, grads["gamma1"], grads["beta1"] = _bn_backward(
            da1, params.gamma1, cache["xhat1"], cache["inv_std1"]
        )
    else:
        grads["gamma1"] = np.einsum("bi,bi->i", da1, cache["xhat1"])
        grads["beta1"] = da1.sum(axis=0)
        dz1 = da1 * params.gamma1
        dz1 *= cache["inv_std1"]
    grads["w1"] = cache["x"].T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads
