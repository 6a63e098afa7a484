"""Numeric substrate: smooth activations, Adam, feature standardization, seeded RNG streams.

Everything here is pure: given the same inputs the same outputs come back,
so any of it can be called from concurrent workers as long as each worker
owns its own RngStream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATION_KINDS = ("tanh", "softplus", "identity", "square")


@dataclass(frozen=True)
class Activation:
    """A twice-differentiable scalar activation, applied elementwise.

    Only smooth kinds are offered: interaction detection differentiates the
    network twice, and piecewise-linear activations have zero curvature
    almost everywhere.  "square" exists for constructing exact polynomial
    test networks.
    """

    kind: str = "tanh"

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind: {self.kind!r}")

    def eval(self, x):
        """Return (f(x), f'(x), f''(x)) in closed form; x scalar or ndarray."""
        return act_eval(self, x)


def act_eval(a: Activation, x):
    """Closed-form value and first two derivatives of activation `a` at `x`."""
    x = np.asarray(x, dtype=float)
    if a.kind == "tanh":
        v = np.tanh(x)
        d1 = 1.0 - v * v
        d2 = -2.0 * v * d1
    elif a.kind == "softplus":
        # stable: softplus(x) = max(x, 0) + log1p(exp(-|x|))
        v = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        s = 1.0 / (1.0 + np.exp(-x))
        d1 = s
        d2 = s * (1.0 - s)
    elif a.kind == "identity":
        v = x.copy()
        d1 = np.ones_like(x)
        d2 = np.zeros_like(x)
    elif a.kind == "square":
        v = x * x
        d1 = 2.0 * x
        d2 = np.full_like(x, 2.0)
    else:  # pragma: no cover - guarded by Activation.__post_init__
        raise ValueError(a.kind)
    if v.ndim == 0:
        return float(v), float(d1), float(d2)
    return v, d1, d2


@dataclass
class AdamState:
    """Adam moment estimates plus hyperparameters for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0,
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update.  Returns (new_params, new_state)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, step=t, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_params, new_state


@dataclass
class Standardizer:
    """Per-column affine map to zero mean, unit population (1/N) std.

    Constant columns get std := 1 so the transform maps them to zero instead
    of blowing up; `constant` records which columns were degenerate.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of zero-variance columns

    @property
    def has_constant_columns(self) -> bool:
        return bool(self.constant.any())

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "constant": self.constant.astype(bool).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], dtype=float),
                   std=np.asarray(d["std"], dtype=float),
                   constant=np.asarray(d["constant"], dtype=bool))


def standardize_fit_apply(x: np.ndarray):
    """Fit a Standardizer on `x` (N >= 2 rows) and return (standardizer, x_std)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.size == 0:
        raise ValueError("cannot standardize an empty matrix")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population convention (ddof=0)
    constant = std == 0.0
    std = np.where(constant, 1.0, std)
    s = Standardizer(mean=mean, std=std, constant=constant)
    return s, s.apply(x)


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by (seed, stream path).

    Identical (seed, stream) pairs produce identical draw sequences on every
    platform and regardless of what other streams exist, so worker layouts
    never change results.  Substreams are derived by extending the path.
    """

    seed: int
    stream: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValueError("seed must fit in 64 bits")
        object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream + (int(index),))


def norm_cdf(x: float) -> float:
    """Standard normal CDF via erfc (no scipy dependency)."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def spearman_rho(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D arrays")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return 0.0
    return float(ra @ rb) / denom


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks
