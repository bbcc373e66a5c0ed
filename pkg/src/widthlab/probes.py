"""Measurements on trained or freshly initialized networks.

Width-scaling fits, numerical rank, dispersion of weight updates, dependence of
hidden layers on the input, output agreement between two parameterizations and
finite-difference gradient checks.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .net import NetworkState, backward, forward, gradients, init_network, sgd_step
from .params import ParamSpec, Variant

__all__ = [
    "ScalingFit",
    "ProbeReport",
    "IndependenceStats",
    "EquivalenceResult",
    "GradCheckResult",
    "KinkWarning",
    "fit_scaling_exponent",
    "numerical_rank",
    "collapse_statistic",
    "input_independence_statistic",
    "finite_width_equivalence",
    "gradient_check",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("run_id", "probe", "parameterization", "activation", "m", "L", "layer", "t", "metric", "value")


class ScalingFit(NamedTuple):
    slope: float
    intercept: float
    residual: float


class KinkWarning(RuntimeWarning):
    """Finite differences taken close to a kink of a piecewise activation."""


def fit_scaling_exponent(widths: Sequence[float], values: Sequence[float]) -> ScalingFit:
    """Least-squares fit of ``ln(value) = slope * ln(m) + intercept``.

    Returns the slope, the intercept and the RMS of the residuals in log space.
    """
    w = np.asarray(widths, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if w.shape != v.shape or w.ndim != 1:
        raise ValueError("widths and values must be 1-D of equal length")
    if w.size < 3:
        raise ValueError("a scaling fit needs at least 3 widths")
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise ValueError("values must be finite and positive")
    if np.any(w <= 0):
        raise ValueError("widths must be positive")
    x, y = np.log(w), np.log(v)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    return ScalingFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))))


def numerical_rank(matrix, m: int | None = None) -> int:
    """Number of singular values above ``s_max * m * 1e-7``.

    Args:
        matrix: ``n_samples x width`` array of (pre-)activations.
        m: network width used in the threshold; defaults to the column count.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("rank needs a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix must be finite")
    if m is None:
        m = a.shape[1]
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > s[0] * m * 1e-7))


def collapse_statistic(dW, eps: float = 1e-12) -> float:
    """``std(entries) / max(|mean(entries)|, eps)`` of a weight-update matrix."""
    a = np.asarray(dW, dtype=np.float64)
    return float(a.std() / max(abs(a.mean()), eps))


@dataclass
class IndependenceStats:
    h_rms: list  # RMS over coordinates of h_l(xi) - h_l(xi'), index l-1
    x_rms: list
    f_diff: float


def input_independence_statistic(net: NetworkState, xi, xi_prime) -> IndependenceStats:
    """Per-layer RMS differences of the hidden states for two inputs."""
    a = forward(net, np.vstack([np.asarray(xi, float), np.asarray(xi_prime, float)]))
    rms = lambda arr: float(np.sqrt(np.mean((arr[0] - arr[1]) ** 2)))  # noqa: E731
    return IndependenceStats(
        [rms(h) for h in a.h],
        [rms(x) for x in a.x],
        float(np.max(np.abs(a.f[0] - a.f[1]))),
    )


@dataclass
class EquivalenceResult:
    max_abs_diff: float
    max_rel_diff: float
    per_step: list  # max abs diff at t = 1..T
    eta_b0: float  # step-0 base rate used on side B
    eta_a0: float
    outputs_a: np.ndarray = field(repr=False, default=None)  # (T, n_test)
    outputs_b: np.ndarray = field(repr=False, default=None)


def _chi0(net, xi, y, loss):
    if net.K != 1:
        raise ValueError("the step-0 rate matching needs a scalar output")
    return float(backward(net, forward(net, xi), np.asarray([y]), loss).chi[0, 0])


def finite_width_equivalence(
    spec_a: ParamSpec,
    spec_b: ParamSpec,
    m: int,
    d: int,
    seed: int,
    samples: Sequence,
    test_inputs,
    eta: float,
    T: int,
    loss: str = "squared",
    first_layer_rescale: bool = True,
) -> EquivalenceResult:
    """Train two parameterizations from the same init stream and compare outputs.

    Single-sample SGD on ``samples[t]`` at step ``t``. A side whose spec has an
    HP/HPZ variant takes the step-0 base rate ``eta * chi0_other / chi0_self``.

    Returns:
        Output differences on ``test_inputs`` after each of the steps ``1..T``.
    """
    if len(samples) < T:
        raise ValueError(f"need {T} samples, got {len(samples)}")
    A = init_network(spec_a, m, d, seed, first_layer_rescale=first_layer_rescale)
    B = init_network(spec_b, m, d, seed, first_layer_rescale=first_layer_rescale)
    xi0, y0 = samples[0]
    eta_a = eta_b = float(eta)
    surg_a = spec_a.variant is not Variant.PLAIN
    surg_b = spec_b.variant is not Variant.PLAIN
    if surg_a or surg_b:
        ca, cb = _chi0(A, xi0, y0, loss), _chi0(B, xi0, y0, loss)
        if surg_b:
            if cb == 0.0:
                raise ValueError("initial loss derivative of the surgery side is zero")
            eta_b = eta * ca / cb
        else:
            if ca == 0.0:
                raise ValueError("initial loss derivative of the surgery side is zero")
            eta_a = eta * cb / ca
    Xt = np.atleast_2d(np.asarray(test_inputs, dtype=np.float64))
    outs_a, outs_b = [], []
    for t in range(T):
        xi, y = samples[t]
        sgd_step(A, (xi, y), eta_a if t == 0 else eta, loss=loss)
        sgd_step(B, (xi, y), eta_b if t == 0 else eta, loss=loss)
        outs_a.append(forward(A, Xt).output)
        outs_b.append(forward(B, Xt).output)
    oa, ob = np.array(outs_a), np.array(outs_b)
    diff = np.abs(oa - ob)
    denom = np.maximum(np.abs(oa), np.abs(ob))
    rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
    return EquivalenceResult(
        float(diff.max()),
        float(rel.max()),
        [float(v) for v in diff.reshape(T, -1).max(axis=1)],
        eta_b,
        eta_a,
        oa,
        ob,
    )


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_checked: int


def _sample_loss(net, X, Y, loss):
    fwd = forward(net, X)
    return float(backward(net, fwd, Y, loss).loss.mean())


def gradient_check(
    net: NetworkState,
    sample,
    eps: float = 1e-5,
    n_params: int = 200,
    seed: int = 0,
    loss: str = "squared",
) -> GradCheckResult:
    """Compare backprop gradients with central finite differences.

    A random subset of raw parameters (at least ``n_params``, or all if fewer)
    is perturbed by ``+-eps``. The error is ``max |analytic - numeric|`` over
    the subset divided by ``max(max |analytic|, 1e-12)``.

    Warns:
        KinkWarning: for piecewise-linear activations when a pre-activation
        lies within ``10 * eps`` of the kink.
    """
    X, Y = sample
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y)
    if Y.ndim == 0:
        Y = Y[None]
    fwd = forward(net, X)
    act = net.activation
    if act.is_homogeneous and act.p == 1.0 and any(np.any(np.abs(h) < 10 * eps) for h in fwd.h):
        warnings.warn("pre-activation within 10*eps of the kink; finite differences unreliable", KinkWarning)
    gw, gb = gradients(net, fwd, backward(net, fwd, Y, loss))
    params, grads = [], []
    for i, (w, g) in enumerate(zip(net.weights, gw)):
        params.append(w)
        grads.append(g)
    for b, g in zip(net.biases, gb):
        if b is not None:
            params.append(b)
            grads.append(g)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = np.sort(rng.choice(total, size=min(n_params, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs, ana = [], []
    for k in flat_idx:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        p = params[which].reshape(-1)
        j = k - offsets[which]
        orig = p[j]
        p[j] = orig + eps
        lp = _sample_loss(net, X, Y, loss)
        p[j] = orig - eps
        lm = _sample_loss(net, X, Y, loss)
        p[j] = orig
        num = (lp - lm) / (2 * eps)
        a = grads[which].reshape(-1)[j]
        errs.append(abs(a - num))
        ana.append(abs(a))
    max_abs = float(max(errs))
    return GradCheckResult(max_abs / max(float(max(ana)), 1e-12), max_abs, len(flat_idx))


@dataclass
class ProbeReport:
    """Per-width measurements of one metric, optional fit and verdict."""

    probe: str
    parameterization: str
    activation: str
    L: int
    metric: str
    widths: list
    values: list
    layer: int | str = ""
    t: int | str = ""
    fit: ScalingFit | None = None
    verdict: bool | None = None
    expectation: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(not math.isfinite(float(v)) for v in self.values):
            raise ValueError(f"non-finite measurement in probe {self.probe}")

    def fit_slope(self) -> ScalingFit:
        self.fit = fit_scaling_exponent(self.widths, self.values)
        return self.fit

    def rows(self, run_id: str) -> list:
        base = dict(
            run_id=run_id,
            probe=self.probe,
            parameterization=self.parameterization,
            activation=self.activation,
            L=self.L,
            layer=self.layer,
            t=self.t,
        )
        out = [dict(base, m=w, metric=self.metric, value=v) for w, v in zip(self.widths, self.values)]
        for key, val in self.extra.items():
            out.append(dict(base, m="", metric=key, value=val))
        if self.fit is not None:
            for key in ("slope", "intercept", "residual"):
                out.append(dict(base, m="", metric=f"{self.metric}_{key}", value=getattr(self.fit, key)))
        if self.verdict is not None:
            out.append(dict(base, m="", metric="verdict", value=int(bool(self.verdict))))
        return out
