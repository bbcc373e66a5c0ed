"""Infinite-width predictions.

Closed-form Gaussian moments of homogeneous activations, second-moment ladders
of the scale-free variables at initialization, and a layer-by-layer Monte-Carlo
evaluation of the limiting output of IP-LLR after its first SGD step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .activations import Activation, get_activation

__all__ = [
    "InsufficientSamples",
    "DivergenceError",
    "VarianceLadder",
    "OracleReport",
    "relu_gauss_moments",
    "gauss_abs_moment",
    "variance_ladder",
    "mc_gaussian_expectation",
    "ipllr_t1_limit",
    "naive_ip_limit",
]

_BLOCK = 1 << 18


class InsufficientSamples(ValueError):
    """Monte-Carlo standard error above 1% of the estimate."""


class DivergenceError(ArithmeticError):
    """Non-finite Monte-Carlo estimate."""


@dataclass
class VarianceLadder:
    """Second moments of the scale-free variables at init, indexed by ``l - 1``."""

    v_h: list
    v_x: list
    v_dx: list
    v_dh: list
    sigma0_sq: float
    delta: tuple


@dataclass
class OracleReport:
    lambdas: list  # E[x~_l(xi0) x_l after one step (xi)]
    lambda_se: list
    f1: float
    f1_se: float
    chi0: float
    n_mc: int
    ladder: VarianceLadder | None = None
    extra: dict = field(default_factory=dict)


def relu_gauss_moments(sigma: float):
    """``(E[relu(Z)], E[relu(Z)**2], E[relu'(Z)])`` for ``Z ~ N(0, sigma**2)``.

    The derivative mean is 1/2 for every ``sigma``, including the degenerate
    ``sigma = 0`` by convention.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return sigma / math.sqrt(2.0 * math.pi), 0.5 * sigma * sigma, 0.5


def gauss_abs_moment(q: float, var: float) -> float:
    """``E|Z|**q`` for ``Z ~ N(0, var)``."""
    if q == 0:
        return 1.0
    return var ** (q / 2) * 2 ** (q / 2) * math.gamma((q + 1) / 2) / math.sqrt(math.pi)


def _homogeneous_moments(act: Activation, var: float):
    """Closed forms of ``E[sigma(Z)**2]`` and ``E[sigma'(Z)**2]``."""
    ab = 0.5 * (act.alpha**2 + act.beta**2)
    p = act.p
    second = ab * gauss_abs_moment(2 * p, var)
    dsecond = p * p * ab * gauss_abs_moment(2 * p - 2, var)
    return second, dsecond


def _mc_moments(act: Activation, var: float, n_mc: int, rng: np.random.Generator):
    z = math.sqrt(var) * rng.standard_normal(n_mc)
    out = []
    for vals in (act(z) ** 2, act.deriv(z) ** 2):
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n_mc))
        if se > 0.01 * abs(est):
            raise InsufficientSamples(f"n_mc={n_mc} gives standard error {se:.3g} for estimate {est:.3g}")
        out.append(est)
    return out


def variance_ladder(
    L: int,
    sigma0_sq: float,
    delta: Sequence[float],
    activation="relu",
    n_mc: int = 10**5,
    seed: int = 0,
) -> VarianceLadder:
    """Forward and backward second moments of the scale-free variables.

    ``V_h1 = delta_1**2 * sigma0_sq``, ``V_hl = delta_l**2 V_x(l-1)``,
    ``V_xl = E[sigma(Z_hl)**2]``; backward ``V_dxL = delta_{L+1}**2``,
    ``V_dhl = V_dxl E[sigma'(Z_hl)**2]``, ``V_dx(l-1) = delta_l**2 V_dhl``.
    Homogeneous activations use closed forms, other kinds a 1-D Monte-Carlo.

    Args:
        L: number of hidden layers.
        sigma0_sq: ``|xi|**2 + 1`` (before any first-layer std).
        delta: ``L + 1`` init stds; ``delta[0]`` is the effective input-layer std.
        activation: name or :class:`Activation`.
        n_mc: samples per level for non-homogeneous activations (>= 10**4).
        seed: RNG seed for the Monte-Carlo path.
    """
    act = get_activation(activation)
    delta = tuple(float(d) for d in delta)
    if len(delta) != L + 1:
        raise ValueError("delta must have length L+1")
    closed = act.is_homogeneous or act.kind == "identity"
    if not closed and n_mc < 10**4:
        raise InsufficientSamples("n_mc must be >= 1e4 for the Monte-Carlo ladder")
    rng = np.random.default_rng(seed)

    def moments(var):
        if act.kind == "identity":
            return var, 1.0
        if closed:
            return _homogeneous_moments(act, var)
        return _mc_moments(act, var, n_mc, rng)

    v_h, v_x, dmom = [], [], []
    v = delta[0] ** 2 * sigma0_sq
    for layer in range(1, L + 1):
        if layer > 1:
            v = delta[layer - 1] ** 2 * v_x[-1]
        try:
            s2, ds2 = moments(v)
        except OverflowError:
            s2 = ds2 = math.inf
        if not (math.isfinite(s2) and math.isfinite(ds2)):
            raise DivergenceError(f"variance ladder leaves the float range at layer {layer}")
        v_h.append(v)
        v_x.append(s2)
        dmom.append(ds2)
    v_dx = [0.0] * L
    v_dh = [0.0] * L
    v_dx[L - 1] = delta[L] ** 2
    for layer in range(L, 0, -1):
        if layer < L:
            v_dx[layer - 1] = delta[layer] ** 2 * v_dh[layer]
        v_dh[layer - 1] = v_dx[layer - 1] * dmom[layer - 1]
    return VarianceLadder(v_h, v_x, v_dx, v_dh, float(sigma0_sq), delta)


class _Stream:
    """Streaming mean/variance accumulator (pairwise merge)."""

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def add(self, vals: np.ndarray):
        nb = vals.size
        if nb == 0:
            return
        mb = float(vals.mean())
        m2b = float(((vals - mb) ** 2).sum())
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n

    @property
    def se(self) -> float:
        if self.n < 2:
            return float("inf")
        return math.sqrt(self.m2 / (self.n - 1) / self.n)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
        raise ValueError("covariance must be a symmetric square matrix")
    jitter = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(cov)))))
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive semi-definite") from None


def mc_gaussian_expectation(
    f: Callable[[np.ndarray], np.ndarray],
    cov,
    n: int,
    seed: int = 0,
    block: int = _BLOCK,
):
    """Monte-Carlo estimate of ``E[f(Z)]`` for ``Z ~ N(0, cov)``.

    Args:
        f: maps an ``(n, k)`` array of samples to ``n`` values.
        cov: ``k x k`` covariance (symmetric PSD; a ``1e-12`` relative diagonal
            jitter absorbs singular inputs).
        n: number of samples (>= 2).
        seed: base seed; sample blocks use independent child seeds.

    Returns:
        ``(estimate, standard_error)`` with ``SE = sample_std / sqrt(n)``.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    chol = _psd_factor(cov)
    k = chol.shape[0]
    nblocks = -(-n // block)
    acc = _Stream()
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(nblocks)):
        nb = min(block, n - i * block)
        z = np.random.default_rng(child).standard_normal((nb, k)) @ chol.T
        vals = np.asarray(f(z), dtype=np.float64).reshape(nb)
        if not np.all(np.isfinite(vals)):
            raise DivergenceError("non-finite integrand value in Monte-Carlo estimate")
        acc.add(vals)
    if not math.isfinite(acc.mean):
        raise DivergenceError("non-finite Monte-Carlo estimate")
    return acc.mean, acc.se


def _loss_derivative_at_zero(loss, y0) -> float:
    if callable(loss):
        return float(loss(y0, 0.0))
    if loss == "squared":
        return -float(y0)
    raise ValueError(f"scalar-output oracle supports squared loss or a callable derivative, got {loss!r}")


def ipllr_t1_limit(
    xi0,
    y0,
    xi,
    eta: float,
    loss="squared",
    L: int = 3,
    delta: Sequence[float] | None = None,
    activation="relu",
    n_mc: int = 10**6,
    seed: int = 0,
) -> OracleReport:
    """Infinite-width output of IP-LLR after one SGD step on ``(xi0, y0)``.

    The first step uses the base rate ``eta`` at every layer. Limits are
    computed layer by layer: the input layer samples the joint law of the
    scale-free pre-activations at ``xi0`` and ``xi``, each deeper layer
    samples an independent pair (pre-activation, backward vector) and the
    cross-moments with the initial activations at ``xi0`` are chained.

    Args:
        xi0, y0: training sample of the first step.
        xi: evaluation input.
        eta: base learning rate.
        loss: ``"squared"`` or a callable returning ``d loss / d f`` at ``(y, f)``.
        L: number of hidden layers.
        delta: ``L + 1`` effective init stds (``delta[0]`` includes any
            input-layer rescale). Defaults to all ones.
        activation: activation name or object.
        n_mc: Monte-Carlo samples per layer.
        seed: base seed.

    Returns:
        :class:`OracleReport` with ``lambdas[l-1]``, ``f1`` and standard errors.
        Standard errors of deeper quantities include the propagated relative
        error of the upstream cross-moment.
    """
    act = get_activation(activation)
    xi0 = np.asarray(xi0, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if delta is None:
        delta = (1.0,) * (L + 1)
    delta = tuple(float(v) for v in delta)
    chi0 = _loss_derivative_at_zero(loss, y0)
    ladder = variance_ladder(L, float(xi0 @ xi0) + 1.0, delta, act, n_mc=max(n_mc, 10**4), seed=seed)
    if chi0 == 0.0:
        return OracleReport([0.0] * L, [0.0] * L, 0.0, 0.0, chi0, n_mc, ladder, {"trivial": True})

    deg = act.degree if np.isfinite(act.degree) else 1.0
    children = np.random.SeedSequence(seed).spawn(L)
    s1 = delta[0] ** 2
    cov1 = s1 * np.array([[xi0 @ xi0 + 1.0, xi0 @ xi + 1.0], [xi0 @ xi + 1.0, xi @ xi + 1.0]])
    chol1 = _psd_factor(cov1)
    inner = float(xi0 @ xi) + 1.0
    k = -eta * chi0

    lambdas, ses, rel_var = [], [], []
    f_acc = None
    for layer in range(1, L + 1):
        rng = np.random.default_rng(children[layer - 1])
        acc = _Stream()
        f_acc = _Stream() if layer == L else None
        sd_dx = math.sqrt(ladder.v_dx[layer - 1])
        sd_h = math.sqrt(ladder.v_h[layer - 1])
        coef = k * (inner if layer == 1 else lambdas[-1])
        done = 0
        while done < n_mc:
            nb = min(_BLOCK, n_mc - done)
            if layer == 1:
                z = rng.standard_normal((nb, 2)) @ chol1.T
                h_ref, h_eval = z[:, 0], z[:, 1]
                dxt = sd_dx * rng.standard_normal(nb)
                h1 = h_eval + coef * dxt * act.deriv(h_ref)
            else:
                h_ref = sd_h * rng.standard_normal(nb)
                dxt = sd_dx * rng.standard_normal(nb)
                h1 = coef * dxt * act.deriv(h_ref)
            x_ref = act(h_ref)
            x1 = act(h1)
            acc.add(x_ref * x1)
            if f_acc is not None:
                # dxt at the last layer is the raw output weight
                f_acc.add(dxt * x1 + k * x_ref * x1)
            done += nb
        lam = acc.mean
        if not math.isfinite(lam):
            raise DivergenceError(f"non-finite cross-moment at layer {layer}")
        up = 0.0 if layer == 1 else deg * deg * rel_var[-1]
        rv = (acc.se / lam) ** 2 + up if lam != 0 else float("inf")
        lambdas.append(lam)
        ses.append(abs(lam) * math.sqrt(rv) if math.isfinite(rv) else float("inf"))
        rel_var.append(rv)
    f1 = f_acc.mean
    if not math.isfinite(f1):
        raise DivergenceError("non-finite limiting output")
    up = deg * deg * rel_var[-2] if L >= 2 else 0.0
    f1_se = math.sqrt(f_acc.se**2 + f1 * f1 * up) if f1 != 0.0 else f_acc.se
    return OracleReport(lambdas, ses, f1, f1_se, chi0, n_mc, ladder)


def naive_ip_limit(t: int, xi=None) -> float:
    """Limit of the Naive-IP output: identically zero at every step."""
    if t < 0:
        raise ValueError("step must be >= 0")
    return 0.0
