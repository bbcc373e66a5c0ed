"""Finite-width fully-connected network under an arbitrary parameterization.

Raw weights ``w_l`` and biases ``b_l`` are stored; effective weights
``m**-a_l * w_l`` are formed on the fly. Arrays are batched: a forward pass on
``n`` inputs of dimension ``d`` yields per-layer ``(n, m)`` arrays and an
``(n, K)`` output.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import blas
from scipy.optimize import brentq
from scipy.special import logsumexp

from .activations import Activation, get_activation
from .init_stream import BIAS_SLOT, WEIGHT_SLOT, gaussian_block
from .params import ParamSpec, Slot, Variant, lr_exponent, width_factor

__all__ = [
    "Activation",
    "NetworkState",
    "ForwardTrace",
    "BackwardTrace",
    "TildeForward",
    "TildeBackward",
    "NumericOverflow",
    "StaleStateError",
    "CalibrationError",
    "init_network",
    "initial_weight",
    "initial_bias",
    "forward",
    "backward",
    "gradients",
    "sgd_step",
    "tilde_forward",
    "tilde_backward",
    "calibrate_ipllr_lr",
    "loss_eval",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"WLAB"
CHECKPOINT_VERSION = 1


class NumericOverflow(ArithmeticError):
    """Non-finite value produced during a pass."""

    def __init__(self, where: str, layer: int, *, name: str = "", m: int = 0, t: int = 0):
        self.where, self.layer, self.name, self.m, self.t = where, layer, name, m, t
        super().__init__(f"non-finite {where} at layer {layer} ({name}, m={m}, t={t})")


class StaleStateError(RuntimeError):
    """Tilde variables requested on a network that has already been trained."""


class CalibrationError(RuntimeError):
    def __init__(self, layer: int, reason: str):
        self.layer = layer
        super().__init__(f"learning-rate calibration failed at layer {layer}: {reason}")


@dataclass
class NetworkState:
    """Raw parameters of a width-``m`` network plus the step counter."""

    spec: ParamSpec
    m: int
    d: int
    seed: int
    weights: list  # w_1 (m, d), w_l (m, m), w_{L+1} (m, K)
    biases: list  # b_l (m,) or None, b_{L+1} (K,) or None
    t: int = 0
    K: int = 1
    first_layer_rescale: bool = True
    activation: Activation = field(default=None)

    def __post_init__(self):
        if self.activation is None:
            self.activation = get_activation(self.spec.activation)
        self._scale = [width_factor(self.m, a) for a in self.spec.a]

    @property
    def L(self) -> int:
        return self.spec.L

    def scale(self, layer: int) -> float:
        """``m**-a_l`` for 1-indexed ``layer``."""
        return self._scale[layer - 1]

    def bias_factor(self, layer: int) -> float:
        return self._scale[layer - 1] if self.spec.bias_is_scaled(layer) else 1.0

    def effective_weight(self, layer: int) -> np.ndarray:
        return self.scale(layer) * self.weights[layer - 1]

    def effective_bias(self, layer: int):
        b = self.biases[layer - 1]
        return None if b is None else self.bias_factor(layer) * b

    def init_std(self, layer: int) -> float:
        s = self.spec.delta[layer - 1]
        if layer == 1 and self.first_layer_rescale:
            s /= math.sqrt(self.d + 1)
        return s

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.spec,
            self.m,
            self.d,
            self.seed,
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.t,
            self.K,
            self.first_layer_rescale,
            self.activation,
        )


@dataclass
class ForwardTrace:
    inputs: np.ndarray  # (n, d)
    h: list  # per layer (n, m), index l-1
    x: list
    f: np.ndarray  # (n, K)

    @property
    def output(self) -> np.ndarray:
        """Output with the class axis squeezed when ``K == 1``."""
        return self.f[:, 0] if self.f.shape[1] == 1 else self.f


@dataclass
class BackwardTrace:
    """Gradients of the output w.r.t. pre-activations and activations.

    For a scalar output ``dh``/``dx`` are gradients of ``f``; the loss gradient
    of sample ``i`` is ``chi[i] * dh[i]``. With ``K > 1`` outputs they are the
    gradients of ``sum_k chi_k f_k`` (i.e. of the loss) and ``weighted`` is True.
    """

    dh: list
    dx: list
    chi: np.ndarray  # (n, K)
    loss: np.ndarray  # (n,)
    weighted: bool = False


@dataclass
class TildeForward:
    h: list
    x: list
    f: np.ndarray


@dataclass
class TildeBackward:
    dh: list
    dx: list


def initial_weight(net: NetworkState, layer: int) -> np.ndarray:
    """Regenerate ``w_l(0)`` from the init stream."""
    spec, m = net.spec, net.m
    if layer == 1:
        g = gaussian_block(net.seed, WEIGHT_SLOT, 1, m, net.d)
    elif layer <= spec.L:
        g = gaussian_block(net.seed, WEIGHT_SLOT, layer, m, m)
    elif layer == spec.L + 1:
        g = gaussian_block(net.seed, WEIGHT_SLOT, layer, net.K, m).T.copy()
    else:
        raise IndexError(layer)
    g *= net.init_std(layer)
    u = spec.u_shift[layer - 1]
    if u:
        g += u
    return g


def initial_bias(net: NetworkState, layer: int):
    if not net.spec.has_bias(layer):
        return None
    n = net.K if layer == net.spec.L + 1 else net.m
    return net.init_std(layer) * gaussian_block(net.seed, BIAS_SLOT, layer, 1, n)[0]


def init_network(
    spec: ParamSpec,
    m: int,
    d: int,
    seed: int = 0,
    *,
    K: int = 1,
    first_layer_rescale: bool = True,
    activation: Activation | str | None = None,
) -> NetworkState:
    """Initialize a width-``m`` network.

    ``w_l(0) = delta_l * G + u_l`` with ``G`` read from the counter-based stream
    of ``(seed, l)``. With ``first_layer_rescale`` the input layer's weights and
    bias use std ``delta_1 / sqrt(d + 1)``.
    """
    if m < 1 or d < 1 or K < 1:
        raise ValueError("m, d and K must be >= 1")
    act = get_activation(activation if activation is not None else spec.activation)
    net = NetworkState(spec, m, d, seed, [], [], 0, K, first_layer_rescale, act)
    for layer in range(1, spec.L + 2):
        net.weights.append(initial_weight(net, layer))
        net.biases.append(initial_bias(net, layer))
    return net


def _as_batch(xi) -> np.ndarray:
    x = np.asarray(xi, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check(arr, where, layer, net):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflow(where, layer, name=net.spec.name, m=net.m, t=net.t)


def forward(net: NetworkState, xi) -> ForwardTrace:
    """Forward pass on one input ``(d,)`` or a batch ``(n, d)``."""
    # overflow is reported through NumericOverflow, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(net, xi)


def _forward(net: NetworkState, xi) -> ForwardTrace:
    X = _as_batch(xi)
    if X.shape[1] != net.d:
        raise ValueError(f"input dimension {X.shape[1]} != d={net.d}")
    act = net.activation
    hs, xs = [], []
    prev = X
    for layer in range(1, net.L + 1):
        s = net.scale(layer)
        b = net.biases[layer - 1]
        z = prev @ net.weights[layer - 1].T
        if b is None:
            h = s * z
        elif net.spec.bias_is_scaled(layer):
            h = s * (z + b)
        else:
            h = s * z + b
        _check(h, "pre-activation", layer, net)
        hs.append(h)
        prev = act(h)
        xs.append(prev)
    layer = net.L + 1
    s = net.scale(layer)
    b = net.biases[layer - 1]
    z = prev @ net.weights[layer - 1]
    if b is None:
        f = s * z
    elif net.spec.bias_is_scaled(layer):
        f = s * (z + b)
    else:
        f = s * z + b
    _check(f, "output", layer, net)
    return ForwardTrace(X, hs, xs, f)


def loss_eval(kind: str, y, f):
    """Loss value and its derivative in the prediction.

    Args:
        kind: ``"squared"`` for ``(y - f)**2 / 2`` (summed over outputs) or
            ``"cross-entropy"`` for softmax cross-entropy on logits ``f``.
        y: target (scalar / vector) or class index.
        f: prediction (scalar or vector of logits).

    Returns:
        ``(value, dvalue/df)``.
    """
    f_arr = np.atleast_1d(np.asarray(f, dtype=np.float64))
    if kind == "squared":
        r = f_arr - np.asarray(y, dtype=np.float64)
        val = 0.5 * float(np.sum(r * r))
        return val, (float(r[0]) if np.ndim(f) == 0 else r)
    if kind in ("cross-entropy", "ce", "xent"):
        k = int(y)
        if not 0 <= k < f_arr.size or k != y:
            raise ValueError(f"invalid class index {y!r} for {f_arr.size} logits")
        lse = logsumexp(f_arr)
        g = np.exp(f_arr - lse)
        g[k] -= 1.0
        return float(lse - f_arr[k]), g
    raise ValueError(f"unknown loss {kind!r}")


def _batch_loss(kind: str, Y, F: np.ndarray):
    n, K = F.shape
    if kind == "squared":
        T = np.asarray(Y, dtype=np.float64).reshape(n, -1)
        if T.shape[1] != K:
            raise ValueError("squared loss needs targets with one column per output")
        R = F - T
        return 0.5 * np.sum(R * R, axis=1), R
    if kind in ("cross-entropy", "ce", "xent"):
        lab = np.asarray(Y).reshape(n)
        if lab.dtype.kind not in "iu" and not np.all(lab == np.round(lab)):
            raise ValueError("cross-entropy needs integer class labels")
        lab = lab.astype(np.int64)
        if np.any(lab < 0) or np.any(lab >= K):
            raise ValueError(f"class index out of range for {K} logits")
        lse = logsumexp(F, axis=1)
        G = np.exp(F - lse[:, None])
        G[np.arange(n), lab] -= 1.0
        return lse - F[np.arange(n), lab], G
    raise ValueError(f"unknown loss {kind!r}")


def backward(net: NetworkState, trace: ForwardTrace, y, loss: str = "squared") -> BackwardTrace:
    """Reverse pass through the trace of :func:`forward` on the same state."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _backward(net, trace, y, loss)


def _backward(net: NetworkState, trace: ForwardTrace, y, loss: str) -> BackwardTrace:
    vals, chi = _batch_loss(loss, y, trace.f)
    _check(chi, "loss derivative", net.L + 1, net)
    n = trace.f.shape[0]
    act = net.activation
    w_out = net.effective_weight(net.L + 1)  # (m, K)
    weighted = net.K > 1
    if weighted:
        dx = chi @ w_out.T
    else:
        dx = np.broadcast_to(w_out[:, 0], (n, net.m)).copy()
    dxs = [None] * net.L
    dhs = [None] * net.L
    for layer in range(net.L, 0, -1):
        dxs[layer - 1] = dx
        dh = dx * act.deriv(trace.h[layer - 1])
        _check(dh, "gradient", layer, net)
        dhs[layer - 1] = dh
        if layer > 1:
            dx = net.scale(layer) * (dh @ net.weights[layer - 1])
    return BackwardTrace(dhs, dxs, chi, vals, weighted)


def gradients(net: NetworkState, fwd: ForwardTrace, bwd: BackwardTrace):
    """Batch-averaged loss gradients w.r.t. raw weights and biases.

    Returns:
        ``(grad_w, grad_b)`` lists indexed by ``l - 1``; ``grad_b`` holds
        ``None`` for absent biases.
    """
    n = fwd.f.shape[0]
    r = None if bwd.weighted else bwd.chi[:, 0]
    gw, gb = [], []
    prev = fwd.inputs
    for layer in range(1, net.L + 1):
        G = bwd.dh[layer - 1] if r is None else bwd.dh[layer - 1] * r[:, None]
        gw.append(net.scale(layer) / n * (G.T @ prev))
        gb.append(None if net.biases[layer - 1] is None else net.bias_factor(layer) * G.mean(axis=0))
        prev = fwd.x[layer - 1]
    layer = net.L + 1
    gw.append(net.scale(layer) / n * (prev.T @ bwd.chi))
    gb.append(None if net.biases[layer - 1] is None else net.bias_factor(layer) * bwd.chi.mean(axis=0))
    return gw, gb


def _split_batch(batch):
    # (X, Y) with X 2-D, a single (xi, y) pair, or a sequence of pairs
    if isinstance(batch, tuple) and len(batch) == 2:
        X, Y = batch
        if np.ndim(X) == 2:
            return _as_batch(X), np.asarray(Y)
        if np.ndim(X) == 1:
            return _as_batch(X), np.asarray(Y)[None, ...]
    xs, ys = zip(*batch)
    return np.vstack([np.asarray(v, dtype=np.float64) for v in xs]), np.asarray(ys)


def _lrs(net: NetworkState, eta: float, lr_overrides):
    n = net.L + 1
    if lr_overrides is None:
        return [eta] * n
    if len(lr_overrides) != n:
        raise ValueError(f"lr_overrides must have length L+1={n}, got {len(lr_overrides)}")
    return [eta if v is None else float(v) for v in lr_overrides]


def sgd_step(
    net: NetworkState,
    batch,
    eta: float,
    lr_overrides: Sequence | None = None,
    loss: str = "squared",
) -> NetworkState:
    """One SGD step in place; returns ``net``.

    ``batch`` is ``(X, Y)`` with ``X`` of shape ``(n, d)`` or a list of
    ``(xi, y)`` pairs. After the first step of an HP/HPZ spec the initial
    weights of the intermediate layers are removed from ``w_l(1)`` (HPZ) or
    rescaled to effective ``m**-1 * U_l`` (HP).
    """
    X, Y = _split_batch(batch)
    etas = _lrs(net, eta, lr_overrides)
    fwd = forward(net, X)
    bwd = backward(net, fwd, Y, loss)
    n = X.shape[0]
    r = None if bwd.weighted else bwd.chi[:, 0]
    t = net.t
    prev = fwd.inputs
    for layer in range(1, net.L + 2):
        i = layer - 1
        lr = etas[i] * width_factor(net.m, lr_exponent(net.spec, layer, t, Slot.WEIGHT))
        if layer <= net.L:
            G = bwd.dh[i] if r is None else bwd.dh[i] * r[:, None]
            _rank_update(net.weights[i], -lr * net.scale(layer) / n, G, prev)
            prev = fwd.x[i]
        else:
            G = bwd.chi
            net.weights[i] -= (lr * net.scale(layer) / n) * (prev.T @ G)
        if net.biases[i] is not None:
            lrb = etas[i] * width_factor(net.m, lr_exponent(net.spec, layer, t, Slot.BIAS))
            net.biases[i] -= lrb * net.bias_factor(layer) * G.mean(axis=0)
    net.t += 1
    if net.t == 1 and net.spec.variant is not Variant.PLAIN:
        _surgery(net)
    return net


def _rank_update(W: np.ndarray, alpha: float, G: np.ndarray, P: np.ndarray) -> None:
    """In place ``W += alpha * G.T @ P`` without forming the full product."""
    if W.flags.c_contiguous:
        # W^T is Fortran-ordered, which is what BLAS updates in place
        Wt = W.T
        if G.shape[0] == 1:
            blas.dger(alpha, P[0], G[0], a=Wt, overwrite_a=1)
        else:
            blas.dgemm(alpha, P, G, beta=1.0, c=Wt, trans_a=1, overwrite_c=1)
        return
    W += alpha * (G.T @ P)


def _surgery(net: NetworkState) -> None:
    keep = 1.0 / math.sqrt(net.m) if net.spec.variant is Variant.HP else 0.0
    for layer in range(2, net.L + 1):
        w0 = initial_weight(net, layer)
        w = net.weights[layer - 1]
        w -= w0
        if keep:
            w += keep * w0


def tilde_forward(net: NetworkState, xi) -> TildeForward:
    """Scale-free forward pass at initialization.

    ``h~_1 = w_1(0) xi + b_1(0)``, ``h~_l = m**-1/2 w_l(0) x~_{l-1}`` and
    ``f~ = m**-1/2 w_{L+1}(0)^T x~_L``, whatever the exponents of the parameterization.
    """
    if net.t != 0:
        raise StaleStateError("tilde variables are defined at initialization only (t=0)")
    X = _as_batch(xi)
    act = net.activation
    r = 1.0 / math.sqrt(net.m)
    h = X @ net.weights[0].T
    if net.biases[0] is not None:
        h = h + net.biases[0]
    hs, xs = [h], [act(h)]
    for layer in range(2, net.L + 1):
        h = r * (xs[-1] @ net.weights[layer - 1].T)
        hs.append(h)
        xs.append(act(h))
    f = r * (xs[-1] @ net.weights[-1])
    return TildeForward(hs, xs, f)


def tilde_backward(net: NetworkState, xi, fwd: TildeForward | None = None) -> TildeBackward:
    """Scale-free backward pass: ``dx~_L = w_{L+1}(0)``, ``dx~_{l-1} = m**-1/2 w_l(0)^T dh~_l``."""
    if net.t != 0:
        raise StaleStateError("tilde variables are defined at initialization only (t=0)")
    if fwd is None:
        fwd = tilde_forward(net, xi)
    n = fwd.h[0].shape[0]
    act = net.activation
    r = 1.0 / math.sqrt(net.m)
    dx = np.broadcast_to(net.weights[-1][:, 0], (n, net.m)).copy()
    dxs = [None] * net.L
    dhs = [None] * net.L
    for layer in range(net.L, 0, -1):
        dxs[layer - 1] = dx
        dh = dx * act.deriv(fwd.h[layer - 1])
        dhs[layer - 1] = dh
        if layer > 1:
            dx = r * (dh @ net.weights[layer - 1])
    return TildeBackward(dhs, dxs)


def calibrate_ipllr_lr(
    net: NetworkState,
    spec: ParamSpec,
    batch0,
    batch1,
    eta: float,
    loss: str = "squared",
    cap: float = 500.0,
) -> list:
    """Per-layer base learning rates for the first step of IP-LLR.

    Layers ``2..L`` are handled in order: ``eta_l`` is set so that, once the
    step-0 update is applied with the rates chosen so far, the mean absolute
    pre-activation of layer ``l`` on ``batch1`` equals one. Rates are capped at
    ``cap``; the input and output layers keep ``eta``.

    Returns:
        List of ``L + 1`` base learning rates.
    """
    if net.t != 0:
        raise StaleStateError("calibration needs a network at initialization")
    if spec.name != "IPLLR":
        raise ValueError(f"calibration is defined for IPLLR, got {spec.name}")
    X0, Y0 = _split_batch(batch0)
    X1, _ = _split_batch(batch1)
    fwd = forward(net, X0)
    gw, gb = gradients(net, fwd, backward(net, fwd, Y0, loss))
    act = net.activation
    etas = [float(eta)] * (net.L + 1)

    def layer_parts(layer, prev):
        i = layer - 1
        s = net.scale(layer)
        lr_w = width_factor(net.m, lr_exponent(spec, layer, 0, Slot.WEIGHT))
        base = s * (prev @ net.weights[i].T)
        step = -lr_w * s * (prev @ gw[i].T)
        b = net.biases[i]
        if b is not None:
            lr_b = width_factor(net.m, lr_exponent(spec, layer, 0, Slot.BIAS))
            bf = net.bias_factor(layer)
            base = base + bf * b
            step = step - lr_b * bf * gb[i]
        return base, step

    base, step = layer_parts(1, X1)
    prev = act(base + etas[0] * step)
    for layer in range(2, net.L + 1):
        base, step = layer_parts(layer, prev)
        if not np.any(prev) or not np.any(step):
            raise CalibrationError(layer, "first update has no effect on this batch (zero activations)")
        g = lambda e: float(np.mean(np.abs(base + e * step))) - 1.0  # noqa: E731
        if g(0.0) >= 0.0:
            raise CalibrationError(layer, "target already exceeded without an update")
        if g(cap) <= 0.0:
            e = cap
        else:
            e = brentq(g, 0.0, cap, xtol=1e-14, rtol=1e-12)
        etas[layer - 1] = e
        prev = act(base + e * step)
    return etas


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: NetworkState, path) -> None:
    """Write raw parameters: header then float64 weights then biases (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", CHECKPOINT_VERSION, net.m, net.L, net.d, net.t))
        for w in net.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        for b in net.biases:
            if b is not None:
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path, spec: ParamSpec, seed: int = 0, *, first_layer_rescale: bool = True) -> NetworkState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    The number of outputs ``K`` is recovered from the payload size.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    if len(raw) < 24:
        raise ValueError("truncated checkpoint header")
    version, m, L, d, t = struct.unpack("<5I", raw[4:24])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if L != spec.L:
        raise ValueError(f"checkpoint depth L={L} does not match spec L={spec.L}")
    payload = np.frombuffer(raw, dtype="<f8", offset=24)
    fixed = m * d + (L - 1) * m * m + sum(m for layer in range(1, L + 1) if spec.has_bias(layer))
    per_k = m + (1 if spec.has_bias(L + 1) else 0)
    K, rem = divmod(payload.size - fixed, per_k)
    if rem or K < 1:
        raise ValueError("checkpoint payload size inconsistent with spec")
    shapes = [(m, d)] + [(m, m)] * (L - 1) + [(m, K)]
    pos = 0
    weights, biases = [], []
    for shp in shapes:
        n = shp[0] * shp[1]
        weights.append(payload[pos : pos + n].reshape(shp).astype(np.float64))
        pos += n
    for layer in range(1, L + 2):
        if spec.has_bias(layer):
            n = K if layer == L + 1 else m
            biases.append(payload[pos : pos + n].astype(np.float64))
            pos += n
        else:
            biases.append(None)
    return NetworkState(spec, m, d, seed, weights, biases, t, K, first_layer_rescale)
