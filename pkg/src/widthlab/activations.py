"""Element-wise activations with their derivatives."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = ["Activation", "get_activation", "ACTIVATION_NAMES"]

ACTIVATION_NAMES = ("relu", "relu2", "relu^p", "leaky(alpha,beta)", "gelu", "elu", "tanh", "identity")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Activation:
    """An activation ``sigma`` and its derivative.

    ``kind='homogeneous'`` is the family ``alpha * z**p`` on ``z >= 0`` and
    ``beta * |z|**p`` on ``z < 0`` with ``alpha > beta >= 0``. The derivative at
    the kink ``z = 0`` is defined as 0.
    """

    kind: str
    p: float = 1.0
    alpha: float = 1.0
    beta: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("homogeneous", "gelu", "elu", "tanh", "identity"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "homogeneous":
            if self.p < 1:
                raise ValueError("homogeneity degree must be >= 1")
            if not self.alpha > self.beta >= 0:
                raise ValueError("homogeneous activation needs alpha > beta >= 0")

    @classmethod
    def homogeneous(cls, p: float = 1.0, alpha: float = 1.0, beta: float = 0.0) -> "Activation":
        return cls("homogeneous", float(p), float(alpha), float(beta))

    @property
    def is_homogeneous(self) -> bool:
        return self.kind == "homogeneous"

    @property
    def is_relu(self) -> bool:
        return self.kind == "homogeneous" and self.p == 1.0 and self.alpha == 1.0 and self.beta == 0.0

    @property
    def degree(self) -> float:
        """Homogeneity degree (1 for the identity, NaN for smooth kinds)."""
        if self.kind == "homogeneous":
            return self.p
        return 1.0 if self.kind == "identity" else float("nan")

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        k = self.kind
        if k == "homogeneous":
            if self.p == 1.0:
                pos = np.maximum(z, 0.0)
                if self.beta == 0.0:
                    return self.alpha * pos if self.alpha != 1.0 else pos
                return self.alpha * pos + self.beta * np.maximum(-z, 0.0)
            a = np.abs(z) ** self.p
            return np.where(z >= 0, self.alpha * a, self.beta * a)
        if k == "tanh":
            return np.tanh(z)
        if k == "gelu":
            return z * ndtr(z)
        if k == "elu":
            return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
        return z.copy()

    def deriv(self, z):
        z = np.asarray(z, dtype=np.float64)
        k = self.kind
        if k == "homogeneous":
            if self.p == 1.0:
                return np.where(z > 0, self.alpha, np.where(z < 0, -self.beta, 0.0))
            a = self.p * np.abs(z) ** (self.p - 1.0)
            return np.where(z > 0, self.alpha * a, np.where(z < 0, -self.beta * a, 0.0))
        if k == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if k == "gelu":
            return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        if k == "elu":
            return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
        return np.ones_like(z)


_POW = re.compile(r"^relu\^?(\d+(?:\.\d+)?)$")
_LEAKY = re.compile(r"^(?:leaky|homogeneous)\(([^)]*)\)$")


def get_activation(name: str | Activation) -> Activation:
    """Parse an activation name.

    Accepted: ``relu``, ``relu2`` / ``relu^p``, ``leaky(alpha,beta)``,
    ``homogeneous(p,alpha,beta)``, ``gelu``, ``elu``, ``tanh``, ``identity``.
    """
    if isinstance(name, Activation):
        return name
    key = str(name).strip().lower().replace(" ", "")
    if key == "relu":
        return Activation("homogeneous", 1.0, 1.0, 0.0, name="relu")
    mt = _POW.match(key)
    if mt:
        return Activation("homogeneous", float(mt.group(1)), 1.0, 0.0, name=key)
    mt = _LEAKY.match(key)
    if mt:
        vals = [float(v) for v in mt.group(1).split(",") if v]
        if key.startswith("leaky"):
            if len(vals) != 2:
                raise ValueError(f"leaky activation needs (alpha,beta): {name!r}")
            return Activation("homogeneous", 1.0, vals[0], vals[1], name=key)
        if len(vals) != 3:
            raise ValueError(f"homogeneous activation needs (p,alpha,beta): {name!r}")
        return Activation("homogeneous", vals[0], vals[1], vals[2], name=key)
    if key in ("gelu", "elu", "tanh", "identity", "linear"):
        kind = "identity" if key == "linear" else key
        return Activation(kind, name=kind)
    raise ValueError(f"unknown activation {name!r}")
