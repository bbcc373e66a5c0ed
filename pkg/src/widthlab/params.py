"""Parameterizations as data: scale exponents, learning-rate exponents, init laws.

A parameterization of an (L+1)-layer perceptron of width ``m`` is described by

* per-layer scale exponents ``a_l``: effective weights are ``m**-a_l * w_l``;
* per-layer learning-rate exponents ``c_l(t)``: the update of ``w_l`` is
  ``-eta * m**-c_l(t) * grad``. Two phases are stored, one for the very first
  step (``t = 0``) and one for every later step;
* the standard deviations ``delta_l`` and means ``u_l`` of the Gaussian init.

Exponents are kept as :class:`fractions.Fraction` so that the tables stay exact;
they only become floats when a width factor ``m**-c`` is formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Sequence

__all__ = [
    "BiasMode",
    "Variant",
    "Slot",
    "ParamSpec",
    "PARAM_NAMES",
    "INIT_STD",
    "gamma_exponents",
    "make_spec",
    "lr_exponent",
    "width_factor",
    "canonical_name",
]


class BiasMode(str, Enum):
    """How biases enter the pre-activations."""

    SCALED = "scaled"  # B_l = m^-a_l b_l at every layer
    UNSCALED_ABOVE_1 = "unscaled-above-1"  # B_l = b_l (layer 1 has a_1 = 0 anyway)
    FIRST_LAYER_ONLY = "first-layer-only"  # bias only in the input layer


class Variant(str, Enum):
    """Post-first-update weight surgery applied to intermediate layers."""

    PLAIN = "plain"
    HP = "HP"
    HPZ = "HPZ"


class Slot(str, Enum):
    WEIGHT = "weight"
    BIAS = "bias"


PARAM_NAMES = ("NTK", "MuP", "NaiveIP", "IPLLR", "IPBias", "IPNonCentered", "HP", "HPZ")

_ALIASES = {
    "ntk": "NTK",
    "mup": "MuP",
    "mu-p": "MuP",
    "naiveip": "NaiveIP",
    "naive-ip": "NaiveIP",
    "ipllr": "IPLLR",
    "ip-llr": "IPLLR",
    "ipbias": "IPBias",
    "ip-bias": "IPBias",
    "ipnoncentered": "IPNonCentered",
    "ip-non-centered": "IPNonCentered",
    "hp": "HP",
    "hpz": "HPZ",
}

# Initial standard deviation of hidden layers per activation family.
INIT_STD = {
    "relu": math.sqrt(2.0),
    "gelu": 2.0,
    "elu": 1.0,
    "tanh": 1.0,
}

Exponents = tuple  # tuple[Fraction, ...]


def _frac(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**9)
    return Fraction(x)


def _fracs(xs: Sequence) -> Exponents:
    return tuple(_frac(x) for x in xs)


def canonical_name(name: str) -> str:
    """Map user spellings (``naive-ip``, ``mup`` ...) to the canonical name.

    Raises:
        ValueError: if the name is not a known parameterization.
    """
    if name in PARAM_NAMES:
        return name
    key = name.strip().lower().replace("_", "-")
    if key in _ALIASES:
        return _ALIASES[key]
    key2 = key.replace("-", "")
    if key2 in _ALIASES:
        return _ALIASES[key2]
    raise ValueError(f"unknown parameterization {name!r}; expected one of {', '.join(PARAM_NAMES)}")


@dataclass(frozen=True)
class ParamSpec:
    """Immutable description of a parameterization.

    All per-layer vectors have length ``L + 1`` and are indexed by ``l - 1``
    for layer ``l``.
    """

    name: str
    L: int
    a: Exponents
    c_init: Exponents
    c_later: Exponents
    delta: tuple
    u_shift: tuple
    bias_mode: BiasMode = BiasMode.SCALED
    variant: Variant = Variant.PLAIN
    eps_init: Exponents | None = None  # separate bias exponents (IP-bias only)
    eps_later: Exponents | None = None
    p: Fraction = Fraction(1)
    activation: str = "relu"
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        n = self.L + 1
        if self.L < 2:
            raise ValueError(f"L must be >= 2, got {self.L}")
        for fname in ("a", "c_init", "c_later", "delta", "u_shift"):
            if len(getattr(self, fname)) != n:
                raise ValueError(f"{fname} must have length L+1={n}")
        for fname in ("eps_init", "eps_later"):
            v = getattr(self, fname)
            if v is not None and len(v) != n:
                raise ValueError(f"{fname} must have length L+1={n}")
        if any(not (d > 0) for d in self.delta):
            raise ValueError("all init stds delta_l must be > 0")

    @property
    def n_layers(self) -> int:
        return self.L + 1

    def has_bias(self, layer: int) -> bool:
        """Whether layer ``layer`` (1-indexed) carries a bias vector."""
        if self.bias_mode is BiasMode.FIRST_LAYER_ONLY:
            return layer == 1
        return True

    def bias_is_scaled(self, layer: int) -> bool:
        return self.bias_mode is BiasMode.SCALED

    def reparameterize(self, b: Sequence) -> "ParamSpec":
        """Apply the abc -> ac change of variables for per-layer offsets ``b``.

        Moving a factor ``m**-b_l`` from the init std into the weight scale gives
        ``a_l + b_l`` and ``c_l - 2 b_l``; the effective weights are unchanged in
        law and, with the raw weights rescaled accordingly, pathwise.
        """
        bb = _fracs(b)
        if len(bb) != self.n_layers:
            raise ValueError("offset vector must have length L+1")
        shift = lambda v: tuple(x - 2 * o for x, o in zip(v, bb))  # noqa: E731
        return replace(
            self,
            a=tuple(x + o for x, o in zip(self.a, bb)),
            c_init=shift(self.c_init),
            c_later=shift(self.c_later),
            eps_init=None if self.eps_init is None else shift(self.eps_init),
            eps_later=None if self.eps_later is None else shift(self.eps_later),
            extra={**self.extra, "b_offsets": bb},
        )

    def to_config(self) -> dict:
        """Flat key-value view (name, L, p, activation, u_shift)."""
        return {
            "name": self.name,
            "L": str(self.L),
            "p": str(self.p),
            "activation": self.activation,
            "u_shift": ",".join(_fmt_num(u) for u in self.u_shift),
        }

    @classmethod
    def from_config(cls, section: dict) -> "ParamSpec":
        u = section.get("u_shift")
        u_shift = None
        if u not in (None, ""):
            u_shift = [float(s) for s in str(u).split(",")]
        return make_spec(
            section["name"],
            int(section["L"]),
            p=Fraction(str(section.get("p", "1"))),
            activation=section.get("activation", "relu"),
            u_shift=u_shift,
        )


def _fmt_num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def gamma_exponents(L: int, p=1) -> Exponents:
    """Step-0 learning-rate exponents that make every first update order one.

    ``gamma_1 = gamma_{L+1} = -(1 + S)/2`` and ``gamma_l = -1 - S/2`` for the
    intermediate layers, where ``S = sum_{k<L} p**k``.

    Args:
        L: number of hidden layers (>= 2).
        p: homogeneity degree of the activation (>= 1).

    Returns:
        Tuple of ``L + 1`` exact rationals.
    """
    if L < 2:
        raise ValueError(f"L must be >= 2, got {L}")
    p = _frac(p)
    if p < 1:
        raise ValueError(f"homogeneity degree must be >= 1, got {p}")
    s = sum(p**k for k in range(L))
    end = -(1 + s) / 2
    mid = -1 - s / 2
    return (end,) + (mid,) * (L - 1) + (end,)


def _init_std(activation: str) -> float:
    return INIT_STD.get(activation.split(":")[0].split("(")[0].lower(), 1.0)


def make_spec(
    name: str,
    L: int,
    p=1,
    activation: str = "relu",
    *,
    u_shift: Sequence | None = None,
    bias_mode: BiasMode | str | None = None,
    delta: Sequence | None = None,
) -> ParamSpec:
    """Build one of the named parameterizations.

    Args:
        name: one of ``NTK, MuP, NaiveIP, IPLLR, IPBias, IPNonCentered, HP, HPZ``
            (case-insensitive, dashes allowed).
        L: number of hidden layers.
        p: homogeneity degree used for the step-0 exponents of IP-LLR.
        activation: activation name; selects the default init stds.
        u_shift: override of the non-centering means (IP-non-centered).
        bias_mode: override of the default bias handling.
        delta: override of the init stds (length ``L + 1``).
    """
    name = canonical_name(name)
    if L < 2:
        raise ValueError(f"L must be >= 2, got {L}")
    p = _frac(p)
    half, one = Fraction(1, 2), Fraction(1)
    zero = Fraction(0)
    ntk_a = (zero,) + (half,) * L
    mup_a = (zero,) + (half,) * (L - 1) + (one,)
    ip_a = (zero,) + (one,) * L
    naive_c = (-one,) + (Fraction(-2),) * (L - 1) + (-one,)

    eps_init = eps_later = None
    variant = Variant.PLAIN
    u_default = (0.0,) * (L + 1)
    if name == "NTK":
        a, c0, c1, mode = ntk_a, (zero,) * (L + 1), (zero,) * (L + 1), BiasMode.SCALED
    elif name in ("MuP", "HP", "HPZ"):
        a, c0, c1 = mup_a, (-one,) * (L + 1), (-one,) * (L + 1)
        if name == "MuP":
            mode = BiasMode.SCALED
        else:
            mode = BiasMode.FIRST_LAYER_ONLY
            variant = Variant(name)
    elif name == "NaiveIP":
        a, c0, c1, mode = ip_a, naive_c, naive_c, BiasMode.SCALED
    elif name == "IPLLR":
        a, c0, c1, mode = ip_a, gamma_exponents(L, p), naive_c, BiasMode.FIRST_LAYER_ONLY
    elif name == "IPBias":
        a, c1, mode = ip_a, naive_c, BiasMode.UNSCALED_ABOVE_1
        first = -Fraction(L + 1, 2)
        c0 = (first,) + tuple(-Fraction(L - l + 4, 2) for l in range(2, L + 1)) + (-one,)
        eps_init = (first,) + tuple(-Fraction(L - l + 2, 2) for l in range(2, L + 1)) + (zero,)
        eps_later = (-one,) * L + (zero,)
    else:  # IPNonCentered
        a, c0, c1, mode = ip_a, naive_c, naive_c, BiasMode.SCALED
        u_default = (0.0,) + (1.0,) * L

    if u_shift is not None:
        u_shift = tuple(float(u) for u in u_shift)
        if any(u != 0 for u in u_shift) and name != "IPNonCentered":
            raise ValueError("u_shift may only be nonzero for IPNonCentered")
    else:
        u_shift = u_default
    if delta is None:
        s = _init_std(activation)
        delta = (s,) * L + (1.0,)
    if bias_mode is not None:
        mode = BiasMode(bias_mode)
    return ParamSpec(
        name=name,
        L=L,
        a=a,
        c_init=c0,
        c_later=c1,
        delta=tuple(float(d) for d in delta),
        u_shift=u_shift,
        bias_mode=mode,
        variant=variant,
        eps_init=eps_init,
        eps_later=eps_later,
        p=p,
        activation=activation,
    )


def lr_exponent(spec: ParamSpec, layer: int, t: int, slot: Slot | str = Slot.WEIGHT) -> Fraction:
    """Learning-rate exponent of ``layer`` (1-indexed) at step ``t``."""
    if not 1 <= layer <= spec.L + 1:
        raise IndexError(f"layer {layer} out of range [1, {spec.L + 1}]")
    if t < 0:
        raise ValueError("step must be >= 0")
    slot = Slot(slot)
    if slot is Slot.BIAS and spec.eps_init is not None:
        table = spec.eps_init if t == 0 else spec.eps_later
    else:
        table = spec.c_init if t == 0 else spec.c_later
    return table[layer - 1]


def width_factor(m: int, exponent) -> float:
    """``m ** -exponent`` as a float.

    Uses ``pow`` rather than ``exp(-e * ln m)`` so that exactly representable
    results (powers of two for power-of-four widths) come out exact.
    """
    return float(m) ** -float(exponent)
