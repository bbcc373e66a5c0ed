"""Experiment configuration: defaults, validation and INI round-trip."""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields

from .activations import get_activation
from .params import canonical_name

__all__ = ["ExperimentConfig", "ConfigError", "PROBES", "validate", "load_config", "dump_config", "parse_config_text"]

PROBES = (
    "triviality",
    "llr-escape",
    "scaling",
    "rank",
    "equivalence",
    "hpz-convergence",
    "collapse",
    "ip-bias-independence",
    "oracle-compare",
    "train",
    "gradcheck",
)

# Training defaults (L=6, m=1024, eta=0.01, B=512, cross-entropy, 5 trials).
TABLE2 = dict(
    L=6,
    widths=[1024],
    eta=0.01,
    batch_size=512,
    loss="cross-entropy",
    seeds=[0, 1, 2, 3, 4],
    steps=600,
    d=784,
    dataset="mnist",
)

_SYNTH = dict(dataset="synthetic", d=8, n_samples=64, batch_size=1, loss="squared")
_SWEEP = [64, 256, 1024, 4096]
_SWEEP_OCT = [64, 128, 256, 512, 1024, 2048]

# Per-probe presets applied on top of the Table 2 defaults.
PRESETS = {
    "triviality": dict(_SYNTH, param="NaiveIP", L=3, widths=_SWEEP, eta=1.0, steps=30, record_steps=[1, 10, 30]),
    "llr-escape": dict(_SYNTH, param="IPLLR", L=3, widths=_SWEEP, eta=1.0, steps=30, calibrate=True),
    "scaling": dict(_SYNTH, param="NaiveIP", L=3, widths=_SWEEP, seeds=[0, 1, 2], steps=0),
    "rank": dict(params=["IPLLR", "MuP"], widths=[512], seeds=[0], steps=1, calibrate=True),
    "equivalence": dict(_SYNTH, param="IPLLR", params=["IPLLR", "HP"], L=3, widths=[256], eta=1.0, steps=10, seeds=[0], tol=1e-8),
    "hpz-convergence": dict(_SYNTH, param="IPLLR", params=["IPLLR", "HPZ"], L=3, widths=_SWEEP, eta=1.0, steps=3),
    "collapse": dict(_SYNTH, param="IPNonCentered", L=4, layer=3, widths=_SWEEP_OCT, eta=1.0, steps=1, seeds=[0, 1, 2]),
    "ip-bias-independence": dict(_SYNTH, param="IPBias", L=3, widths=_SWEEP_OCT, steps=0),
    "oracle-compare": dict(_SYNTH, param="IPLLR", L=3, widths=[4096], eta=10.0, steps=1, seeds=list(range(20)), n_mc=10**6),
    "train": dict(param="IPLLR", calibrate=True),
    "gradcheck": dict(
        _SYNTH, param="MuP", L=3, widths=[32], seeds=[0], activations=["tanh", "relu2"], eps=1e-5, n_params=200, tol=1e-5
    ),
}


class ConfigError(ValueError):
    """Aggregated, field-addressed validation errors."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    subcommand: str = "train"
    probes: list = field(default_factory=list)
    param: str = "IPLLR"
    params: list = field(default_factory=list)
    activation: str = "relu"
    activations: list = field(default_factory=list)
    L: int = 6
    p: str = "1"
    u_shift: str = ""
    widths: list = field(default_factory=lambda: [1024])
    d: int = 784
    dataset: str = "mnist"
    images: str = "data/mnist5k-images-idx3-ubyte.gz"
    labels: str = "data/mnist5k-labels-idx1-ubyte.gz"
    n_samples: int = 5000
    data_seed: int = 0
    normalization: str = "pixels/255"
    eta: float = 0.01
    batch_size: int = 512
    steps: int = 600
    record_steps: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    loss: str = "cross-entropy"
    calibrate: bool = False
    first_layer_rescale: bool = True
    layer: int = 0
    n_mc: int = 10**6
    eps: float = 1e-5
    n_params: int = 200
    tol: float = 1e-8
    out: str = "results"
    threads: int = 1


# INI layout: section -> keys
SECTIONS = {
    "experiment": ("subcommand", "probes", "seeds", "steps", "record_steps", "tol", "threads", "out"),
    "parameterization": ("name", "L", "p", "activation", "u_shift", "params", "activations", "first_layer_rescale"),
    "sweep": ("widths", "layer", "n_mc", "eps", "n_params"),
    "data": ("dataset", "d", "images", "labels", "n_samples", "data_seed", "normalization"),
    "training": ("eta", "batch_size", "loss", "calibrate"),
}
_KEY_TO_FIELD = {"name": "param"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_LIST_INT = {"widths", "seeds", "record_steps"}
_LIST_STR = {"probes", "params", "activations"}
_BOOL = {"calibrate", "first_layer_rescale"}
_INT = {"L", "d", "n_samples", "data_seed", "batch_size", "steps", "layer", "n_mc", "n_params", "threads"}
_FLOAT = {"eta", "eps", "tol"}
_FIELDS = {f.name for f in fields(ExperimentConfig)}


def _flatten(raw) -> dict:
    """Accept either ``{section: {key: val}}`` or a flat mapping."""
    flat = {}
    for k, v in raw.items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                flat[f"{k}.{kk}"] = vv
        else:
            flat[k] = v
    return flat


def _coerce(name, value):
    if name in _LIST_INT:
        if isinstance(value, str):
            return [int(v) for v in value.replace(" ", "").split(",") if v]
        return [int(v) for v in value]
    if name in _LIST_STR:
        if isinstance(value, str):
            return [v.strip() for v in value.split(",") if v.strip()]
        return [str(v) for v in value]
    if name in _BOOL:
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if name in _INT:
        f = float(value)
        if not f.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        return int(f)
    if name in _FLOAT:
        return float(value)
    return str(value)


def validate(raw=None, subcommand: str | None = None) -> ExperimentConfig:
    """Normalize a raw configuration.

    Missing fields take the training defaults, overlaid by the preset of the
    subcommand; explicit values win. Widths are sorted ascending.

    Raises:
        ConfigError: with every problem, each prefixed by ``section.key``.
    """
    flat = _flatten(raw or {})
    errors = []
    where = {}
    values = {}
    for key, val in flat.items():
        sect, _, k = key.rpartition(".")
        fname = _KEY_TO_FIELD.get(k, k)
        label = key if sect else k
        if fname not in _FIELDS:
            errors.append(f"{label}: unknown field")
            continue
        try:
            values[fname] = _coerce(fname, val)
        except (TypeError, ValueError) as exc:
            errors.append(f"{label}: {exc}")
        where[fname] = label

    sub = subcommand or values.get("subcommand") or "train"
    cfg = ExperimentConfig(subcommand=sub)
    if sub not in PROBES:
        errors.append(f"{where.get('subcommand', 'experiment.subcommand')}: unknown subcommand {sub!r}")
    merged = dict(TABLE2)
    merged.update(PRESETS.get(sub, {}))
    merged.update(values)
    merged["subcommand"] = sub
    for k, v in merged.items():
        setattr(cfg, k, list(v) if isinstance(v, list) else v)

    def err(fname, msg):
        label = where.get(fname)
        if label is None:
            sect = next((s for s, ks in SECTIONS.items() if _FIELD_TO_KEY.get(fname, fname) in ks), "experiment")
            label = f"{sect}.{_FIELD_TO_KEY.get(fname, fname)}"
        errors.append(f"{label}: {msg}")

    if not cfg.probes:
        cfg.probes = [sub]
    for pr in cfg.probes:
        if pr not in PROBES:
            err("probes", f"unknown probe {pr!r}")
    try:
        cfg.param = canonical_name(cfg.param)
    except ValueError as exc:
        err("param", str(exc))
    norm = []
    for name in cfg.params:
        try:
            norm.append(canonical_name(name))
        except ValueError as exc:
            err("params", str(exc))
    cfg.params = norm
    for fname, names in (("activation", [cfg.activation]), ("activations", cfg.activations)):
        for a in names:
            try:
                get_activation(a)
            except ValueError:
                err(fname, f"unknown activation {a!r}")
    if cfg.L < 2:
        err("L", f"L must be >= 2, got {cfg.L}")
    if not cfg.widths:
        err("widths", "empty width list")
    elif any(w < 1 for w in cfg.widths):
        err("widths", "widths must be >= 1")
    cfg.widths = sorted(cfg.widths)
    if not cfg.seeds:
        err("seeds", "empty seed list")
    if cfg.eta <= 0:
        err("eta", "learning rate must be > 0")
    if cfg.batch_size < 1:
        err("batch_size", "batch size must be >= 1")
    if cfg.steps < 0:
        err("steps", "steps must be >= 0")
    if cfg.d < 1:
        err("d", "input dimension must be >= 1")
    if cfg.dataset not in ("mnist", "synthetic"):
        err("dataset", f"unknown dataset {cfg.dataset!r}")
    if cfg.loss not in ("squared", "cross-entropy"):
        err("loss", f"unknown loss {cfg.loss!r}")
    if cfg.n_mc < 2:
        err("n_mc", "need at least 2 Monte-Carlo samples")
    if cfg.threads < 1:
        err("threads", "threads must be >= 1")
    if errors:
        raise ConfigError(errors)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Sectioned INI text that :func:`parse_config_text` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    data = asdict(cfg)
    for sect, keys in SECTIONS.items():
        cp.add_section(sect)
        for key in keys:
            v = data[_KEY_TO_FIELD.get(key, key)]
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            cp.set(sect, key, str(v))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_config_text(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    return {s: dict(cp.items(s)) for s in cp.sections()}


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
