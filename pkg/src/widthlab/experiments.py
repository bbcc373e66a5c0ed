"""Probe routines: width x seed sweeps that produce :class:`ProbeReport` lists.

Each routine takes a validated :class:`~widthlab.config.ExperimentConfig` and
is deterministic given it. Theory probes use single-sample SGD on a synthetic
task: step ``t`` trains on sample ``t`` and the last sample is held out as the
evaluation input.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, batches, load_mnist_idx, synthetic_task
from .net import backward, calibrate_ipllr_lr, forward, init_network, sgd_step
from .oracle import ipllr_t1_limit, naive_ip_limit
from .params import make_spec
from .probes import (
    ProbeReport,
    collapse_statistic,
    finite_width_equivalence,
    gradient_check,
    input_independence_statistic,
    numerical_rank,
)

__all__ = ["ProbeOutcome", "RUNNERS", "run_probe", "load_dataset", "build_spec"]


@dataclass
class ProbeOutcome:
    probe: str
    reports: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.verdict is not False for r in self.reports)

    def report(self, metric: str, **match) -> ProbeReport:
        for r in self.reports:
            if r.metric == metric and all(getattr(r, k) == v for k, v in match.items()):
                return r
        raise KeyError(metric)


def build_spec(cfg: ExperimentConfig, name: str | None = None, activation: str | None = None):
    u = [float(v) for v in cfg.u_shift.split(",")] if cfg.u_shift else None
    name = name or cfg.param
    if u is not None and name != "IPNonCentered":
        u = None
    return make_spec(name, cfg.L, p=Fraction(cfg.p), activation=activation or cfg.activation, u_shift=u)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "mnist":
        return load_mnist_idx(cfg.images, cfg.labels, limit=cfg.n_samples)
    kind = "two-class" if cfg.loss == "cross-entropy" else "gauss-regression"
    return synthetic_task(cfg.d, cfg.n_samples, cfg.data_seed, kind)


def _n_out(ds: Dataset, cfg: ExperimentConfig) -> int:
    return ds.n_classes if cfg.loss == "cross-entropy" else 1


def _stream(ds: Dataset, cfg: ExperimentConfig, T: int):
    """Training batches for steps ``0..T-1``."""
    if cfg.batch_size == 1:
        n = ds.n - 1  # last sample held out
        if T > n:
            raise ValueError(f"{T} single-sample steps need more than {n} training samples")
        return [(ds.inputs[t], ds.labels[t]) for t in range(T)]
    per_epoch = ds.n // cfg.batch_size
    epochs = max(1, -(-T // per_epoch))
    return list(itertools.islice(batches(ds, cfg.batch_size, cfg.data_seed, epochs), T))


def _abs_out(net, xi) -> float:
    return float(np.mean(np.abs(forward(net, xi).f)))


def _grid(cfg: ExperimentConfig, cell, widths=None, seeds=None) -> dict:
    keys = [(m, s) for m in (widths or cfg.widths) for s in (seeds or cfg.seeds)]
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            vals = list(pool.map(lambda k: cell(*k), keys))
    else:
        vals = [cell(*k) for k in keys]
    return dict(zip(keys, vals))


def _seed_mean(res: dict, widths, seeds, key=None):
    pick = (lambda v: v) if key is None else (lambda v: v[key])
    return [float(np.mean([pick(res[(m, s)]) for s in seeds])) for m in widths]


def _report(cfg, probe, metric, widths, values, spec_name=None, **kw) -> ProbeReport:
    return ProbeReport(
        probe=probe,
        parameterization=spec_name or cfg.param,
        activation=cfg.activation,
        L=cfg.L,
        metric=metric,
        widths=list(widths),
        values=list(values),
        **kw,
    )


# ----------------------------------------------------------------- probes


def triviality(cfg: ExperimentConfig) -> ProbeOutcome:
    """Output magnitude of a plain parameterization across widths and steps."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    rec = sorted(set(cfg.record_steps or [cfg.steps]))
    T = max([cfg.steps] + rec)
    data = _stream(ds, cfg, T)
    xt = ds.inputs[-1]

    def cell(m, seed):
        net = init_network(spec, m, ds.d, seed, K=_n_out(ds, cfg), first_layer_rescale=cfg.first_layer_rescale)
        out = {}
        for batch in data:
            sgd_step(net, batch, cfg.eta, loss=cfg.loss)
            if net.t in rec:
                out[net.t] = _abs_out(net, xt)
        return out

    res = _grid(cfg, cell)
    reports = []
    for t in rec:
        vals = _seed_mean(res, cfg.widths, cfg.seeds, t)
        r = _report(cfg, "triviality", "abs_f", cfg.widths, vals, spec.name, t=t, expectation="slope<=-0.3 and f(max m)<=0.1*f(min m)")
        r.extra["limit"] = naive_ip_limit(t)
        if len(cfg.widths) >= 3:
            r.fit_slope()
            r.verdict = r.fit.slope <= -0.3 and vals[-1] <= 0.1 * vals[0]
        reports.append(r)
    return ProbeOutcome("triviality", reports)


def llr_escape(cfg: ExperimentConfig) -> ProbeOutcome:
    """Width-stability of the first-step output of IP-LLR vs Naive-IP."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    data = _stream(ds, cfg, max(cfg.steps, 2))
    xt = ds.inputs[-1]
    K = _n_out(ds, cfg)

    def cell(m, seed):
        net = init_network(spec, m, ds.d, seed, K=K, first_layer_rescale=cfg.first_layer_rescale)
        etas = None
        if cfg.calibrate and spec.name == "IPLLR":
            etas = calibrate_ipllr_lr(net, spec, data[0], data[1], cfg.eta, loss=cfg.loss)
        sgd_step(net, data[0], cfg.eta, lr_overrides=etas, loss=cfg.loss)
        f1 = _abs_out(net, xt)
        for batch in data[1 : cfg.steps]:
            sgd_step(net, batch, cfg.eta, loss=cfg.loss)
        return {"f1": f1, "fT": _abs_out(net, xt), "etas": etas}

    res = _grid(cfg, cell)
    vals = _seed_mean(res, cfg.widths, cfg.seeds, "f1")
    naive = build_spec(cfg, "NaiveIP")
    m_top = cfg.widths[-1]

    def naive_cell(m, seed):
        net = init_network(naive, m, ds.d, seed, K=K, first_layer_rescale=cfg.first_layer_rescale)
        sgd_step(net, data[0], cfg.eta, loss=cfg.loss)
        return _abs_out(net, xt)

    base = float(np.mean(list(_grid(cfg, naive_cell, widths=[m_top]).values())))
    r = _report(cfg, "llr-escape", "abs_f1", cfg.widths, vals, spec.name, t=1, expectation="|slope|<=0.15 and >=10x Naive-IP at max m")
    r.extra["naive_abs_f1_max_m"] = base
    r.extra["ratio_to_naive"] = vals[-1] / base if base > 0 else float("inf")
    if cfg.steps > 1:
        r.extra[f"abs_f{cfg.steps}_max_m"] = _seed_mean(res, [m_top], cfg.seeds, "fT")[0]
    if len(cfg.widths) >= 3:
        r.fit_slope()
        r.verdict = abs(r.fit.slope) <= 0.15 and vals[-1] >= 10 * base
    return ProbeOutcome("llr-escape", [r])


def _expected_init_slope(name: str, layer: int):
    if name in ("NaiveIP", "IPLLR"):
        return -(layer - 1) / 2
    if name in ("MuP", "NTK", "HP", "HPZ"):
        return 0.0
    return None


def scaling(cfg: ExperimentConfig) -> ProbeOutcome:
    """Coordinate RMS of the pre-activations at initialization across widths."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    xt = ds.inputs[-1]

    def cell(m, seed):
        net = init_network(spec, m, ds.d, seed, K=_n_out(ds, cfg), first_layer_rescale=cfg.first_layer_rescale)
        return [float(np.sqrt(np.mean(h**2))) for h in forward(net, xt).h]

    res = _grid(cfg, cell)
    reports = []
    for layer in range(1, cfg.L + 1):
        vals = _seed_mean(res, cfg.widths, cfg.seeds, layer - 1)
        r = _report(cfg, "scaling", "rms_h0", cfg.widths, vals, spec.name, layer=layer, t=0)
        if len(cfg.widths) >= 3:
            r.fit_slope()
            exp = _expected_init_slope(spec.name, layer)
            if exp is not None:
                r.expectation = f"slope={exp}+-0.1"
                r.verdict = abs(r.fit.slope - exp) <= 0.1
        reports.append(r)
    return ProbeOutcome("scaling", reports)


def rank(cfg: ExperimentConfig) -> ProbeOutcome:
    """Numerical rank of per-layer (pre-)activation families after one step."""
    ds = load_dataset(cfg)
    m = cfg.widths[0]
    seed = cfg.seeds[0]
    names = cfg.params or [cfg.param]
    it = batches(ds, cfg.batch_size, cfg.data_seed, epochs=1)
    b0, b1 = next(it), next(it)
    K = _n_out(ds, cfg)
    reports, top = [], {}
    layer_v = cfg.layer or cfg.L
    for name in names:
        spec = build_spec(cfg, name)
        net = init_network(spec, m, ds.d, seed, K=K, first_layer_rescale=cfg.first_layer_rescale)
        etas = None
        if cfg.calibrate and name == "IPLLR":
            etas = calibrate_ipllr_lr(net, spec, b0, b1, cfg.eta, loss=cfg.loss)
        sgd_step(net, b0, cfg.eta, lr_overrides=etas, loss=cfg.loss)
        fwd = forward(net, ds.inputs)
        for layer in range(1, cfg.L + 1):
            for metric, arr in (("rank_h", fwd.h), ("rank_x", fwd.x)):
                rk = numerical_rank(arr[layer - 1], m)
                reports.append(_report(cfg, "rank", metric, [m], [rk], name, layer=layer, t=1))
                if metric == "rank_h" and layer == layer_v:
                    top[name] = rk
    if len(names) >= 2:
        a, b = names[0], names[1]
        ratio = top[a] / max(top[b], 1)
        r = _report(cfg, "rank", "rank_ratio", [m], [ratio], f"{a}/{b}", layer=layer_v, t=1, expectation="<=0.1")
        r.verdict = ratio <= 0.1
        reports.append(r)
    return ProbeOutcome("rank", reports)


def equivalence(cfg: ExperimentConfig) -> ProbeOutcome:
    """Exact output agreement of two parameterizations trained from one init."""
    ds = load_dataset(cfg)
    a, b = cfg.params[:2] if len(cfg.params) >= 2 else ("IPLLR", "HP")
    sa, sb = build_spec(cfg, a), build_spec(cfg, b)
    m, seed = cfg.widths[0], cfg.seeds[0]
    samples = _stream(ds, cfg, cfg.steps)
    test = ds.inputs[-3:]
    if cfg.batch_size != 1:
        raise ValueError("the equivalence probe uses single-sample SGD (batch_size=1)")
    res = finite_width_equivalence(sa, sb, m, ds.d, seed, samples, test, cfg.eta, cfg.steps, cfg.loss, cfg.first_layer_rescale)
    reports = []
    for t, v in enumerate(res.per_step, start=1):
        reports.append(_report(cfg, "equivalence", "max_abs_diff", [m], [v], f"{a}~{b}", t=t))
    r = _report(cfg, "equivalence", "max_rel_diff", [m], [res.max_rel_diff], f"{a}~{b}", expectation=f"<={cfg.tol}")
    r.extra["eta_step0_b"] = res.eta_b0
    r.verdict = res.max_rel_diff <= cfg.tol
    reports.append(r)
    return ProbeOutcome("equivalence", reports)


def hpz_convergence(cfg: ExperimentConfig) -> ProbeOutcome:
    """Output gap between IP-LLR and HPZ after ``steps`` steps across widths."""
    ds = load_dataset(cfg)
    a, b = cfg.params[:2] if len(cfg.params) >= 2 else ("IPLLR", "HPZ")
    sa, sb = build_spec(cfg, a), build_spec(cfg, b)
    samples = _stream(ds, cfg, cfg.steps)
    xt = ds.inputs[-1]

    def cell(m, seed):
        r = finite_width_equivalence(sa, sb, m, ds.d, seed, samples, xt, cfg.eta, cfg.steps, cfg.loss, cfg.first_layer_rescale)
        return r.per_step[-1]

    res = _grid(cfg, cell)
    vals = _seed_mean(res, cfg.widths, cfg.seeds)
    r = _report(cfg, "hpz-convergence", "abs_f_diff", cfg.widths, vals, f"{a}~{b}", t=cfg.steps, expectation="slope<0 and gap(max m)<=0.2*gap(min m)")
    if len(cfg.widths) >= 3:
        r.fit_slope()
        r.verdict = r.fit.slope < 0 and vals[-1] <= 0.2 * vals[0]
    return ProbeOutcome("hpz-convergence", [r])


def collapse(cfg: ExperimentConfig) -> ProbeOutcome:
    """Dispersion of the first weight update of an intermediate layer."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    layer = cfg.layer or 3
    if not 2 <= layer <= cfg.L:
        raise ValueError(f"collapse layer must be intermediate, got {layer}")
    data = _stream(ds, cfg, max(cfg.steps, 1))

    def cell(m, seed):
        net = init_network(spec, m, ds.d, seed, K=_n_out(ds, cfg), first_layer_rescale=cfg.first_layer_rescale)
        w0 = net.weights[layer - 1].copy()
        for batch in data:
            sgd_step(net, batch, cfg.eta, loss=cfg.loss)
        return collapse_statistic(net.weights[layer - 1] - w0)

    res = _grid(cfg, cell)
    vals = _seed_mean(res, cfg.widths, cfg.seeds)
    r = _report(cfg, "collapse", "dispersion_ratio", cfg.widths, vals, spec.name, layer=layer, t=cfg.steps, expectation="slope<=-0.3")
    if len(cfg.widths) >= 3:
        r.fit_slope()
        r.verdict = r.fit.slope <= -0.3
    return ProbeOutcome("collapse", [r])


def ip_bias_independence(cfg: ExperimentConfig) -> ProbeOutcome:
    """Dependence of the pre-activations on the input at initialization."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    xa, xb = ds.inputs[0], ds.inputs[1]

    def cell(m, seed):
        net = init_network(spec, m, ds.d, seed, K=_n_out(ds, cfg), first_layer_rescale=cfg.first_layer_rescale)
        st = input_independence_statistic(net, xa, xb)
        return st.h_rms + [st.f_diff]

    res = _grid(cfg, cell)
    reports = []
    for layer in range(1, cfg.L + 1):
        vals = _seed_mean(res, cfg.widths, cfg.seeds, layer - 1)
        r = _report(cfg, "ip-bias-independence", "rms_h_diff", cfg.widths, vals, spec.name, layer=layer, t=0)
        if len(cfg.widths) >= 3:
            r.fit_slope()
            if layer == 1:
                r.expectation, r.verdict = "|slope|<=0.15", abs(r.fit.slope) <= 0.15
            elif layer == 2:
                r.expectation, r.verdict = "slope=-0.5+-0.15", abs(r.fit.slope + 0.5) <= 0.15
        reports.append(r)
    vals = _seed_mean(res, cfg.widths, cfg.seeds, cfg.L)
    reports.append(_report(cfg, "ip-bias-independence", "abs_f_diff", cfg.widths, vals, spec.name, layer=cfg.L + 1, t=0))
    return ProbeOutcome("ip-bias-independence", reports)


def oracle_compare(cfg: ExperimentConfig) -> ProbeOutcome:
    """Finite-width first-step output of IP-LLR against its infinite-width limit."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    if cfg.loss != "squared":
        raise ValueError("oracle-compare needs the squared loss (scalar output)")
    xi0, y0 = ds.inputs[0], float(ds.labels[0])
    xt = ds.inputs[-1]
    m = cfg.widths[-1]

    def cell(m_, seed):
        net = init_network(spec, m_, ds.d, seed, first_layer_rescale=cfg.first_layer_rescale)
        sgd_step(net, (xi0, y0), cfg.eta, loss=cfg.loss)
        return float(forward(net, xt).output[0])

    res = _grid(cfg, cell, widths=[m])
    f = np.array([res[(m, s)] for s in cfg.seeds])
    mean = float(f.mean())
    se = float(f.std(ddof=1) / math.sqrt(f.size)) if f.size > 1 else float("inf")
    delta = list(spec.delta)
    if cfg.first_layer_rescale:
        delta[0] /= math.sqrt(ds.d + 1)
    orc = ipllr_t1_limit(xi0, y0, xt, cfg.eta, cfg.loss, cfg.L, delta, spec.activation, cfg.n_mc, cfg.data_seed)
    comb = math.sqrt(se**2 + orc.f1_se**2)
    gap = abs(mean - orc.f1)
    ok_val = gap <= max(3 * comb, 0.1 * abs(orc.f1))
    ok_sign = np.sign(orc.f1) == -np.sign(orc.chi0)
    reports = [
        _report(cfg, "oracle-compare", "f1_finite_mean", [m], [mean], spec.name, t=1),
        _report(cfg, "oracle-compare", "f1_finite_se", [m], [se], spec.name, t=1),
    ]
    for layer, (lam, lse) in enumerate(zip(orc.lambdas, orc.lambda_se), start=1):
        r = _report(cfg, "oracle-compare", "lambda_limit", [m], [lam], spec.name, layer=layer, t=1)
        r.extra["lambda_limit_se"] = lse
        reports.append(r)
    r = _report(cfg, "oracle-compare", "f1_limit", [m], [orc.f1], spec.name, t=1, expectation="|finite-limit|<=max(3SE,10%) and sign(f1)=-sign(chi0)")
    r.extra.update(f1_limit_se=orc.f1_se, chi0_limit=orc.chi0, combined_se=comb, abs_gap=gap, sign_ok=int(ok_sign))
    r.verdict = bool(ok_val and ok_sign)
    reports.append(r)
    return ProbeOutcome("oracle-compare", reports)


def train(cfg: ExperimentConfig) -> ProbeOutcome:
    """Plain training run; records batch loss and mean |output| over steps."""
    ds = load_dataset(cfg)
    spec = build_spec(cfg)
    K = _n_out(ds, cfg)
    data = _stream(ds, cfg, max(cfg.steps, 2))
    every = max(1, cfg.steps // 20)
    marks = sorted(set(range(0, cfg.steps, every)) | {cfg.steps - 1}) if cfg.steps else []

    def cell(m, seed):
        net = init_network(spec, m, ds.d, seed, K=K, first_layer_rescale=cfg.first_layer_rescale)
        etas = None
        if cfg.calibrate and spec.name == "IPLLR":
            etas = calibrate_ipllr_lr(net, spec, data[0], data[1], cfg.eta, loss=cfg.loss)
        hist = {}
        for t in range(cfg.steps):
            X, Y = data[t] if cfg.batch_size > 1 else (np.atleast_2d(data[t][0]), np.atleast_1d(data[t][1]))
            if t in marks:
                fwd = forward(net, X)
                hist[t] = (float(backward(net, fwd, Y, cfg.loss).loss.mean()), float(np.mean(np.abs(fwd.f))))
            sgd_step(net, (X, Y), cfg.eta, lr_overrides=etas if t == 0 else None, loss=cfg.loss)
        return hist

    res = _grid(cfg, cell)
    reports = []
    for t in marks:
        for k, metric in enumerate(("loss", "mean_abs_output")):
            vals = [float(np.mean([res[(m, s)][t][k] for s in cfg.seeds])) for m in cfg.widths]
            reports.append(_report(cfg, "train", metric, cfg.widths, vals, spec.name, t=t))
    return ProbeOutcome("train", reports)


def gradcheck(cfg: ExperimentConfig) -> ProbeOutcome:
    """Backprop against central finite differences for several activations."""
    ds = load_dataset(cfg)
    m = cfg.widths[0]
    acts = cfg.activations or [cfg.activation]
    X, Y = ds.inputs[:4], ds.labels[:4]
    reports = []
    for act in acts:
        spec = build_spec(cfg, activation=act)
        net = init_network(spec, m, ds.d, cfg.seeds[0], K=_n_out(ds, cfg), first_layer_rescale=cfg.first_layer_rescale)
        res = gradient_check(net, (X, Y), cfg.eps, cfg.n_params, cfg.seeds[0], cfg.loss)
        r = ProbeReport("gradcheck", spec.name, act, cfg.L, "max_rel_error", [m], [res.max_rel_error], expectation=f"<={cfg.tol}")
        r.extra["n_checked"] = res.n_checked
        r.verdict = res.max_rel_error <= cfg.tol
        reports.append(r)
    return ProbeOutcome("gradcheck", reports)


RUNNERS = {
    "triviality": triviality,
    "llr-escape": llr_escape,
    "scaling": scaling,
    "rank": rank,
    "equivalence": equivalence,
    "hpz-convergence": hpz_convergence,
    "collapse": collapse,
    "ip-bias-independence": ip_bias_independence,
    "oracle-compare": oracle_compare,
    "train": train,
    "gradcheck": gradcheck,
}


def run_probe(cfg: ExperimentConfig, probe: str | None = None) -> ProbeOutcome:
    probe = probe or cfg.subcommand
    return RUNNERS[probe](replace(cfg, subcommand=probe))
