import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from widthlab.cli import build_parser, config_from_args, main, run_id
from widthlab.config import PROBES, ConfigError, dump_config, parse_config_text, validate


def test_defaults_echo_training_table():
    cfg = validate({}, "train")
    assert (cfg.L, cfg.widths, cfg.eta, cfg.batch_size, cfg.loss) == (6, [1024], 0.01, 512, "cross-entropy")
    assert cfg.seeds == [0, 1, 2, 3, 4] and cfg.dataset == "mnist" and cfg.d == 784


def test_missing_eta_filled():
    cfg = validate({"training": {"batch_size": "64"}}, "train")
    assert cfg.eta == 0.01 and cfg.batch_size == 64


def test_widths_sorted():
    assert validate({"sweep": {"widths": "1024,64"}}, "scaling").widths == [64, 1024]


def test_unknown_activation_names_field():
    with pytest.raises(ConfigError) as exc:
        validate({"parameterization": {"activation": "swish"}}, "train")
    assert exc.value.errors == ["parameterization.activation: unknown activation 'swish'"]


def test_errors_are_aggregated():
    raw = {
        "parameterization": {"L": "1", "name": "SGDP"},
        "sweep": {"widths": ""},
        "experiment": {"probes": "train,bogus", "seeds": ""},
        "training": {"eta": "-1", "loss": "hinge"},
        "data": {"colour": "red"},
    }
    with pytest.raises(ConfigError) as exc:
        validate(raw, "train")
    text = "\n".join(exc.value.errors)
    for needle in (
        "parameterization.L",
        "parameterization.name",
        "sweep.widths",
        "experiment.probes",
        "experiment.seeds",
        "training.eta",
        "training.loss",
        "data.colour: unknown field",
    ):
        assert needle in text
    with pytest.raises(ConfigError):
        validate({}, "no-such-probe")


def test_bad_scalar_types():
    with pytest.raises(ConfigError) as exc:
        validate({"sweep": {"n_mc": "1.5"}, "training": {"calibrate": "maybe"}}, "train")
    assert len(exc.value.errors) == 2


@pytest.mark.parametrize("probe", PROBES)
def test_presets_validate_and_round_trip(probe):
    cfg = validate({}, probe)
    assert validate(parse_config_text(dump_config(cfg)), probe) == cfg


@settings(max_examples=40)
@given(
    widths=st.lists(st.integers(1, 5000), min_size=1, max_size=6),
    seeds=st.lists(st.integers(0, 99), min_size=1, max_size=4),
    eta=st.floats(1e-6, 1e3),
    L=st.integers(2, 9),
    act=st.sampled_from(["relu", "tanh", "gelu", "relu2"]),
    calibrate=st.booleans(),
)
def test_config_round_trip_property(widths, seeds, eta, L, act, calibrate):
    raw = {
        "sweep": {"widths": ",".join(map(str, widths))},
        "experiment": {"seeds": ",".join(map(str, seeds))},
        "training": {"eta": repr(eta), "calibrate": str(calibrate)},
        "parameterization": {"L": str(L), "activation": act},
    }
    cfg = validate(raw, "train")
    assert cfg.widths == sorted(widths)
    assert validate(parse_config_text(dump_config(cfg))) == cfg


def _args(*argv):
    return config_from_args(build_parser().parse_args(list(argv)))


def test_flag_precedence_and_positions(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[parameterization]\nL = 5\nactivation = tanh\n[sweep]\nwidths = 32,16\n")
    cfg = _args("--config", str(ini), "scaling", "--L", "4")
    assert (cfg.L, cfg.activation, cfg.widths) == (4, "tanh", [16, 32])
    a = _args("--out", "x", "--seed", "7", "scaling")
    b = _args("scaling", "--out", "x", "--seed", "7")
    assert a == b
    assert a.seeds == [7, 8, 9]  # shifted preset list
    assert _args("triviality", "--param", "naive-ip", "--widths", "64,256").param == "NaiveIP"


def test_run_id_ignores_output_location():
    a = _args("collapse", "--out", "one")
    b = _args("collapse", "--out", "two", "--threads", "3")
    assert run_id(a, "collapse") == run_id(b, "collapse")
    assert run_id(a, "collapse") != run_id(_args("collapse", "--eta", "2"), "collapse")


def test_cli_pass_writes_csv_and_manifest(tmp_path, capsys):
    out = tmp_path / "eq"
    assert main(["equivalence", "--out", str(out)]) == 0
    assert "[PASS]" in capsys.readouterr().out
    lines = (out / "equivalence.csv").read_text().splitlines()
    assert lines[0] == "run_id,probe,parameterization,activation,m,L,layer,t,metric,value"
    assert any(",verdict,1" in ln for ln in lines)
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_code"] == 0
    assert man["probes"][0]["passed"] is True
    assert {"numpy", "scipy", "python", "widthlab"} <= set(man["versions"])
    # the echoed config reproduces the run configuration
    cfg = validate(parse_config_text(man["config_ini"]))
    assert cfg == _args("equivalence", "--out", str(out))


def test_cli_verdict_failure(tmp_path):
    assert main(["equivalence", "--tol", "0", "--out", str(tmp_path)]) == 1


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["gradcheck", "--activation", "swish", "--out", str(tmp_path)]) == 2
    assert "parameterization.activation" in capsys.readouterr().err
    assert main(["rank", "--images", str(tmp_path / "missing.gz"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["not-a-probe"])
    assert exc.value.code == 2


def test_cli_numeric_failure(tmp_path):
    argv = ["train", "--param", "ipllr", "--calibrate", "false", "--eta", "1e30", "--dataset", "synthetic", "--d", "8"]
    argv += ["--n-samples", "64", "--batch-size", "1", "--loss", "squared", "--widths", "64", "--seeds", "0"]
    argv += ["--steps", "10", "--L", "3", "--out", str(tmp_path)]
    assert main(argv) == 3
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert "layer" in man["probes"][0]["error"] and man["exit_code"] == 3
