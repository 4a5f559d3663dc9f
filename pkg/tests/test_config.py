import copy

import pytest
import yaml

from deepfbsde import config as cfgmod
from deepfbsde.errors import ConfigError


def test_defaults_are_valid():
    cfgmod.validate(cfgmod.resolve())


@pytest.mark.parametrize("name", sorted(cfgmod.PRESETS))
def test_presets_resolve(name):
    cfg = cfgmod.resolve(preset=name)
    assert cfg["preset"] == name


def test_paper_preset_values():
    cfg = cfgmod.resolve(preset="fwd-fixed-eu")
    m, t, n = cfg["model"], cfg["training"], cfg["networks"]
    assert (m["rate"], m["vol"], m["maturity"], m["steps"], m["initial"]["x0"]) == (0.06, 0.2, 0.5, 50, 120.0)
    assert (t["batch"], t["iterations"], cfg["optimizer"]["lr"]) == (512, 20000, 1e-3)
    assert n["hidden"] == [11, 11] and n["activation"] == "elu"


def test_random_preset_box():
    ini = cfgmod.resolve(preset="bwd-random-eu")["model"]["initial"]
    assert (ini["mode"], ini["lo"], ini["hi"]) == ("uniform", 70.0, 170.0)


def test_payoff_replaced_not_merged():
    inst = cfgmod.resolve(preset="barrier-bridge")["instrument"]
    assert inst["payoff"] == {"kind": "call", "strike": 120.0}
    assert inst["barrier"]["rebate"] == 0.0 and inst["barrier"]["treatment"] == "bridge"


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        cfgmod.resolve(preset="nope")


def test_every_problem_is_listed():
    with pytest.raises(ConfigError) as err:
        cfgmod.resolve(overrides=["model.vol=-1", "training.batch=1", "training.bogus=3",
                                  "optimizer.kind=rmsprop", "networks.hidden=[0]"])
    probs = err.value.problems
    for key in ("model.vol", "training.batch", "training.bogus", "optimizer.kind", "networks.hidden"):
        assert any(p.startswith(key) for p in probs), key
    assert len(probs) == 5


def test_unknown_top_level_section():
    bad = copy.deepcopy(cfgmod.DEFAULTS)
    bad["extras"] = {}
    with pytest.raises(ConfigError, match="extras: unknown key"):
        cfgmod.validate(bad)


def test_missing_key():
    bad = copy.deepcopy(cfgmod.DEFAULTS)
    del bad["optimizer"]["lr"]
    with pytest.raises(ConfigError, match="optimizer.lr: missing"):
        cfgmod.validate(bad)


def test_override_parsing():
    cfg = cfgmod.resolve(overrides=["training.batch=256", "networks.hidden=[5, 5, 5]",
                                    "instrument.barrier={level: 140}"])
    assert cfg["training"]["batch"] == 256
    assert cfg["networks"]["hidden"] == [5, 5, 5]
    assert cfg["instrument"]["barrier"]["level"] == 140 and cfg["instrument"]["barrier"]["treatment"] == "monitored"


@pytest.mark.parametrize("text", ["training.batch", ".batch=3", "model.vol.x=1"])
def test_bad_overrides(text):
    with pytest.raises(ConfigError):
        cfgmod.resolve(overrides=[text])


def test_flags_win_over_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"preset": "bwd-fixed-eu", "training": {"seed": 3, "iterations": 5}}))
    cfg = cfgmod.resolve(config_path=str(path), seed=9, deterministic=True)
    assert cfg["preset"] == "bwd-fixed-eu" and cfg["method"]["direction"] == "backward"
    assert cfg["training"]["seed"] == 9 and cfg["training"]["iterations"] == 5
    assert cfg["training"]["deterministic"] is True


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        cfgmod.resolve(config_path=str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        cfgmod.resolve(config_path=str(bad))
    broken = tmp_path / "broken.yaml"
    broken.write_text("a: [1,\n")
    with pytest.raises(ConfigError, match="YAML"):
        cfgmod.resolve(config_path=str(broken))


def test_dump_round_trip():
    cfg = cfgmod.resolve(preset="exercise-put")
    assert cfgmod.validate(yaml.safe_load(cfgmod.dump(cfg))) == cfg


def test_exercise_time_off_grid():
    with pytest.raises(ConfigError, match="not on the time grid"):
        cfgmod.resolve(preset="exercise-zero", overrides=["instrument.exercise.times=[0.255]"])


def test_exercise_time_range():
    with pytest.raises(ConfigError, match="strictly between"):
        cfgmod.resolve(preset="exercise-zero", overrides=["instrument.exercise.times=[0.5]"])


def test_clairvoyant_needs_flag_and_backward():
    with pytest.raises(ConfigError) as err:
        cfgmod.resolve(preset="exercise-zero", overrides=["instrument.exercise.strategy=clairvoyant",
                                                          "method.direction=forward"])
    text = str(err.value)
    assert "allow_clairvoyant" in text and "backward method" in text


def test_bridge_and_exercise_conflict():
    with pytest.raises(ConfigError, match="cannot be combined"):
        cfgmod.resolve(preset="barrier-bridge", overrides=["instrument.exercise={times: [0.25]}"])


def test_bridge_rebate_needs_maturity_payment():
    with pytest.raises(ConfigError, match="rebate_at"):
        cfgmod.resolve(preset="barrier-bridge", overrides=["instrument.barrier.rebate=1.0"])
    cfgmod.resolve(preset="barrier-bridge", overrides=["instrument.barrier.rebate=1.0",
                                                       "instrument.barrier.rebate_at=maturity"])


def test_generator_checks():
    with pytest.raises(ConfigError, match="rate_lend and rate_borrow"):
        cfgmod.resolve(overrides=["generator.kind=differential_rates"])
    with pytest.raises(ConfigError, match="q"):
        cfgmod.resolve(overrides=["generator.costs=[{form: value, lam: 0.01, q: 3}]"])


def test_combo_leg_checks():
    with pytest.raises(ConfigError, match=r"legs\[1\]"):
        cfgmod.resolve(overrides=["instrument.payoff={kind: combo, legs: [{kind: call, strike: 1, weight: 1}, {kind: swap}]}"])
