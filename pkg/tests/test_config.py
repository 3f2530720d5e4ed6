import json

import pytest

from egopack.config import DEFAULTS, config_hash, load_config, parse_override
from egopack.pipeline import interaction_config, task_list
from egopack.validation import ConfigError


def test_defaults_when_nothing_given():
    cfg = load_config(env={})
    assert cfg == DEFAULTS
    assert cfg is not DEFAULTS


def test_file_overrides_and_env(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "train": {"lr": 0.01}}))
    cfg = load_config(path, ["train.epochs.AR=2", "interaction.tasks=[\"AR\"]"], env={})
    assert cfg["seed"] == 3 and cfg["train"]["lr"] == 0.01
    assert cfg["train"]["epochs"]["AR"] == 2 and cfg["train"]["epochs"]["LTA"] == 40
    assert cfg["interaction"]["tasks"] == ["AR"]
    assert load_config(path, env={"EGOPACK_SEED": "9"})["seed"] == 9


@pytest.mark.parametrize("doc, field", [
    ({"trian": {}}, "trian"),
    ({"train": {"lr": 1, "momentum": 0.9}}, "train.momentum"),
    ({"tasks": {"graph": {"XYZ": {}}}}, "tasks.graph.XYZ"),
    ({"data": {"synthetic": {"noise": 1}}}, "data.synthetic.noise"),
])
def test_unknown_keys_report_field_path(tmp_path, doc, field):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(path, env={})


def test_override_errors():
    with pytest.raises(ConfigError):
        parse_override("noequals")
    assert parse_override("a.b=hello") == (["a", "b"], "hello")
    assert parse_override("a=[1, 2]") == (["a"], [1, 2])
    with pytest.raises(ConfigError, match="model.width"):
        load_config(overrides=["model.width=3"], env={})
    with pytest.raises(ConfigError):
        load_config(env={"EGOPACK_SEED": "x"})


@pytest.mark.parametrize("override, field", [
    ("model.L=x", "model.L"),
    ("model.L=2.5", "model.L"),
    ("train.lr=true", "train.lr"),
    ("train.epochs.AR=\"many\"", "train.epochs.AR"),
    ("tasks.graph.AR=3", "tasks.graph.AR"),
])
def test_wrong_types_report_field_path(override, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(overrides=[override], env={})


def test_numeric_leaves_accept_ints_for_floats():
    cfg = load_config(overrides=["train.lr=1", "tasks.mtl=ar,lta", "model.head_dim=8"], env={})
    assert cfg["train"]["lr"] == 1 and cfg["model"]["head_dim"] == 8


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path, env={})


def test_hash_is_stable_and_sensitive():
    a = load_config(env={})
    assert config_hash(a) == config_hash(load_config(env={}))
    assert config_hash(a) != config_hash(load_config(overrides=["seed=1"], env={}))


def test_task_lists():
    assert task_list("pnr,ar") == ("AR", "PNR")
    assert task_list(["oscc"]) == ("OSCC",)
    with pytest.raises(ConfigError):
        task_list("ar,xx")
    cfg = load_config(env={})
    assert interaction_config(cfg, "OSCC").tasks == ("AR", "LTA", "PNR")
