import json
import shutil

import pytest

from dpreid.experiment import (
    ConfigError,
    RunConfig,
    format_epsilon,
    load_dataset,
    parse_epsilon,
)


@pytest.mark.parametrize("text, value", [("none", None), ("None", None), (None, None), ("1e-3", 1e-3),
                                         ("1", 1.0), (1000, 1000.0)])
def test_parse_epsilon(text, value):
    assert parse_epsilon(text) == value


@pytest.mark.parametrize("text", ["0", "-1", "inf", "abc", "nan"])
def test_parse_epsilon_rejects(text):
    with pytest.raises(ConfigError):
        parse_epsilon(text)


def test_format_epsilon():
    assert [format_epsilon(e) for e in (None, 1e-3, 1.0, 1e3, 1e6)] == ["none", "0.001", "1", "1000", "1e+06"]


def test_defaults_follow_the_published_grid():
    cfg = RunConfig()
    assert cfg.sweep_grid(64, 128) == [(1, 64), (2, 32), (4, 16)]
    assert cfg.sweep_epsilons() == [1e-3, 1.0, 1e3, 1e6, None]
    assert RunConfig(ablation=True).sweep_epsilons() == [None]


def test_round_trip_and_validation(tmp_path):
    cfg = RunConfig(seed=4, grid=[[2, 32]], epsilons=["1", "none"])
    cfg.dump(tmp_path / "c.json")
    assert RunConfig.from_dict(json.loads((tmp_path / "c.json").read_text())) == cfg
    for bad in ({"seed": -1}, {"jobs": 0}, {"epsilons": []}, {"grid": [[2]]}, {"grid": [[2, 3]]},
                {"tasks": ["height"]}, {"K": 1}, {"nope": 1}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)


def test_attribute_split_falls_back_to_seeded_halves(small_dataset, tmp_path):
    root = tmp_path / "d"
    shutil.copytree(small_dataset, root)
    (root / "attributes_train.csv").unlink()
    (root / "attributes_test.csv").unlink()
    _, tr, te = load_dataset(root, RunConfig(seed=1))
    _, tr2, _ = load_dataset(root, RunConfig(seed=1))
    assert len(tr.attributes) + len(te.attributes) == 12 * 9
    assert {a.image_path for a in tr.attributes}.isdisjoint({a.image_path for a in te.attributes})
    assert tr.attributes == tr2.attributes


def test_missing_dataset(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "nowhere", RunConfig())
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "empty", RunConfig())
