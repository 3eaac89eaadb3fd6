import math

import pytest

from posgen.config import ConfigError, GenerationConfig, from_mapping, load_config, parse_eta


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_hash_ignores_formatting_and_key_order(tmp_path):
    a = write(tmp_path, "a.yaml", "eta: 0.5\ngamma: 0.2\nk: 3\narm: ona\n")
    b = write(tmp_path, "b.yaml", "# same settings\narm:   'ona'\n\nk: 3\ngamma:    0.20\neta: 5.0e-1   \n")
    c = write(tmp_path, "c.yaml", "{arm: ona, k: 3, gamma: 0.2, eta: 0.5}\n")
    hashes = {load_config(p).hash for p in (a, b, c)}
    assert len(hashes) == 1
    assert load_config(a).hash != load_config(a, {"k": 4}).hash


def test_hash_ignores_output_location_and_workers():
    base = GenerationConfig()
    assert base.replace(out="/tmp/x", workers=4).hash == base.hash
    assert base.replace(seed=1).hash != base.hash


def test_precedence_flag_over_file_over_default(tmp_path):
    path = write(tmp_path, "c.yaml", "steps: 20\nseed: 5\n")
    cfg = load_config(path, {"seed": 9, "gamma": None})
    assert (cfg.steps, cfg.seed, cfg.gamma, cfg.k) == (20, 9, 0.1, 5)


@pytest.mark.parametrize("text", ["inf", "INF", " infinity ", "∞", ".inf"])
def test_infinite_eta_spellings(text):
    assert math.isinf(parse_eta(text))


def test_infinite_eta_is_canonical():
    assert from_mapping({"eta": "inf"}).hash == GenerationConfig(eta=math.inf).hash
    assert GenerationConfig(eta="inf").to_dict()["eta"] == "inf"


@pytest.mark.parametrize(
    "values",
    [
        {"eta": -1},
        {"eta": "lots"},
        {"gamma": 1.5},
        {"arm": "best"},
        {"steps": 0},
        {"steps": 2000},
        {"k": -1},
        {"k": 2.5},
        {"unknown_key": 1},
        {"llm_mock": None},
        {"llm_fallback": "maybe"},
    ],
)
def test_invalid_configs(values):
    with pytest.raises(ConfigError):
        from_mapping(values)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "list.yaml", "- 1\n- 2\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "broken.yaml", "a: [1, 2\n"))


def test_string_values_are_coerced():
    cfg = from_mapping({"steps": "25", "gamma": "0.3", "llm_fallback": "no"})
    assert cfg.steps == 25 and cfg.gamma == 0.3 and cfg.llm_fallback is False
