import json

import numpy as np
import pytest

from ewlab.config import DEFAULTS, ConfigError, config_hash, load_config, make_config
from ewlab.ewf import MAGIC, read_ewf, read_field, write_ewf, write_field
from ewlab.grid_spectral import rough_random_field

from conftest import TWO_PI


def test_defaults_filled_and_seed_propagates():
    cfg = make_config(seed=7)
    assert cfg["grid"] == DEFAULTS["grid"]
    assert cfg["material"]["gamma"] == [0.4, 0.1]
    assert cfg["data"]["seed"] == 7
    assert make_config(data={"seed": 3}, seed=7)["data"]["seed"] == 3


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"grid": {"n": 24}}, "power of two"),
        ({"grid": {"n": 4}}, "grid/n"),
        ({"material": {"c1": 0.5, "c2": 0.5}}, "c1 > c2"),
        ({"time": {"tend": 1.0}}, "time"),
        ({"bogus": 1}, "root"),
        ({"data": {"kind": "spiral"}}, "data/kind"),
    ],
)
def test_invalid_configs_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        make_config(**raw)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"grid": ', encoding="utf-8")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="object"):
        load_config(arr)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")


def test_config_hash_stable(tmp_path):
    a = make_config(time={"t_end": 0.5}, grid={"n": 16})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"grid": {"n": 16}, "time": {"t_end": 0.5}}), encoding="utf-8")
    b = load_config(p)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(make_config(time={"t_end": 0.6}, grid={"n": 16}))


def test_ewf_round_trip(tmp_path, grid16):
    f = rough_random_field(grid16, 2.0, 1.0, seed=5, components=3)
    write_field(tmp_path / "f.ewf", f, 0.25)
    back, t = read_field(tmp_path / "f.ewf")
    assert t == 0.25 and back.rank == f.rank and back.grid.box_len == TWO_PI
    assert np.array_equal(back.data, f.data)
    assert (tmp_path / "f.ewf").read_bytes()[:8] == MAGIC


def test_ewf_state_rank_is_not_a_field(tmp_path):
    write_ewf(tmp_path / "s.ewf", np.zeros((6, 8, 8, 8)), 1.0, "state", 0.0)
    header, data = read_ewf(tmp_path / "s.ewf")
    assert header["components"] == 6 and data.shape == (6, 8, 8, 8)
    with pytest.raises(ValueError, match="single field"):
        read_field(tmp_path / "s.ewf")


def test_ewf_rejects_bad_files(tmp_path):
    write_ewf(tmp_path / "a.ewf", np.ones((1, 8, 8, 8)), 1.0, "scalar", 0.0)
    raw = (tmp_path / "a.ewf").read_bytes()
    (tmp_path / "magic.ewf").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.ewf").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="not an EWF1"):
        read_ewf(tmp_path / "magic.ewf")
    with pytest.raises(ValueError, match="data bytes"):
        read_ewf(tmp_path / "short.ewf")
    with pytest.raises(ValueError):
        write_ewf(tmp_path / "b.ewf", np.ones((8, 8, 8)), 1.0, "scalar", 0.0)
