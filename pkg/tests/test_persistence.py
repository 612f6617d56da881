import json

import numpy as np
import pytest

from dilo.checkpoint import (Checkpoint, CheckpointError, load_checkpoint, optimizer_arrays, restore_states,
                             save_checkpoint)
from dilo.config import RunConfig
from dilo.diffcore import AdamState
from dilo.latentopt import init_latents
from dilo.nets import DiLONetwork

from .conftest import small_net_config


@pytest.fixture
def ckpt():
    net = DiLONetwork(small_net_config(50), seed=2)
    named = net.named_parameters(["generator"])
    states = [AdamState.zeros_like(p.data) for _, p in named]
    rng = np.random.default_rng(0)
    for s in states:
        s.m += rng.normal(size=s.m.shape)
        s.step = 7
    lat = init_latents([("a", "g"), ("b", "g"), ("c", "h")], 4, 4, seed=1)
    lat.deform_steps[:] = [1, 2, 3]
    cfg = RunConfig(net=small_net_config(50))
    return net, named, Checkpoint(1, cfg.to_dict(), net.state_arrays(), optimizer_arrays(named, states, "s1"),
                                  lat, extra={"note": "x"})


def test_round_trip_bit_exact(tmp_path, ckpt):
    net, named, c = ckpt
    save_checkpoint(c, tmp_path / "a")
    back = load_checkpoint(tmp_path / "a")
    for k, v in c.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    for k, v in c.optimizer.items():
        np.testing.assert_array_equal(back.optimizer[k], v)
    for k, v in c.latents.arrays().items():
        np.testing.assert_array_equal(back.latents.arrays()[k], v)
    assert back.latents.instance_ids == ["a", "b", "c"] and back.extra == {"note": "x"}
    states = restore_states(named, back.optimizer, "s1")
    assert states[0].step == 7


def test_save_load_save_is_byte_identical(tmp_path, ckpt):
    save_checkpoint(ckpt[2], tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    for name in ("meta.json", "params.bin", "latents.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_params_bin_size_matches_index(tmp_path, ckpt):
    save_checkpoint(ckpt[2], tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    expected = sum(8 * int(np.prod(e["shape"])) for e in meta["index"])
    assert (tmp_path / "params.bin").stat().st_size == expected


def test_corruption_detected(tmp_path, ckpt):
    save_checkpoint(ckpt[2], tmp_path)
    raw = bytearray((tmp_path / "params.bin").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "params.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path)
    (tmp_path / "params.bin").write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointError, match="expected .* bytes"):
        load_checkpoint(tmp_path)


def test_version_mismatch_named(tmp_path, ckpt):
    save_checkpoint(ckpt[2], tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["format_version"] = 9
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError, match="meta.json"):
        load_checkpoint(tmp_path / "nowhere")


def test_widths_must_match_on_load(tmp_path, ckpt):
    save_checkpoint(ckpt[2], tmp_path)
    params = load_checkpoint(tmp_path).params
    DiLONetwork(small_net_config(50), seed=0).load_arrays(params)
    cfg = small_net_config(50)
    cfg.adain_widths = (8, 32)
    with pytest.raises(ValueError):
        DiLONetwork(cfg, seed=0).load_arrays(params)


def test_run_config_round_trip_and_unknown_keys(tmp_path):
    cfg = RunConfig(net=small_net_config(50), data_dir="d").with_seed(4)
    assert cfg.stage1.seed == cfg.stage2.seed == 4
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"nett": {}})
    with pytest.raises(TypeError):
        RunConfig.from_dict({"stage1": {"learning_rate": 1}})
