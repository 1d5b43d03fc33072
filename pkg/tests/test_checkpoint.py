import json

import numpy as np
import pytest

from widenet.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from widenet.model import WideNetConfig, init_params, model_forward, named_parameters
from widenet.tensor import RngStream


@pytest.fixture
def saved(tmp_path, tiny_cfg, rng):
    params = init_params(tiny_cfg, RngStream(5))
    for t in named_parameters(params).values():
        t.data[...] += rng.normal(scale=0.1, size=t.shape)
    path = save_checkpoint(tmp_path / "ck", tiny_cfg, params, {"optim.step": np.array([3.0])}, {"step": 3})
    return path, params


def test_roundtrip_forward_bitwise(saved, tiny_cfg, rng):
    path, params = saved
    ck = load_checkpoint(path, expect=tiny_cfg)
    ids = rng.integers(0, 8, size=(3, 4))
    a = model_forward(ids, params, tiny_cfg)[0].data
    b = model_forward(ids, ck.params, ck.config)[0].data
    assert a.tobytes() == b.tobytes()
    assert ck.meta == {"step": 3} and ck.extra["optim.step"].tolist() == [3.0]


def test_shared_objects_survive_roundtrip(tmp_path):
    cfg = WideNetConfig(depth=3, groups=1, share_ln=True, d_model=8, heads=2, d_ff=8)
    ck = load_checkpoint(save_checkpoint(tmp_path / "c", cfg, init_params(cfg, 0)))
    assert all(n is ck.params.norms[0] for n in ck.params.norms)
    assert ck.params.blocks[0].experts is ck.params.blocks[2].experts


def test_manifest_contents(saved):
    path, params = saved
    manifest = read_manifest(path)
    names = [t["name"] for t in manifest["tensors"]]
    assert names[: len(named_parameters(params))] == ["model/" + n for n in named_parameters(params)]
    offsets = [t["offset"] for t in manifest["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_bad_magic(saved):
    path, _ = saved
    m = json.loads((path / "manifest.json").read_text())
    m["magic"] = "nope"
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_missing_and_corrupt(tmp_path, saved):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent")
    path, _ = saved
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_blob(saved):
    path, _ = saved
    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(blob[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_config_mismatch(saved, tiny_cfg):
    path, _ = saved
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=WideNetConfig(**{**tiny_cfg.to_dict(), "d_ff": 16}))
    m = json.loads((path / "manifest.json").read_text())
    m["config"]["d_ff"] = 16
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
