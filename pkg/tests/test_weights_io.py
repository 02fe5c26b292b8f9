import struct

import pytest
import torch

from ridgealign.config import TOY, ModelConfig
from ridgealign.errors import ArchiveError, ConfigError
from ridgealign.weights import (WeightArchive, init_weights, tensor_specs,
                                zero_output_projections)


def test_specs_cover_all_blocks():
    names = [n for n, _ in tensor_specs(TOY)]
    assert len(names) == len(set(names))
    for i in range(TOY.n_c):
        assert f"gla{i}.flow.w" in names
        assert f"gla{i}.glob.q.w" in names
        assert f"gla{i}.loc16.out.b" in names
        assert f"gla{i}.loc8.v.w" in names
        assert f"gla{i}.ffn.lin.w" in names
    for t in range(TOY.n_f):
        assert f"fine{t}.self.q.w" in names
        assert f"fine{t}.cross.out.w" in names
    assert "match.tau" in names
    assert "bb.stem.w" in names


def test_init_flow_head_zero_and_tau(toy_weights):
    assert float(toy_weights["gla0.flow.w"].abs().max()) == 0.0
    assert float(toy_weights["gla0.flow.b"].abs().max()) == 0.0
    assert abs(float(toy_weights["match.tau"][0])
               - 1.0 / TOY.c_coarse ** 0.5) <= 1e-12


def test_init_deterministic():
    a = init_weights(TOY, seed=7)
    b = init_weights(TOY, seed=7)
    for name in a.tensors:
        assert torch.equal(a[name], b[name])


def test_missing_tensor_raises(toy_weights):
    with pytest.raises(ArchiveError):
        toy_weights["no.such.tensor"]
    tensors = dict(toy_weights.tensors)
    del tensors["match.tau"]
    with pytest.raises(ArchiveError):
        WeightArchive(TOY, tensors)


def test_wrong_shape_raises(toy_weights):
    tensors = dict(toy_weights.tensors)
    tensors["match.tau"] = torch.zeros(2)
    with pytest.raises(ArchiveError):
        WeightArchive(TOY, tensors)


def test_roundtrip_bitwise(tmp_path, toy_weights):
    p1 = tmp_path / "a.rwa"
    p2 = tmp_path / "b.rwa"
    toy_weights.save(p1)
    WeightArchive.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_restores_config_and_values(tmp_path, toy_weights):
    p = tmp_path / "w.rwa"
    toy_weights.save(p)
    loaded = WeightArchive.load(p)
    assert loaded.cfg == TOY
    # float32 storage: loaded values match to single precision
    diff = (loaded["bb.stem.w"] - toy_weights["bb.stem.w"]).abs().max()
    assert float(diff) <= 1e-6


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.rwa"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ArchiveError):
        WeightArchive.load(p)


def test_load_rejects_truncated_payload(tmp_path, toy_weights):
    p = tmp_path / "w.rwa"
    toy_weights.save(p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-32])
    with pytest.raises(ArchiveError):
        WeightArchive.load(p)


def test_load_rejects_malformed_manifest(tmp_path):
    p = tmp_path / "w.rwa"
    manifest = b"not json"
    p.write_bytes(b"RWA1" + struct.pack("<I", len(manifest)) + manifest)
    with pytest.raises(ArchiveError):
        WeightArchive.load(p)


def test_clone_is_independent(toy_weights):
    c = toy_weights.clone()
    c["match.tau"].add_(1.0)
    assert float(c["match.tau"][0]) != float(toy_weights["match.tau"][0])


def test_zero_output_projections(toy_weights):
    z = zero_output_projections(toy_weights)
    assert float(z["gla0.glob.out.w"].abs().max()) == 0.0
    assert float(z["gla0.ffn.lin.w"].abs().max()) == 0.0
    assert float(z["fine0.self.out.w"].abs().max()) == 0.0
    # non-projection tensors untouched
    assert torch.equal(z["bb.stem.w"], toy_weights["bb.stem.w"])


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(window=4)
    with pytest.raises(ConfigError):
        ModelConfig(theta=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(c_coarse=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(tps_lambda=-0.1)


def test_config_roundtrip_and_overrides():
    cfg = ModelConfig.from_dict(TOY.to_dict())
    assert cfg == TOY
    cfg2 = TOY.with_overrides(theta=0.5, window=None)
    assert cfg2.theta == 0.5 and cfg2.window == TOY.window
