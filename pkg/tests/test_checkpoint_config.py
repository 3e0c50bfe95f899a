import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from fewshot_sdf import checkpoint as ck
from fewshot_sdf.config import ExperimentConfig, desk_profile, load_config, paper_profile

HASH = "ab" * 32


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"theta.w0": rng.normal(size=(3, 4)), "alpha.w0": np.full((3, 4), 1e-5), "adam_t": np.array(7.0),
              "special": np.array([np.nan, np.inf, -0.0, 5e-324])}
    c = ck.Checkpoint(HASH, {"epoch": 3, "x": [1, 2]}, arrays)
    ck.save(c, tmp_path / "a.ckpt")
    back = ck.load(tmp_path / "a.ckpt")
    assert back.config_hash == HASH and back.metadata == c.metadata
    assert list(back.arrays) == list(arrays)
    for k in arrays:
        assert back.arrays[k].shape == np.shape(arrays[k])
        assert back.arrays[k].tobytes() == np.asarray(arrays[k], dtype=np.float64).tobytes()
    assert ck.to_bytes(back) == ck.to_bytes(c)
    assert back.group("theta") == {"w0": back.arrays["theta.w0"]}
    assert back.has_group("alpha") and not back.has_group("encoder")


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4)))
def test_checkpoint_roundtrip_any_array(a):
    c = ck.Checkpoint(HASH, {}, {"a": a})
    assert ck.from_bytes(ck.to_bytes(c)).arrays["a"].tobytes() == a.tobytes()


def test_checkpoint_corruption_rejected(tmp_path):
    data = ck.to_bytes(ck.Checkpoint(HASH, {}, {"a": np.ones(3)}))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.from_bytes(b"X" + data[1:])
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.from_bytes(data[:-1])
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.from_bytes(data + b"\0")
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.from_bytes(data[:8] + (2).to_bytes(4, "little") + data[12:])
    with pytest.raises(ck.CheckpointError, match="cannot read"):
        ck.load(tmp_path / "missing.ckpt")
    with pytest.raises(ck.CheckpointError):
        ck.to_bytes(ck.Checkpoint("abcd", {}, {}))


def test_check_hash():
    c = ck.Checkpoint(HASH, {}, {})
    ck.check_hash(c, HASH, "x")
    with pytest.raises(ck.CheckpointError, match="mismatch"):
        ck.check_hash(c, "cd" * 32, "resume")


def test_config_json_roundtrip_and_strict_keys(tmp_path):
    cfg = desk_profile()
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ExperimentConfig.load(p) == cfg
    bad = cfg.to_dict()
    bad["meta"]["learning_rate"] = 1.0
    with pytest.raises(ValueError, match="meta.learning_rate"):
        ExperimentConfig.from_dict(bad)
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"colour": 1})


def test_partial_config_merges_over_defaults():
    cfg = ExperimentConfig.from_dict({"meta": {"k": 2}})
    assert cfg.meta.k == 2 and cfg.meta.beta == desk_profile().meta.beta


def test_overrides():
    cfg = load_config(overrides=["meta.k=3", "decoder.hidden=[8,8]", "eval.split=train"])
    assert cfg.meta.k == 3 and cfg.decoder.hidden == (8, 8) and cfg.eval.split == "train"
    for bad in (["meta.kk=1"], ["meta"], ["nope.k=1"]):
        with pytest.raises(ValueError):
            load_config(overrides=bad)
    with pytest.raises(ValueError):
        load_config(overrides=["encoder.resolution=20"])
    with pytest.raises(ValueError):
        load_config(profile="huge")


def test_desk_and_paper_profiles():
    d = desk_profile()
    assert (d.dataset.n_shapes, d.dataset.n_points, d.encoder.resolution, d.meta.k, d.meta.epochs) == (200, 256, 32, 5, 30)
    assert d.decoder.hidden == (64,) * 4
    p = paper_profile()
    assert (p.dataset.n_points, p.encoder.resolution, p.meta.epochs, p.meta.batch, p.base.epochs) == (3000, 128, 100, 4, 50)
    assert p.base.lr == 1e-5


def test_stage_hashes():
    cfg = desk_profile()
    assert cfg.stage_hash("base") == desk_profile().stage_hash("base")
    meta_only = cfg.with_overrides(["meta.k=3"])
    assert meta_only.stage_hash("base") == cfg.stage_hash("base")
    assert meta_only.stage_hash("meta") != cfg.stage_hash("meta")
    assert cfg.with_overrides(["base.lr=0.01"]).stage_hash("base") != cfg.stage_hash("base")
    # evaluation settings never invalidate a checkpoint
    assert cfg.with_overrides(["reconstruct.resolution=64"]).stage_hash("meta") == cfg.stage_hash("meta")
    with pytest.raises(ValueError):
        cfg.stage_hash("eval")


def test_first_order_ablation_folds_into_meta_config():
    assert desk_profile().meta_config().second_order
    assert not desk_profile().with_overrides(["ablation.first_order=true"]).meta_config().second_order
    json.loads(desk_profile().to_json())
