import numpy as np
import pytest

from lion3d.block import init_backbone, full_scale_blocks
from lion3d.checkpoint import CK_MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from lion3d.config import load_config, parse_config
from lion3d.errors import ContractViolation
from lion3d.harness.train import init_detector, toy_config
from lion3d.tree import iter_arrays


def test_default_config_is_the_full_scale_model():
    cfg = load_config()
    bb = cfg.backbone
    assert bb.n_blocks == 4 and bb.channels == 64 and bb.ratio == 0.2
    assert bb.blocks == full_scale_blocks()
    assert bb.grid.shape == (468, 468, 32)


def test_toy_config_matches_toy_defaults():
    cfg = load_config("toy")
    want = toy_config("mamba")
    assert cfg.backbone.grid == want.backbone.grid
    assert cfg.backbone.blocks == want.backbone.blocks
    assert cfg.train.steps == want.steps and cfg.train.lr == want.lr


def test_overrides_and_per_block_lists():
    cfg = parse_config(
        "[backbone]\nn_blocks = 2\noperator = RWKV\n"
        "[blocks]\nwindow_z = 32 16\ngroup_size = 64\n[run]\nseed = 5\n"
    )
    assert cfg.backbone.operator == "rwkv" and cfg.seed == 5 and cfg.train.seed == 5
    assert [b.window.tz for b in cfg.backbone.blocks] == [32, 16]
    assert [b.group_size for b in cfg.backbone.blocks] == [64, 64]
    o = cfg.with_overrides(operator="retnet", seed=9)
    assert o.backbone.operator == o.train.backbone.operator == "retnet" and o.backbone.seed == 9


@pytest.mark.parametrize(
    "text",
    [
        "[backbone]\nn_blocks = two\n",
        "[blocks]\nwindow_z = 32 16 8\n",
        "[grid]\nvoxel_size = 0.3 0.3\n",
        "[backbone]\noperator = lstm\n",
        "not an ini file",
        "[train]\nbatch_size = 100\nn_scenes = 4\n",
    ],
)
def test_malformed_configs_are_contract_violations(text):
    with pytest.raises(ContractViolation):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ContractViolation):
        load_config(tmp_path / "nope.cfg")


@pytest.mark.parametrize("operator", ["mamba", "retnet", "rwkv"])
def test_checkpoint_round_trip(tmp_path, operator):
    cfg = toy_config(operator, channels=4)
    src = init_detector(cfg, seed=3)
    path = tmp_path / "p.ck"
    n = save_checkpoint(path, src)
    assert path.read_bytes()[:8] == CK_MAGIC
    assert n == len(list(iter_arrays(src)))
    dst = load_checkpoint(path, init_detector(cfg, seed=4))
    for (na, a), (nb, b) in zip(iter_arrays(src), iter_arrays(dst)):
        assert na == nb and np.array_equal(a, b)
    # a detector checkpoint loads into a bare backbone
    bb = load_checkpoint(path, init_backbone(cfg.backbone, 7))
    for (_, a), (_, b) in zip(iter_arrays(src.backbone), iter_arrays(bb)):
        assert np.array_equal(a, b)


def test_checkpoint_mismatches(tmp_path):
    path = tmp_path / "p.ck"
    save_checkpoint(path, init_backbone(toy_config("mamba", channels=4).backbone))
    with pytest.raises(ContractViolation, match="names differ"):
        load_checkpoint(path, init_backbone(toy_config("rwkv", channels=4).backbone))
    with pytest.raises(ContractViolation, match="shape"):
        load_checkpoint(path, init_backbone(toy_config("mamba", channels=8).backbone))
    data = path.read_bytes()
    (tmp_path / "cut.ck").write_bytes(data[: len(data) // 2])
    with pytest.raises(ContractViolation):
        read_checkpoint(tmp_path / "cut.ck")
    (tmp_path / "bad.ck").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ContractViolation, match="magic"):
        read_checkpoint(tmp_path / "bad.ck")
