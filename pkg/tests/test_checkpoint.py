import numpy as np
import pytest

from bisenet.checkpoint import (checkpoints_equal, load_checkpoint, manifest_text,
                                save_checkpoint)
from bisenet.errors import CheckpointMismatch, ConfigError
from bisenet.model import ArchConfig, build_bisenetv2
from bisenet.tensor import Tensor
from bisenet.train import TrainConfig, synth_dataset, train_loop

TOY = dict(alpha=0.25, num_classes=3, input_hw=(64, 64), ct_main=16, ct_aux=8)


@pytest.fixture(scope="module")
def trained():
    net = build_bisenetv2(ArchConfig(**TOY)).initialize(0)
    train_loop(net, synth_dataset(0, 4, 3, 64, 64), TrainConfig(max_iter=2))
    return net


def test_round_trip_is_bitwise(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.arch_hash() == trained.arch_hash()
    for (n, p), (m, q) in zip(trained.named_parameters(), back.named_parameters()):
        assert n == m and p.data.dtype == q.data.dtype and p.data.tobytes() == q.data.tobytes()
    for (_, ma, a), (_, mb, b) in zip(trained.named_buffers(), back.named_buffers()):
        assert getattr(ma, a).tobytes() == getattr(mb, b).tobytes()


def test_saving_twice_gives_identical_bytes(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a")
    save_checkpoint(trained, tmp_path / "b")
    assert checkpoints_equal(tmp_path / "a", tmp_path / "b")


def test_manifest_lists_config_topology_and_tensors(trained):
    text = manifest_text(trained)
    assert "alpha = 0.25" in text and "[topology]" in text
    assert "semantic.stem StemBlock" in text
    assert "param head.cls.weight 3x16x1x1 tensors/head.cls.weight.bt2" in text
    assert "buffer detail.s1.0.bn.running_var 16 " in text


def test_hash_mismatch(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "c")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "c", expected_hash="0" * 16)
    manifest = tmp_path / "c" / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("expansion = 6", "expansion = 4"))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "c")


def test_missing_tensor_file(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "c")
    (tmp_path / "c" / "tensors" / "head.cls.bias.bt2").unlink()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "c")


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path)


def test_uninitialized_network_cannot_be_saved(tmp_path):
    with pytest.raises(ConfigError):
        save_checkpoint(build_bisenetv2(ArchConfig(**TOY)), tmp_path / "c")


def test_loaded_network_reproduces_eval_logits(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    x = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32))
    a, b = trained.eval()(x).data, back.eval()(x).data
    trained.train()
    assert a.tobytes() == b.tobytes()
