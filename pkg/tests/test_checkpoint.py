import struct

import numpy as np
import pytest

from xct.checkpoint import Checkpoint, read_checkpoint, stored, write_checkpoint
from xct.errors import FormatError
from xct.training import ModelBundle


@pytest.fixture
def checkpoint(rng):
    return Checkpoint(
        tensors=stored({"g.w": rng.normal(size=(2, 3)), "g.b": np.zeros(2), "d.s": np.array(1.5)}),
        optimizer=stored({"adam.g.m.g.w": rng.normal(size=(2, 3))}),
        meta={"stage": "pretrain", "epoch": 3, "best_val": 0.125, "config": {"seed": 1}},
    )


def _assert_same(a: Checkpoint, b: Checkpoint):
    assert list(a.tensors) == list(b.tensors)
    for name in a.tensors:
        assert a.tensors[name].tobytes() == b.tensors[name].tobytes()
        assert a.tensors[name].shape == b.tensors[name].shape
    for name in a.optimizer:
        assert a.optimizer[name].tobytes() == b.optimizer[name].tobytes()
    assert a.meta == b.meta


def test_bytes_roundtrip(checkpoint):
    _assert_same(Checkpoint.from_bytes(checkpoint.to_bytes()), checkpoint)


def test_file_roundtrip_and_accessors(checkpoint, tmp_path):
    loaded = read_checkpoint(write_checkpoint(checkpoint, tmp_path / "a.ckpt"))

    _assert_same(loaded, checkpoint)
    assert loaded.epoch == 3
    assert loaded.stage == "pretrain"
    assert set(loaded.subset("g.")) == {"g.w", "g.b"}


def test_serialization_is_deterministic(checkpoint):
    assert checkpoint.to_bytes() == Checkpoint.from_bytes(checkpoint.to_bytes()).to_bytes()


def test_empty_meta_defaults():
    ckpt = Checkpoint({})
    assert ckpt.epoch == 0
    assert ckpt.stage == "init"


def test_bad_magic(checkpoint):
    with pytest.raises(FormatError) as err:
        Checkpoint.from_bytes(b"XXXX" + checkpoint.to_bytes()[4:])
    assert err.value.field == "magic"


def test_bad_version(checkpoint):
    data = checkpoint.to_bytes()
    with pytest.raises(FormatError) as err:
        Checkpoint.from_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    assert err.value.field == "version"


@pytest.mark.parametrize("cut", [6, 20, -3])
def test_truncation_is_detected(checkpoint, cut):
    with pytest.raises(FormatError, match="truncated"):
        Checkpoint.from_bytes(checkpoint.to_bytes()[:cut])


def test_trailing_bytes(checkpoint):
    with pytest.raises(FormatError, match="trailing"):
        Checkpoint.from_bytes(checkpoint.to_bytes() + b"\0")


def test_model_bundle_roundtrip(tiny_config, tmp_path):
    bundle = ModelBundle.create(tiny_config)
    path = write_checkpoint(bundle.to_checkpoint(tiny_config), tmp_path / "m.ckpt")

    restored = ModelBundle.from_checkpoint(read_checkpoint(path))

    for model, other in ((bundle.generator, restored.generator), (bundle.discriminator, restored.discriminator)):
        for name, param in model.params.items():
            np.testing.assert_array_equal(param.value, other.params[name].value)
    assert restored.rng.bit_generator.state == bundle.rng.bit_generator.state
    assert restored.stage is bundle.stage
