import struct

import numpy as np
import pytest

from mmgc.checkpoint import MAGIC, Checkpoint
from mmgc.config import ModelConfig, RunConfig
from mmgc.errors import ConfigError, FormatError
from mmgc.fusion import MMGCNet
from mmgc.gradcheck import tiny_config
from mmgc.report_encoder import build_vocab


@pytest.fixture
def ckpt():
    model = MMGCNet(tiny_config("m3"), 2)
    return Checkpoint.from_model(model, build_vocab(["a b c"]), seed=2, epoch=5, vocab_path="vocab.txt")


def test_round_trip_bit_exact(tmp_path, ckpt):
    ckpt.save(tmp_path / "c.mmgc")
    again = Checkpoint.load(tmp_path / "c.mmgc")
    assert again == ckpt
    assert again.to_bytes() == ckpt.to_bytes()
    assert again.extra == {"vocab_path": "vocab.txt"}


def test_restored_model_matches(ckpt):
    model = Checkpoint.from_bytes(ckpt.to_bytes()).to_model()
    assert all(np.array_equal(p.data, ckpt.tensors[n]) for n, p in model.named_parameters())


def test_layout(ckpt):
    blob = ckpt.to_bytes()
    assert blob[:8] == MAGIC
    assert struct.unpack("<I", blob[8:12])[0] == len(ckpt.tensors)
    (trailer_len,) = struct.unpack("<I", blob[-4:])
    assert blob[-4 - trailer_len : -4].startswith(b"{")


@pytest.mark.parametrize("cut", [3, 12, 100, -5, -1])
def test_truncation_is_format_error(ckpt, cut):
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(ckpt.to_bytes()[:cut])


def test_bad_magic_and_trailer(ckpt):
    blob = bytearray(ckpt.to_bytes())
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(blob[8:]))
    broken = bytes(blob[:-20]) + b"garbage!garbage!" + bytes(blob[-4:])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(broken)


def test_any_flipped_bit_is_format_error(ckpt):
    blob = ckpt.to_bytes()
    rng = np.random.default_rng(0)
    for _ in range(300):
        mutated = bytearray(blob)
        mutated[int(rng.integers(0, len(blob)))] ^= 1 << int(rng.integers(8))
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(bytes(mutated))


def test_architecture_mismatch_is_format_error(ckpt):
    tensors = dict(ckpt.tensors)
    tensors.pop("head.classifier.layers.0.bias")
    broken = Checkpoint(tensors, ckpt.config, ckpt.vocab, ckpt.seed, ckpt.epoch)
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(broken.to_bytes())


def test_hostile_dims(ckpt):
    blob = bytearray(ckpt.to_bytes())
    name_len = struct.unpack("<H", blob[12:14])[0]
    rank_at = 14 + name_len
    blob[rank_at + 1 : rank_at + 5] = struct.pack("<I", 2**32 - 1)
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(bytes(blob))


def test_run_config_text_round_trip():
    cfg = RunConfig().update({"epochs": 7, "variant": "m2", "sigma": 0.01, "reference_lr": True})
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg and again.train.epochs == 7 and again.train.reference_lr is True


def test_run_config_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_text("nonsense = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("epochs = many\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("variant = m4\n").validate()
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.txt")


def test_run_config_comments_and_schema():
    cfg = RunConfig.from_text("# desk run\nepochs=3  # short\n\nseed = 4\n")
    assert cfg.train.epochs == 3 and cfg.seed == 4
    schema = RunConfig.schema()
    assert schema["d_model"][0] == "model" and schema["n"][0] == "gen"


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, vit_heads=4).validate()
