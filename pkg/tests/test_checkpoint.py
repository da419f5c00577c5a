import numpy as np
import pytest

from fundus_cl.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    fnv1a64,
    load_checkpoint,
    save_checkpoint,
)
from fundus_cl.finetune import build_classifier, classifier_checkpoint, classifier_from_checkpoint, predict_proba
from fundus_cl.models import ContrastiveModel, EncoderConfig, ProjectionHeadConfig, ShapeMismatchError, init_weights, named_tensors

CFG = EncoderConfig(stages=((1, 8), (1, 16)), embedding_dim=12, input_size=16)


@pytest.fixture
def ckpt():
    model = ContrastiveModel(CFG, ProjectionHeadConfig(8, 4))
    init_weights(model, 2)
    return Checkpoint(named_tensors(model), {"kind": "contrastive", "encoder": CFG.to_dict(), "seed": 2})


class TestFnv:
    def test_reference_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestRoundTrip:
    def test_bit_identical(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.metadata == ckpt.metadata
        assert set(back.tensors) == set(ckpt.tensors)
        for k, v in ckpt.tensors.items():
            assert back.tensors[k].dtype == np.float32
            assert back.tensors[k].tobytes() == v.tobytes()

    def test_encoding_deterministic(self, ckpt):
        assert encode_checkpoint(ckpt) == encode_checkpoint(ckpt)
        assert encode_checkpoint(ckpt).startswith(MAGIC)

    def test_scalar_and_empty(self):
        c = Checkpoint({"s": np.array(3.5, dtype=np.float32), "e": np.zeros((0, 4), np.float32)}, {})
        back = decode_checkpoint(encode_checkpoint(c))
        assert back.tensors["s"].shape == () and float(back.tensors["s"]) == 3.5
        assert back.tensors["e"].shape == (0, 4)

    def test_classifier_predictions_survive(self, tmp_path, rng):
        model = build_classifier("random_baseline", CFG, seed=4)
        save_checkpoint(classifier_checkpoint(model, {"threshold": 0.5}), tmp_path / "m.bin")
        restored = classifier_from_checkpoint(load_checkpoint(tmp_path / "m.bin"))
        x = rng.random((6, 16, 16, 3)).astype(np.float32)
        np.testing.assert_allclose(predict_proba(restored, x), predict_proba(model, x), atol=1e-7, rtol=0)


class TestCorruption:
    def test_truncated(self, ckpt):
        blob = encode_checkpoint(ckpt)
        with pytest.raises(CheckpointError, match="digest"):
            decode_checkpoint(blob[:-100])

    def test_flipped_byte(self, ckpt):
        blob = bytearray(encode_checkpoint(ckpt))
        blob[len(blob) // 2] ^= 0x01
        with pytest.raises(CheckpointError, match="digest"):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"NOTACKPT" + bytes(32))

    def test_shape_audit(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "c.bin")
        load_checkpoint(tmp_path / "c.bin", CFG)
        other = EncoderConfig(stages=((1, 8), (1, 24)), embedding_dim=12, input_size=16)
        with pytest.raises(ShapeMismatchError) as exc:
            load_checkpoint(tmp_path / "c.bin", other)
        assert "(24," in str(exc.value) and "(16," in str(exc.value)
