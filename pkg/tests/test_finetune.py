import numpy as np
import pytest
import torch

from conftest import make_manifest
from fundus_cl import finetune as ft
from fundus_cl.augment import AugmentationPolicy
from fundus_cl.checkpoint import Checkpoint
from fundus_cl.data import DatasetManifest, FundusRecord
from fundus_cl.finetune import (
    FinetuneConfig,
    LabeledImages,
    TrainParams,
    build_classifier,
    finetune,
    hyperparameter_search,
    predict_manifest,
    predict_proba,
)
from fundus_cl.imaging import save_image
from fundus_cl.losses import cross_entropy
from fundus_cl.models import ContrastiveModel, EncoderConfig, ProjectionHeadConfig, encoder_forward, init_weights, named_tensors
from fundus_cl.pretrain import TrainingDivergedError

ENC = EncoderConfig(stages=((1, 8), (1, 16)), embedding_dim=16, input_size=16)
POLICY = AugmentationPolicy.disabled(output_size=16)


def toy_images(manifest, seed=0):
    """Red images for referable records, blue otherwise, with mild noise."""
    r = np.random.default_rng(seed)
    imgs = []
    for y in manifest.labels:
        base = np.array([0.8, 0.2, 0.2]) if y else np.array([0.2, 0.2, 0.8])
        imgs.append(np.clip(base + 0.05 * r.standard_normal((16, 16, 3)), 0, 1).astype(np.float32))
    return LabeledImages(manifest.ids, np.stack(imgs), manifest.labels)


@pytest.fixture(scope="module")
def toy():
    m = make_manifest(10, eyes=2)
    return m, toy_images(m)


@pytest.fixture(scope="module")
def contrastive_ckpt():
    model = ContrastiveModel(ENC, ProjectionHeadConfig(8, 4))
    init_weights(model, 7)
    return Checkpoint(named_tensors(model), {"kind": "contrastive"})


class TestBuild:
    def test_contrastive_copies_encoder(self, contrastive_ckpt):
        model = build_classifier("contrastive_checkpoint", ENC, contrastive_ckpt)
        for k, v in named_tensors(model.encoder).items():
            assert v.tobytes() == contrastive_ckpt.tensors["encoder." + k].tobytes()

    def test_zero_steps_matches_checkpoint_encoder(self, contrastive_ckpt, rng):
        ref = ContrastiveModel(ENC, ProjectionHeadConfig(8, 4))
        ref.load_state_dict({k: torch.from_numpy(v) for k, v in contrastive_ckpt.tensors.items()})
        model = build_classifier("contrastive_checkpoint", ENC, contrastive_ckpt)
        x = rng.random((3, 16, 16, 3))
        np.testing.assert_array_equal(encoder_forward(model.encoder, x), encoder_forward(ref.encoder, x))

    def test_random_reproducible(self):
        a = named_tensors(build_classifier("random_baseline", ENC, seed=5))
        b = named_tensors(build_classifier("random_baseline", ENC, seed=5))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_missing_checkpoint(self):
        with pytest.raises(ValueError):
            build_classifier("contrastive_checkpoint", ENC, None)


class TestPredict:
    def test_zero_head_half(self, rng):
        model = build_classifier("random_baseline", ENC)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        np.testing.assert_array_equal(predict_proba(model, rng.random((4, 16, 16, 3))), 0.5)

    def test_manifest_order_duplicates_and_failures(self, tmp_path, rng):
        save_image(rng.random((20, 20, 3)), tmp_path / "a.png")
        save_image(rng.random((20, 20, 3)), tmp_path / "b.png")
        recs = [FundusRecord("a", str(tmp_path / "a.png"), 0, "p"), FundusRecord("b", str(tmp_path / "b.png"), 3, "q"),
                FundusRecord("a2", str(tmp_path / "a.png"), 0, "p"), FundusRecord("x", str(tmp_path / "x.png"), 0, "r")]
        probs, errors = predict_manifest(build_classifier("random_baseline", ENC), DatasetManifest(recs))
        assert len(probs) == 4 and probs[0] == probs[2] and np.isnan(probs[3]) and list(errors) == ["x"]
        assert 0 <= probs[1] <= 1


class TestFinetune:
    def test_zero_lr_constant_val_auc(self, toy):
        m, imgs = toy
        res = finetune(build_classifier("random_baseline", ENC), imgs, imgs, TrainParams(0.0, "adam", 8), 3, POLICY)
        assert len({h["val_auc"] for h in res.history}) == 1

    def test_deterministic(self, toy):
        _, imgs = toy
        a = finetune(build_classifier("random_baseline", ENC), imgs, imgs, TrainParams(1e-3), 2, POLICY, seed=3)
        b = finetune(build_classifier("random_baseline", ENC), imgs, imgs, TrainParams(1e-3), 2, POLICY, seed=3)
        assert a.history == b.history

    def test_frozen_encoder_separable(self, toy):
        _, imgs = toy
        model = build_classifier("random_baseline", ENC, seed=1)
        before = named_tensors(model.encoder)
        # 20 images, batch 4: 5 steps per epoch, 40 epochs = 200 steps.
        res = finetune(model, imgs, imgs, TrainParams(0.1, "adam", 4), 40, POLICY, freeze_encoder=True)
        assert min(h["train_loss"] for h in res.history) < 0.1
        assert all(before[k].tobytes() == v.tobytes() for k, v in named_tensors(res.model.encoder).items())

    def test_single_class_rejected(self, toy):
        _, imgs = toy
        one = imgs.subset([i for i, y in zip(imgs.ids, imgs.labels) if y == 1])
        with pytest.raises(ValueError):
            finetune(build_classifier("random_baseline", ENC), one, imgs, TrainParams(), 1, POLICY)

    def test_head_gradient_matches_finite_differences(self, rng):
        h = rng.standard_normal(6)
        w, b, label = rng.standard_normal((2, 6)), rng.standard_normal(2), 1

        def loss(wb):
            logits = wb[:, :6] @ h + wb[:, 6]
            p = np.exp(logits - logits.max())
            return cross_entropy(p / p.sum(), label)

        wb = torch.tensor(np.c_[w, b], requires_grad=True)
        logits = wb[:, :6] @ torch.from_numpy(h) + wb[:, 6]
        torch.nn.functional.cross_entropy(logits[None], torch.tensor([label])).backward()
        import oracles
        fd = oracles.central_difference(loss, np.c_[w, b])
        assert np.linalg.norm(wb.grad.numpy() - fd) / np.linalg.norm(fd) <= 1e-4


class TestSearch:
    def cfg(self, **kw):
        return FinetuneConfig(init="random_baseline", **{"epochs": 1, "folds": 2, **kw})

    def test_single_point(self, toy):
        m, imgs = toy
        res = hyperparameter_search(imgs, m, self.cfg(lr_grid=(1e-3,), optimizer_grid=("sgd",), batch_grid=(8,)),
                                    ENC, policy=POLICY)
        assert res.best == TrainParams(1e-3, "sgd", 8) and len(res.table) == 2

    def test_failing_point_routed(self, toy, monkeypatch):
        m, imgs = toy
        real = ft.finetune

        def flaky(model, train, val, params, *a, **k):
            if params.learning_rate == 1e-2:
                raise TrainingDivergedError("boom")
            return real(model, train, val, params, *a, **k)

        monkeypatch.setattr(ft, "finetune", flaky)
        res = hyperparameter_search(imgs, m, self.cfg(lr_grid=(1e-3, 1e-2), optimizer_grid=("adam",),
                                                      batch_grid=(8,)), ENC, policy=POLICY)
        assert res.best.learning_rate == 1e-3
        assert [s["status"] for s in res.summary] == ["ok", "failed"]

    def test_all_failed(self, toy, monkeypatch):
        m, imgs = toy
        monkeypatch.setattr(ft, "finetune", lambda *a, **k: (_ for _ in ()).throw(TrainingDivergedError("x")))
        with pytest.raises(RuntimeError):
            hyperparameter_search(imgs, m, self.cfg(lr_grid=(1e-3,), optimizer_grid=("adam",), batch_grid=(8,)),
                                  ENC, policy=POLICY)

    def test_full_default_grid_rows(self, toy, monkeypatch):
        m, imgs = toy
        monkeypatch.setattr(ft, "finetune", lambda model, *a, **k: ft.FinetuneResult(model, [], 1, 0.5))
        res = hyperparameter_search(imgs, m, self.cfg(), ENC, policy=POLICY)
        assert len(res.summary) == 5 * 2 * 4 and len(res.table) == 5 * 2 * 4 * 2
        # All tied: lowest lr, adam, smallest batch wins.
        assert res.best == TrainParams(1e-6, "adam", 32)

    def test_argmax_invariant_to_grid_order(self, toy, monkeypatch):
        m, imgs = toy
        score = {(1e-3, "adam", 8): 0.7, (1e-2, "adam", 8): 0.9, (1e-2, "sgd", 8): 0.9, (1e-3, "sgd", 16): 0.2}
        monkeypatch.setattr(ft, "finetune", lambda model, tr, va, p, *a, **k: ft.FinetuneResult(
            model, [], 1, score[(p.learning_rate, p.optimizer, p.batch_size)]))
        grid = [TrainParams(*k) for k in score]
        bests = {hyperparameter_search(imgs, m, self.cfg(), ENC, policy=POLICY, grid=g).best
                 for g in (grid, grid[::-1], grid[1:] + grid[:1])}
        assert bests == {TrainParams(1e-2, "adam", 8)}
