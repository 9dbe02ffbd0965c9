import numpy as np
import pytest

from mtlf.encoder import EncoderConfig, pool_cls, encode_sequence
from mtlf.errors import CheckpointError, ConfigError, ContractError, RegistryError
from mtlf.heads import (
    SharedModel,
    TaskSpec,
    attach_head,
    forward_task,
    load_checkpoint,
    new_model,
    save_checkpoint,
    task_loss,
)


@pytest.fixture
def cfg():
    return EncoderConfig(
        vocab_size=30, max_len=12, hidden_dim=64, num_layers=2, num_heads=2,
        ffn_dim=128, dropout_p=0.0, seed=0,
    )


@pytest.fixture
def model(cfg):
    return new_model(cfg, np.random.default_rng(0))


def binary_spec(name="bias"):
    return TaskSpec(name=name, task_kind="single_classification", num_classes=2)


class TestTaskSpec:
    def test_ce_pairs_with_classification(self):
        with pytest.raises(ConfigError):
            TaskSpec(name="x", task_kind="single_classification", num_classes=2, loss_kind="MSE")

    def test_mse_pairs_with_regression(self):
        with pytest.raises(ConfigError):
            TaskSpec(name="x", task_kind="single_regression", target_range=(0, 1), loss_kind="CE")
        spec = TaskSpec(name="x", task_kind="single_regression", target_range=(0, 1), loss_kind="MSE")
        assert spec.head_width == 1

    def test_three_class_pair_task(self):
        spec = TaskSpec(name="nli", task_kind="pair_classification", num_classes=3)
        assert spec.head_width == 3


class TestAttachHead:
    def test_three_class_head_width(self, model):
        spec = TaskSpec(name="nli", task_kind="pair_classification", num_classes=3)
        attach_head(model, spec, np.random.default_rng(1))
        assert model.heads["nli"].weight.shape == (64, 3)
        assert model.heads["nli"].bias.shape == (3,)

    def test_regression_head_width_one(self, model):
        spec = TaskSpec(name="sim", task_kind="pair_regression", target_range=(0, 1), loss_kind="MSE")
        attach_head(model, spec, np.random.default_rng(1))
        assert model.heads["sim"].weight.shape == (64, 1)

    def test_duplicate_name_rejected(self, model):
        attach_head(model, binary_spec(), np.random.default_rng(1))
        with pytest.raises(RegistryError):
            attach_head(model, binary_spec(), np.random.default_rng(2))

    def test_encoder_untouched_by_attachment(self, model):
        before = {n: p.data.copy() for n, p in model.encoder.named_parameters()}
        for i in range(6):
            attach_head(model, binary_spec(f"t{i}"), np.random.default_rng(i))
        for n, p in model.encoder.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])
        assert len(model.heads) == 6


class TestForwardTask:
    def test_classification_shape(self, model):
        attach_head(model, binary_spec(), np.random.default_rng(1))
        ids = np.random.default_rng(0).integers(0, 30, size=(4, 6))
        out = forward_task(model, "bias", ids, np.ones((4, 6)))
        assert out.shape == (4, 2)

    def test_regression_shape(self, model):
        spec = TaskSpec(name="sim", task_kind="single_regression", target_range=(0, 1), loss_kind="MSE")
        attach_head(model, spec, np.random.default_rng(1))
        ids = np.random.default_rng(0).integers(0, 30, size=(7, 6))
        out = forward_task(model, "sim", ids, np.ones((7, 6)))
        assert out.shape == (7,)

    def test_unknown_task(self, model):
        with pytest.raises(RegistryError):
            forward_task(model, "nope", np.zeros((1, 2), dtype=int), np.ones((1, 2)))

    def test_heads_share_identical_cls_vectors(self, model):
        attach_head(model, binary_spec("a"), np.random.default_rng(1))
        attach_head(model, binary_spec("b"), np.random.default_rng(2))
        ids = np.random.default_rng(3).integers(0, 30, size=(3, 5))
        mask = np.ones((3, 5))
        cls_vec = pool_cls(encode_sequence(model.encoder, ids, mask)).data
        logits_a = forward_task(model, "a", ids, mask).data
        logits_b = forward_task(model, "b", ids, mask).data
        np.testing.assert_allclose(logits_a, cls_vec @ model.heads["a"].weight.data + model.heads["a"].bias.data, atol=1e-6)
        np.testing.assert_allclose(logits_b, cls_vec @ model.heads["b"].weight.data + model.heads["b"].bias.data, atol=1e-6)


class TestTaskLoss:
    def test_ce_dispatch(self):
        from mtlf.autograd import Tensor

        spec = binary_spec()
        loss = task_loss(spec, Tensor([[0.0, 0.0]]), np.array([0]))
        assert abs(loss.item() - np.log(2)) < 1e-6

    def test_mse_dispatch(self):
        from mtlf.autograd import Tensor

        spec = TaskSpec(name="r", task_kind="single_regression", target_range=(0, 1), loss_kind="MSE")
        assert task_loss(spec, Tensor([0.5, 0.25]), np.array([0.5, 0.25])).item() == 0.0

    def test_ce_rejects_float_targets(self):
        from mtlf.autograd import Tensor

        with pytest.raises(ContractError):
            task_loss(binary_spec(), Tensor([[0.0, 0.0]]), np.array([0.3]))


class TestGradientIsolation:
    def test_other_heads_get_zero_gradient(self, model):
        attach_head(model, binary_spec("a"), np.random.default_rng(1))
        attach_head(model, binary_spec("b"), np.random.default_rng(2))
        ids = np.random.default_rng(3).integers(0, 30, size=(4, 6))
        logits = forward_task(model, "a", ids, np.ones((4, 6)))
        task_loss(model.tasks["a"], logits, np.array([0, 1, 0, 1])).backward()
        assert model.heads["b"].weight.grad is None
        assert model.heads["a"].weight.grad is not None
        assert np.abs(model.heads["a"].weight.grad).max() > 0
        enc_grads = [p.grad for _, p in model.encoder.named_parameters()]
        assert all(g is not None for g in enc_grads)
        assert any(np.abs(g).max() > 0 for g in enc_grads)


class TestCheckpoint:
    def build(self, cfg, n_tasks=2):
        model = new_model(cfg, np.random.default_rng(7))
        for i in range(n_tasks):
            attach_head(model, binary_spec(f"t{i}"), np.random.default_rng(i))
        return model

    def test_round_trip_bit_exact(self, cfg, tmp_path):
        model = self.build(cfg)
        save_checkpoint(model, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        assert loaded.tasks.keys() == model.tasks.keys()

    def test_save_load_save_byte_identical(self, cfg, tmp_path):
        model = self.build(cfg)
        save_checkpoint(model, tmp_path / "a")
        loaded = load_checkpoint(tmp_path / "a")
        save_checkpoint(loaded, tmp_path / "b")
        assert (tmp_path / "a" / "weights.bin").read_bytes() == (tmp_path / "b" / "weights.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_truncated_blob_rejected(self, cfg, tmp_path):
        model = self.build(cfg)
        save_checkpoint(model, tmp_path / "ck")
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        (tmp_path / "ck" / "weights.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_bad_magic_rejected(self, cfg, tmp_path):
        model = self.build(cfg)
        save_checkpoint(model, tmp_path / "ck")
        manifest = (tmp_path / "ck" / "manifest.json").read_text()
        (tmp_path / "ck" / "manifest.json").write_text(manifest.replace("MTLF1", "NOPE9"))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "ck")

    def test_restores_six_heads(self, cfg, tmp_path):
        model = self.build(cfg, n_tasks=6)
        save_checkpoint(model, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert len(loaded.heads) == 6

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent")
