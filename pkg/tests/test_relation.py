import numpy as np
import pytest

from aumeta.checkpoint import CheckpointError, save_checkpoint
from aumeta.errors import ConfigError
from aumeta.losses import compute_weights
from aumeta.params import ParameterSet
from aumeta.region_network import BackboneConfig, RegionNetwork
from aumeta.relation import (
    EncoderConfig,
    RelationModel,
    RelationTrainConfig,
    import_marl,
    relation_lr,
)
from aumeta.rng import stream

from conftest import TINY_BB, rel_err

W3 = compute_weights([0.5, 0.4, 0.6])


@pytest.fixture(scope="module")
def model():
    net = RegionNetwork(BackboneConfig(**TINY_BB))
    enc = EncoderConfig(n_tokens=3, width=8, n_heads=2, n_layers=2, dropout=0.1, cls_hidden=5)
    return RelationModel(net, enc)


@pytest.fixture(scope="module")
def params(model):
    stage1 = model.net.init_params(seed=0)
    tensors = {n: stage1[n] for n in model.retained_names()}
    tensors.update(model.init_head_params(seed=0))
    return ParameterSet(tensors)


def make_batch(model, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    s = model.net.cfg.input_size
    images = rng.random((batch, s, s, 3))
    centers = rng.integers(0, model.net.cfg.grid_size, size=(batch, 6, 2))
    labels = (rng.random((batch, 3)) < 0.5).astype(np.float64)
    return images, centers, labels


class TestEncoderConfig:
    def test_width_head_divisibility(self):
        with pytest.raises(ConfigError):
            EncoderConfig(n_tokens=3, width=7, n_heads=2)

    def test_needs_layer(self):
        with pytest.raises(ConfigError):
            EncoderConfig(n_tokens=3, width=8, n_layers=0)

    def test_ff_defaults_to_4x(self):
        assert EncoderConfig(n_tokens=3, width=8).ff == 32


class TestEncodeRelations:
    def test_shape_preserved(self, model, params):
        rng = np.random.default_rng(1)
        tokens = rng.standard_normal((4, 3, 8))
        out, _, _ = model.encode_forward(params, tokens)
        assert out.shape == tokens.shape

    def test_permutation_equivariance_exact(self, model, params):
        rng = np.random.default_rng(2)
        tokens = rng.standard_normal((2, 3, 8))
        for perm in ([2, 0, 1], [1, 0, 2], [2, 1, 0]):
            out, _, _ = model.encode_forward(params, tokens)
            out_p, _, _ = model.encode_forward(params, tokens[:, perm])
            np.testing.assert_allclose(out[:, perm], out_p, rtol=1e-12, atol=1e-12)

    def test_attention_rows_sum_to_one(self, model, params):
        rng = np.random.default_rng(3)
        tokens = rng.standard_normal((3, 3, 8))
        _, _, attns = model.encode_forward(params, tokens, collect_attention=True)
        assert len(attns) == 2
        for attn in attns:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
            assert (attn >= 0.0).all()

    def test_single_token_attention_is_identity(self, model):
        net = RegionNetwork(BackboneConfig(**{**TINY_BB, "n_au": 1}))
        enc = EncoderConfig(n_tokens=1, width=8, n_heads=2, n_layers=1, cls_hidden=4)
        m1 = RelationModel(net, enc)
        p = ParameterSet(m1.init_head_params(seed=1))
        rng = np.random.default_rng(4)
        tokens = rng.standard_normal((2, 1, 8))
        _, _, attns = m1.encode_forward(p, tokens, collect_attention=True)
        np.testing.assert_allclose(attns[0], 1.0)

    def test_deterministic_with_dropout_off(self, model, params):
        rng = np.random.default_rng(5)
        tokens = rng.standard_normal((2, 3, 8))
        a, _, _ = model.encode_forward(params, tokens, train=False)
        b, _, _ = model.encode_forward(params, tokens, train=False)
        np.testing.assert_array_equal(a, b)

    def test_dropout_active_in_training_mode(self, model, params):
        rng = np.random.default_rng(6)
        tokens = rng.standard_normal((2, 3, 8))
        a, _, _ = model.encode_forward(params, tokens, train=True, rng=stream(0, "d"))
        b, _, _ = model.encode_forward(params, tokens, train=False)
        assert not np.allclose(a, b)

    def test_zeroed_encoder_is_token_local(self, model, params):
        zeroed = params.copy()
        for n in zeroed.names:
            if n.startswith("enc.") and not n.endswith(".g"):
                zeroed[n] = np.zeros_like(zeroed[n])
        rng = np.random.default_rng(7)
        tokens = rng.standard_normal((2, 3, 8))
        base, _, _ = model.encode_forward(zeroed, tokens)
        moved = tokens.copy()
        moved[:, 1] += 7.0
        out, _, _ = model.encode_forward(zeroed, moved)
        np.testing.assert_allclose(base[:, [0, 2]], out[:, [0, 2]], atol=1e-12)
        logits_a, _ = model.tokens_to_logits(zeroed, tokens)
        logits_b, _ = model.tokens_to_logits(zeroed, moved)
        np.testing.assert_allclose(logits_a[:, [0, 2]], logits_b[:, [0, 2]], atol=1e-12)


class TestFullPipeline:
    def test_probabilities_in_unit_interval(self, model, params):
        images, centers, _ = make_batch(model, batch=3, seed=8)
        probs = model.predict(params, images, centers)
        assert (probs > 0).all() and (probs < 1).all()

    def test_gradient_matches_fd(self, model, params):
        images, centers, labels = make_batch(model, batch=2, seed=9)
        loss, grad, _ = model.loss_and_grad(params, (images, centers, labels), W3)
        vec = params.to_vector()
        gvec = grad.to_vector()
        rng = np.random.default_rng(10)
        for i in rng.choice(vec.size, size=30, replace=False):
            e = 1e-6 * max(1.0, abs(vec[i]))
            vp = vec.copy(); vp[i] += e
            vm = vec.copy(); vm[i] -= e
            lp, _, _ = model.loss_and_grad(params.from_vector(vp), (images, centers, labels), W3)
            lm, _, _ = model.loss_and_grad(params.from_vector(vm), (images, centers, labels), W3)
            fd = (lp - lm) / (2 * e)
            an = gvec[i]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3

    def test_frozen_backbone_grads_cover_head_only(self, model, params):
        images, centers, labels = make_batch(model, batch=2, seed=11)
        _, grad, _ = model.loss_and_grad(params, (images, centers, labels), W3,
                                         freeze_backbone=True)
        assert all(n.startswith(("enc.", "cls.")) for n in grad.names)

    def test_token_path_matches_image_path(self, model, params):
        images, centers, labels = make_batch(model, batch=2, seed=12)
        tokens = model.net.embed(params, images, centers)
        l1, g1, _ = model.loss_and_grad(params, (images, centers, labels), W3, freeze_backbone=True)
        l2, g2, _ = model.loss_and_grad_tokens(params, tokens, labels, W3)
        assert l1 == pytest.approx(l2, rel=1e-12)
        assert rel_err(g1.to_vector(), g2.to_vector()) < 1e-12

    def test_no_encoder_path_ignores_encoder_params(self, model, params):
        images, centers, labels = make_batch(model, batch=2, seed=13)
        p2 = params.copy()
        rng = np.random.default_rng(14)
        for n in p2.names:
            if n.startswith("enc."):
                p2[n] = rng.standard_normal(p2[n].shape)
        a = model.predict(params, images, centers, use_encoder=False)
        b = model.predict(p2, images, centers, use_encoder=False)
        np.testing.assert_array_equal(a, b)


class TestImportMarl:
    def _save_stage1(self, model, tmp_path, seed=3):
        stage1 = model.net.init_params(seed=seed)
        path = tmp_path / "marl_best.ckpt"
        save_checkpoint(path, stage1, kind="marl", fingerprint=model.net.cfg.fingerprint())
        return stage1, path

    def test_heads_dropped_retained_bit_exact(self, model, tmp_path):
        stage1, path = self._save_stage1(model, tmp_path)
        params = import_marl(path, model, seed=5)
        for n in model.retained_names():
            np.testing.assert_array_equal(params[n], stage1[n])
        assert not any(n.startswith("head.") for n in params.names)
        assert any(n.startswith("enc.") for n in params.names)
        assert any(n.startswith("cls.") for n in params.names)

    def test_retained_backbone_gives_identical_embeddings(self, model, tmp_path):
        stage1, path = self._save_stage1(model, tmp_path)
        params = import_marl(path, model, seed=5)
        images, centers, _ = make_batch(model, batch=2, seed=15)
        np.testing.assert_array_equal(
            model.net.embed(stage1, images, centers),
            model.net.embed(params, images, centers),
        )

    def test_fingerprint_mismatch_needs_force(self, model, tmp_path):
        stage1 = model.net.init_params(seed=3)
        path = tmp_path / "other.ckpt"
        save_checkpoint(path, stage1, kind="marl", fingerprint="deadbeef")
        with pytest.raises(CheckpointError, match="fingerprint"):
            import_marl(path, model, seed=5)
        params = import_marl(path, model, seed=5, force=True)
        assert "cls.fc1.w" in params

    def test_missing_tensor_listed(self, model, tmp_path):
        stage1 = model.net.init_params(seed=3)
        partial = ParameterSet({n: stage1[n] for n in stage1.names if n != "branch.fc.w"})
        path = tmp_path / "partial.ckpt"
        save_checkpoint(path, partial, kind="marl", fingerprint=model.net.cfg.fingerprint())
        with pytest.raises(CheckpointError, match="branch.fc.w"):
            import_marl(path, model, seed=5)

    def test_corrupt_archive(self, model, tmp_path):
        path = tmp_path / "corrupt.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            import_marl(path, model, seed=5)


class TestSchedule:
    def test_decay_every_two_epochs(self):
        cfg = RelationTrainConfig(lr=0.006, lr_decay=0.3, lr_decay_every=2)
        assert relation_lr(cfg, 0) == pytest.approx(0.006)
        assert relation_lr(cfg, 1) == pytest.approx(0.006)
        assert relation_lr(cfg, 2) == pytest.approx(0.0018)
        assert relation_lr(cfg, 4) == pytest.approx(0.006 * 0.3 ** 2)  # 5.4e-4
        assert relation_lr(cfg, 4) == pytest.approx(5.4e-4)
