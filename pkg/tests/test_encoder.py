import numpy as np
import pytest

from audiomlm import tensor as T
from audiomlm.config import EncoderConfig
from audiomlm.encoder import (
    EncoderModel,
    mlm_loss,
    mlm_metrics,
    read_embedding_dump,
    write_embedding_dump,
)
from audiomlm.errors import ConfigError, ContractError

from oracles import FD_RTOL, numeric_gradient, rel_error, scalar_cross_entropy

TINY = EncoderConfig(hidden=64, ffn=256, layers=2, heads=4, codebook_size=32)
MICRO = EncoderConfig(hidden=8, ffn=16, layers=1, heads=2, codebook_size=5, max_time_patches=8)


def _batch(rng, b=2, n=8, cfg=TINY):
    patches = rng.standard_normal((b, n, cfg.patch_dim)).astype(np.float32)
    time_ids = np.tile(np.arange(n) // 8, (b, 1))
    freq_ids = np.tile(np.arange(n) % 8, (b, 1))
    return patches, time_ids, freq_ids


class TestEncoderForward:
    def test_shape_contract_tiny(self, rng):
        model = EncoderModel(TINY, rng)
        patches, t_ids, f_ids = _batch(rng)
        masked = np.zeros((2, 8), bool)
        masked[:, :2] = True
        logits, emb = model.forward(patches, t_ids, f_ids, masked=masked)
        assert logits.shape == (2, 8, 32)
        assert emb.shape == (2, 8, 64)

    def test_invalid_head_config_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(hidden=10, ffn=16, layers=1, heads=3, codebook_size=8)

    def test_batch_permutation_equivariance(self, rng):
        model = EncoderModel(TINY, rng)
        patches, t_ids, f_ids = _batch(rng, b=4)
        logits, _ = model.forward(patches, t_ids, f_ids)
        perm = np.array([3, 1, 0, 2])
        logits_perm, _ = model.forward(patches[perm], t_ids[perm], f_ids[perm])
        np.testing.assert_array_equal(logits_perm.data, logits.data[perm])

    def test_mask_embedding_gets_zero_grad_without_masking(self, rng):
        model = EncoderModel(TINY, rng)
        patches, t_ids, f_ids = _batch(rng)
        model.zero_grad()
        logits, _ = model.forward(patches, t_ids, f_ids, masked=None)
        T.backward(T.tsum(logits ** 2.0))
        np.testing.assert_array_equal(model.mask_emb.grad, np.zeros(64))
        assert np.abs(model.patch_proj.weight.grad).max() > 0

    def test_mask_embedding_gets_grad_when_masked(self, rng):
        model = EncoderModel(TINY, rng)
        patches, t_ids, f_ids = _batch(rng)
        masked = np.zeros((2, 8), bool)
        masked[0, 3] = True
        model.zero_grad()
        logits, _ = model.forward(patches, t_ids, f_ids, masked=masked)
        T.backward(T.tsum(logits ** 2.0))
        assert np.abs(model.mask_emb.grad).max() > 0

    def test_padding_invariance(self, rng):
        model = EncoderModel(TINY, rng)
        patches, t_ids, f_ids = _batch(rng, b=1, n=6)
        base_logits, _ = model.forward(patches, t_ids, f_ids, valid=np.ones((1, 6), bool))
        padded = np.concatenate([patches, np.zeros((1, 3, 256), np.float32)], axis=1)
        t_pad = np.concatenate([t_ids, np.zeros((1, 3), np.int64)], axis=1)
        f_pad = np.concatenate([f_ids, np.zeros((1, 3), np.int64)], axis=1)
        valid = np.concatenate([np.ones((1, 6), bool), np.zeros((1, 3), bool)], axis=1)
        padded_logits, _ = model.forward(padded, t_pad, f_pad, valid=valid)
        np.testing.assert_allclose(padded_logits.data[0, :6], base_logits.data[0], atol=1e-5)

    def test_full_forward_backward_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        model = EncoderModel(MICRO, rng)
        params = model.parameters()
        for p in params.values():
            p.data = p.data.astype(np.float64)
        patches = np.random.default_rng(1).standard_normal((1, 4, 256))
        t_ids = np.arange(4)[None] // 8
        f_ids = np.arange(4)[None] % 8
        masked = np.array([[True, False, True, False]])
        tokens = np.array([[1, 0, 4, 2]])

        model.zero_grad()
        logits, _ = model.forward(patches, t_ids, f_ids, masked=masked)
        T.backward(mlm_loss(logits, tokens, masked))

        # spot-check three parameters against finite differences
        for name in ("mask_emb", "predictor.weight", "stack.blocks.0.attn.wq.weight"):
            p = params[name]

            def f():
                lg, _ = model.forward(patches, t_ids, f_ids, masked=masked)
                return float(mlm_loss(lg, tokens, masked).data)

            (numeric,) = numeric_gradient(f, [p.data])
            assert rel_error(p.grad, numeric) < FD_RTOL, name

    def test_extract_pooling_ignores_padding(self, rng):
        model = EncoderModel(TINY, rng)
        patches, t_ids, f_ids = _batch(rng, b=1, n=6)
        _, pooled = model.extract(patches, t_ids, f_ids, np.ones((1, 6), bool))
        padded = np.concatenate([patches, 9.0 * np.ones((1, 2, 256), np.float32)], axis=1)
        valid = np.concatenate([np.ones((1, 6), bool), np.zeros((1, 2), bool)], axis=1)
        t_pad = np.concatenate([t_ids, np.zeros((1, 2), np.int64)], axis=1)
        f_pad = np.concatenate([f_ids, np.zeros((1, 2), np.int64)], axis=1)
        _, pooled_padded = model.extract(padded, t_pad, f_pad, valid)
        np.testing.assert_allclose(pooled_padded, pooled, atol=1e-5)


class TestMlmLoss:
    def test_perfect_prediction_loss_vanishes(self):
        logits = np.full((1, 3, 4), -40.0, np.float64)
        tokens = np.array([[1, 2, 3]])
        for i, t in enumerate(tokens[0]):
            logits[0, i, t] = 40.0
        masked = np.ones((1, 3), bool)
        assert mlm_loss(T.Tensor(logits), tokens, masked).item() < 1e-8

    def test_uniform_logits_closed_form(self):
        logits = T.Tensor(np.zeros((2, 10, 32), np.float64))
        tokens = np.zeros((2, 10), np.int64)
        masked = np.zeros((2, 10), bool)
        masked[0, :6] = True
        masked[1, :4] = True  # |M| = 10 in total
        loss = mlm_loss(logits, tokens, masked)
        assert abs(loss.item() - 10 * np.log(32)) < 1e-9

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            mlm_loss(T.Tensor(np.zeros((1, 3, 4))), np.zeros((1, 3), np.int64), np.zeros((1, 3), bool))

    def test_equals_cross_entropy_restricted_to_mask(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((2, 5, 8))
        tokens = rng.integers(8, size=(2, 5))
        masked = rng.random((2, 5)) < 0.5
        masked[0, 0] = True
        loss = mlm_loss(T.Tensor(logits), tokens, masked)
        expected = scalar_cross_entropy(logits[masked], tokens[masked])
        assert abs(loss.item() - expected) < 1e-6


class TestMetrics:
    def test_all_correct(self):
        logits = np.eye(4)[None] * 10.0
        tokens = np.arange(4)[None]
        masked = np.ones((1, 4), bool)
        acc, _ = mlm_metrics(logits, tokens, masked)
        assert acc == 1.0

    def test_coverage_single_token(self):
        logits = np.zeros((1, 6, 32))
        tokens = np.zeros((1, 6), np.int64)
        masked = np.ones((1, 6), bool)
        _, cov = mlm_metrics(logits, tokens, masked)
        assert cov == 1 / 32

    def test_chance_level_accuracy(self):
        rng = np.random.default_rng(3)
        n = 10_000
        logits = rng.standard_normal((1, n, 32))
        tokens = rng.integers(32, size=(1, n))
        masked = np.ones((1, n), bool)
        acc, _ = mlm_metrics(logits, tokens, masked)
        assert abs(acc - 1 / 32) < 0.01


class TestEmbeddingDump:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        dumps = {"a": rng.standard_normal((5, 8)).astype(np.float32),
                 "b": rng.standard_normal((3, 8)).astype(np.float32)}
        write_embedding_dump(tmp_path / "e.bin", tmp_path / "e.json", dumps)
        loaded = read_embedding_dump(tmp_path / "e.bin", tmp_path / "e.json")
        for k in dumps:
            np.testing.assert_array_equal(loaded[k], dumps[k])
