"""Encoder forward/backward, initialisation, and checkpoint IO."""

import numpy as np
import pytest

from morphgen import model
from morphgen.model import (
    ArchConfig,
    backward,
    classify,
    encode,
    from_vector,
    head_backward,
    init_params,
    load_checkpoint,
    n_parameters,
    parameter_manifest,
    replicate_mask_channels,
    save_checkpoint,
    to_vector,
)

TOY = ArchConfig(channels=(4, 6), embed_dim=8)


class TestInit:
    def test_deterministic_in_seed(self):
        e1, h1 = init_params(TOY, 42)
        e2, h2 = init_params(TOY, 42)
        assert np.array_equal(to_vector(e1, h1), to_vector(e2, h2))

    def test_different_seeds_differ(self):
        e1, h1 = init_params(TOY, 1)
        e2, h2 = init_params(TOY, 2)
        assert not np.array_equal(to_vector(e1, h1), to_vector(e2, h2))

    def test_biases_zero(self):
        enc, head = init_params(TOY, 3)
        for block in enc.conv_blocks:
            assert np.all(block.bias == 0.0)
        assert np.all(enc.proj_bias == 0.0)
        assert head.bias == 0.0

    def test_he_variance_within_20pct(self):
        arch = ArchConfig(channels=(16, 32, 64), embed_dim=128)
        enc, _ = init_params(arch, 7)
        for block in enc.conv_blocks:
            k, _, cin, _ = block.kernels.shape
            if block.kernels.size < 1000:
                continue
            target = 2.0 / (k * k * cin)
            assert block.kernels.var() == pytest.approx(target, rel=0.2)
        target = 2.0 / enc.proj_weight.shape[0]
        assert enc.proj_weight.var() == pytest.approx(target, rel=0.2)

    def test_invalid_arch_rejected(self):
        with pytest.raises(ValueError):
            ArchConfig(kernel_size=2)
        with pytest.raises(ValueError):
            ArchConfig(channels=())
        with pytest.raises(ValueError):
            ArchConfig(embed_dim=0)


class TestEncode:
    def test_output_shape(self):
        enc, _ = init_params(TOY, 0)
        z, _ = encode(enc, np.zeros((5, 32, 32, 3)), TOY)
        assert z.shape == (5, TOY.embed_dim)

    def test_zero_projection_gives_zero_embeddings(self):
        enc, _ = init_params(TOY, 0)
        enc.proj_weight[:] = 0.0
        enc.proj_bias[:] = 0.0
        rng = np.random.default_rng(0)
        z, _ = encode(enc, rng.random((3, 32, 32, 3)), TOY)
        assert np.all(z == 0.0)

    def test_identical_rows_identical_embeddings(self):
        enc, _ = init_params(TOY, 1)
        rng = np.random.default_rng(1)
        row = rng.random((1, 32, 32, 3))
        batch = np.concatenate([row, rng.random((1, 32, 32, 3)), row])
        z, _ = encode(enc, batch, TOY)
        assert np.array_equal(z[0], z[2])

    def test_bitwise_reproducible(self):
        enc, _ = init_params(TOY, 2)
        rng = np.random.default_rng(2)
        batch = rng.random((4, 32, 32, 3))
        z1, _ = encode(enc, batch, TOY)
        z2, _ = encode(enc, batch, TOY)
        assert np.array_equal(z1, z2)

    def test_shape_mismatch_rejected(self):
        enc, _ = init_params(TOY, 0)
        with pytest.raises(ValueError):
            encode(enc, np.zeros((2, 32, 32, 1)), TOY)

    def test_nonfinite_input_rejected(self):
        enc, _ = init_params(TOY, 0)
        bad = np.zeros((1, 32, 32, 3))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            encode(enc, bad, TOY)

    def test_mask_replication(self):
        mask = np.zeros((2, 16, 16, 1))
        mask[0, 3, 4, 0] = 1
        rep = replicate_mask_channels(mask)
        assert rep.shape == (2, 16, 16, 3)
        assert np.all(rep[0, 3, 4] == 1.0)
        assert rep.sum() == 3.0


class TestClassify:
    def test_zero_head_gives_half(self):
        head = model.HeadParams(weight=np.zeros(4), bias=0.0)
        p, _ = classify(head, np.random.default_rng(0).random((6, 4)))
        assert np.all(p == 0.5)

    def test_sigmoid_value(self):
        head = model.HeadParams(weight=np.array([1.0]), bias=0.0)
        p, _ = classify(head, np.array([[0.8473]]))
        # logit ln(7/3) = 0.84729786... maps to 0.70
        assert p[0] == pytest.approx(0.7, abs=1e-5)

    def test_monotone_in_logit(self):
        head = model.HeadParams(weight=np.array([2.0, -1.0]), bias=0.3)
        z = np.array([[0.1, 0.5], [0.2, 0.5], [0.3, 0.5]])
        p, logits = classify(head, z)
        assert np.all(np.diff(logits) > 0)
        assert np.all(np.diff(p) > 0)

    def test_probabilities_in_open_interval(self):
        head = model.HeadParams(weight=np.array([1.0]), bias=0.0)
        p, _ = classify(head, np.array([[30.0], [-30.0]]))
        assert 0.0 < p[1] < p[0] < 1.0


def _loss_through_encoder(vec, arch, batch, dz_seed=0):
    """Scalar probe loss sum(z * G) for a fixed random G."""
    enc, _ = from_vector(vec, arch)
    z, _ = encode(enc, batch, arch)
    g = np.random.default_rng(dz_seed).standard_normal(z.shape)
    return float(np.sum(z * g))


class TestBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_parameter_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        enc, head = init_params(TOY, seed)
        batch = rng.random((4, 32, 32, 3))
        z, cache = encode(enc, batch, TOY)
        g = np.random.default_rng(0).standard_normal(z.shape)
        grads, _ = backward(enc, cache, g, TOY)
        gvec = model.grads_to_vector(grads, np.zeros(TOY.embed_dim), 0.0)
        vec = to_vector(enc, head)

        eps = 1e-5
        n_enc = vec.size - TOY.embed_dim - 1  # head params excluded
        for i in rng.choice(n_enc, size=40, replace=False):
            vp, vm = vec.copy(), vec.copy()
            vp[i] += eps
            vm[i] -= eps
            fd = (_loss_through_encoder(vp, TOY, batch)
                  - _loss_through_encoder(vm, TOY, batch)) / (2 * eps)
            assert gvec[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_input_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        enc, _ = init_params(TOY, 3)
        batch = rng.random((2, 32, 32, 3))
        z, cache = encode(enc, batch, TOY)
        g = np.random.default_rng(0).standard_normal(z.shape)
        _, dx = backward(enc, cache, g, TOY, need_input_grad=True)

        def value(b):
            zz, _ = encode(enc, b, TOY)
            return float(np.sum(zz * g))

        eps = 1e-6
        for _ in range(20):
            idx = tuple(rng.integers(0, s) for s in batch.shape)
            bp, bm = batch.copy(), batch.copy()
            bp[idx] += eps
            bm[idx] -= eps
            fd = (value(bp) - value(bm)) / (2 * eps)
            assert dx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_zero_upstream_gives_zero_grads(self):
        enc, _ = init_params(TOY, 4)
        batch = np.random.default_rng(4).random((2, 32, 32, 3))
        z, cache = encode(enc, batch, TOY)
        grads, dx = backward(enc, cache, np.zeros_like(z), TOY,
                             need_input_grad=True)
        assert np.all(model.grads_to_vector(
            grads, np.zeros(TOY.embed_dim), 0.0) == 0.0)
        assert np.all(dx == 0.0)

    def test_cache_reuse_rejected(self):
        enc, _ = init_params(TOY, 5)
        batch = np.random.default_rng(5).random((2, 32, 32, 3))
        z, cache = encode(enc, batch, TOY)
        backward(enc, cache, np.zeros_like(z), TOY)
        with pytest.raises(RuntimeError, match="consumed"):
            backward(enc, cache, np.zeros_like(z), TOY)

    def test_head_backward_linear_model_input_gradient(self):
        # input gradient of w . x through an identity "encoder" is w itself
        head = model.HeadParams(weight=np.array([2.0, -3.0, 0.5]), bias=0.1)
        z = np.array([[0.3, 0.6, -0.2]])
        _, _, dz = head_backward(head, z, np.ones(1))
        assert np.array_equal(dz[0], head.weight)


class TestVectorRoundTrip:
    def test_round_trip_exact(self):
        enc, head = init_params(TOY, 6)
        head = model.HeadParams(
            weight=np.random.default_rng(0).standard_normal(TOY.embed_dim),
            bias=0.25)
        vec = to_vector(enc, head)
        enc2, head2 = from_vector(vec, TOY)
        assert np.array_equal(vec, to_vector(enc2, head2))

    def test_manifest_covers_all_parameters(self):
        total = sum(int(np.prod(s)) for _, s in parameter_manifest(TOY))
        assert total == n_parameters(TOY)
        enc, head = init_params(TOY, 0)
        assert to_vector(enc, head).size == total

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            from_vector(np.zeros(n_parameters(TOY) + 1), TOY)


class TestCheckpoint:
    def test_save_load_resave_byte_identical(self, tmp_path):
        enc, head = init_params(TOY, 7)
        save_checkpoint(tmp_path / "ck", TOY, enc, head,
                        extra={"adam_m": np.arange(3.0)},
                        meta={"objective": "morphgen"})
        first = {p.name: p.read_bytes() for p in (tmp_path / "ck").iterdir()}
        arch, enc2, head2, extra, meta = load_checkpoint(tmp_path / "ck")
        save_checkpoint(tmp_path / "ck2", arch, enc2, head2, extra=extra,
                        meta=meta)
        second = {p.name: p.read_bytes() for p in (tmp_path / "ck2").iterdir()}
        assert first == second

    def test_load_accepts_header_path(self, tmp_path):
        enc, head = init_params(TOY, 8)
        save_checkpoint(tmp_path / "ck", TOY, enc, head)
        arch, _, _, _, _ = load_checkpoint(tmp_path / "ck" / "header.json")
        assert arch == TOY

    def test_params_blob_is_float32_le(self, tmp_path):
        enc, head = init_params(TOY, 9)
        save_checkpoint(tmp_path / "ck", TOY, enc, head)
        blob = (tmp_path / "ck" / "params.f32").read_bytes()
        assert len(blob) == 4 * n_parameters(TOY)
        loaded = np.frombuffer(blob, dtype="<f4")
        assert np.array_equal(loaded,
                              to_vector(enc, head).astype("<f4"))

    def test_schema_version_mismatch_rejected(self, tmp_path):
        enc, head = init_params(TOY, 10)
        save_checkpoint(tmp_path / "ck", TOY, enc, head)
        header = (tmp_path / "ck" / "header.json").read_text()
        (tmp_path / "ck" / "header.json").write_text(
            header.replace('"schema_version": 1', '"schema_version": 99'))
        with pytest.raises(ValueError, match="schema"):
            load_checkpoint(tmp_path / "ck")
