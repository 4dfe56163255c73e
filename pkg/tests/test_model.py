"""Model forward/backward checks.

The reverse pass is hand-written, so every parameter family is checked
against central finite differences.  The folded-matmul attention forward is
pinned to the contraction kernels, which were themselves checked against
scalar loop oracles.
"""

import numpy as np
import pytest

from mqa_lab.attention import (
    MaskSpec,
    build_mask,
    multihead_attention_batched,
    multiquery_attention_batched,
    random_attention_weights,
)
from mqa_lab.config import ModelConfig
from mqa_lab.exceptions import InputError
from mqa_lab.model import (
    Batch,
    attention_forward,
    feed_forward,
    feed_forward_bwd,
    forward,
    init_params,
    layer_norm,
    layer_norm_bwd,
    loss_and_grads,
    named_arrays,
    param_count,
    tree_map,
    zeros_like_tree,
)


def tiny_config(**overrides):
    base = dict(mode="encoder_decoder", layers=1, d_model=8, d_ff=16,
                heads=2, d_k=4, d_v=4, vocab_size=11, max_len=12, init_seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def make_batch(config, rng, b=2, n_src=5, n_tgt=4):
    ids = lambda n: rng.integers(1, config.vocab_size, size=(b, n))
    source = ids(n_src) if config.has_encoder else None
    target = ids(n_tgt)
    target_in = np.concatenate([np.zeros((b, 1), dtype=np.int64),
                                target[:, :-1]], axis=1)
    mask = np.ones((b, n_tgt))
    mask[0, -1] = 0.0
    return Batch(source, target_in, target, mask)


class TestPrimitives:
    def test_layer_norm_normalizes(self, rng):
        x = rng.normal(size=(3, 5, 8)) * 4.0 + 2.0
        from mqa_lab.model import LayerNorm
        y, _ = layer_norm(x, LayerNorm(np.ones(8), np.zeros(8)))
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(y.var(axis=-1), 1.0, atol=1e-3)

    def test_layer_norm_gradients(self, rng):
        from mqa_lab.model import LayerNorm
        x = rng.normal(size=(2, 3, 6))
        ln = LayerNorm(rng.normal(size=6), rng.normal(size=6))
        proj = rng.normal(size=(2, 3, 6))
        y, cache = layer_norm(x, ln)
        dx, d_ln = layer_norm_bwd(proj, cache)
        eps = 1e-6
        for arr, grad in ((x, dx), (ln.gain, d_ln.gain), (ln.bias, d_ln.bias)):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            arr[idx] += eps
            up = (layer_norm(x, ln)[0] * proj).sum()
            arr[idx] -= 2 * eps
            down = (layer_norm(x, ln)[0] * proj).sum()
            arr[idx] += eps
            fd = (up - down) / (2 * eps)
            assert abs(grad[idx] - fd) < 1e-7 * max(1.0, abs(fd))

    def test_feed_forward_gradients(self, rng):
        from mqa_lab.model import FeedForward
        x = rng.normal(size=(2, 3, 4))
        ff = FeedForward(rng.normal(size=(4, 9)), rng.normal(size=(9, 4)))
        proj = rng.normal(size=(2, 3, 4))
        y, cache = feed_forward(x, ff)
        assert y.shape == (2, 3, 4)
        dx, d_ff = feed_forward_bwd(proj, cache, ff)
        eps = 1e-6
        for arr, grad in ((x, dx), (ff.w_in, d_ff.w_in), (ff.w_out, d_ff.w_out)):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            arr[idx] += eps
            up = (feed_forward(x, ff)[0] * proj).sum()
            arr[idx] -= 2 * eps
            down = (feed_forward(x, ff)[0] * proj).sum()
            arr[idx] += eps
            fd = (up - down) / (2 * eps)
            assert abs(grad[idx] - fd) < 1e-6 * max(1.0, abs(fd))


class TestFastAttentionMatchesKernels:
    """The training path must agree with the contraction kernels."""

    @pytest.mark.parametrize("kind", ["multi_head", "multi_query"])
    @pytest.mark.parametrize("mask_kind,window", [("none", None),
                                                  ("causal", None),
                                                  ("local", 2)])
    def test_self_attention_agrees(self, rng, kind, mask_kind, window):
        b, n, d, h, k, v = 2, 5, 8, 2, 3, 4
        w = random_attention_weights(rng, kind, d=d, h=h, k=k, v=v)
        x = rng.normal(size=(b, n, d))
        spec = MaskSpec(mask_kind, b, h, n, n, window=window)
        bias = None if mask_kind == "none" else build_mask(spec)[0, 0]
        fast, _ = attention_forward(x, x, w, bias)
        kernel = (multihead_attention_batched if kind == "multi_head"
                  else multiquery_attention_batched)
        slow = kernel(x, x, w, mask=spec)
        assert np.max(np.abs(fast - slow)) < 1e-10

    @pytest.mark.parametrize("kind", ["multi_head", "multi_query"])
    def test_cross_attention_agrees(self, rng, kind):
        b, n, m, d, h, k, v = 2, 3, 6, 8, 2, 4, 4
        w = random_attention_weights(rng, kind, d=d, h=h, k=k, v=v)
        x = rng.normal(size=(b, n, d))
        mem = rng.normal(size=(b, m, d))
        fast, _ = attention_forward(x, mem, w, None)
        kernel = (multihead_attention_batched if kind == "multi_head"
                  else multiquery_attention_batched)
        assert np.max(np.abs(fast - kernel(x, mem, w))) < 1e-10


class TestInitAndTrees:
    def test_init_deterministic(self):
        config = tiny_config()
        a, b = init_params(config), init_params(config)
        for (pa, xa), (pb, xb) in zip(named_arrays(a), named_arrays(b)):
            assert pa == pb
            assert np.array_equal(xa, xb)

    def test_init_seed_changes_values(self):
        a = init_params(tiny_config(init_seed=0))
        b = init_params(tiny_config(init_seed=1))
        assert not np.array_equal(a.embedding, b.embedding)

    def test_param_count_formula(self):
        config = tiny_config()
        params = init_params(config)
        d, dff, h, k, v = 8, 16, 2, 4, 4
        attn = 2 * h * d * (k + v)
        ln = 2 * d
        enc_block = ln + attn + ln + d * dff + dff * d
        dec_block = ln + attn + ln + attn + ln + d * dff + dff * d
        expected = (11 * d + 12 * d
                    + config.layers * (enc_block + dec_block)
                    + ln + ln)
        assert param_count(params) == expected

    def test_named_paths_unique_and_dotted(self):
        params = init_params(tiny_config())
        names = [name for name, _ in named_arrays(params)]
        assert len(names) == len(set(names))
        assert "embedding" in names
        assert "decoder.0.attn.p_q" in names
        assert "enc_out_ln.gain" in names

    def test_zeros_like_and_map_preserve_structure(self):
        params = init_params(tiny_config())
        zeros = zeros_like_tree(params)
        for (name, arr), (zname, zarr) in zip(named_arrays(params),
                                              named_arrays(zeros)):
            assert name == zname
            assert zarr.shape == arr.shape
            assert not zarr.any()
        doubled = tree_map(lambda a, b: a + b, params, params)
        assert np.allclose(doubled.embedding, 2 * params.embedding)
        assert doubled.decoder[0].attn.kind == params.decoder[0].attn.kind

    def test_decoder_only_has_no_encoder(self):
        params = init_params(tiny_config(mode="decoder_only"))
        assert params.encoder == []
        assert params.enc_out_ln is None
        assert params.decoder[0].cross is None


class TestForward:
    def test_logit_shape_and_loss_finite(self, rng):
        config = tiny_config()
        params = init_params(config)
        batch = make_batch(config, rng)
        result = forward(params, config, batch)
        assert result.logits.shape == (2, 4, config.vocab_size)
        assert np.isfinite(result.loss)

    def test_zero_params_give_uniform_loss(self, rng):
        config = tiny_config()
        params = zeros_like_tree(init_params(config))
        batch = make_batch(config, rng)
        result = forward(params, config, batch)
        assert abs(result.loss - np.log(config.vocab_size)) < 1e-12

    def test_loss_mask_drops_positions(self, rng):
        config = tiny_config()
        params = init_params(config)
        batch = make_batch(config, rng)
        # flipping a masked-out label must not move the loss
        loose = forward(params, config, batch).loss
        changed = batch.target_out.copy()
        changed[0, -1] = (changed[0, -1] + 1) % config.vocab_size
        other = Batch(batch.source, batch.target_in, changed, batch.loss_mask)
        assert forward(params, config, other).loss == pytest.approx(loose, abs=1e-15)

    @pytest.mark.parametrize("window", [None, 2])
    def test_decoder_causality(self, rng, window):
        config = tiny_config(mode="decoder_only", dec_self_window=window)
        params = init_params(config)
        b, n = 2, 6
        ids = rng.integers(1, config.vocab_size, size=(b, n))
        mask = np.ones((b, n))
        batch = Batch(None, ids, ids, mask)
        base = forward(params, config, batch).logits
        bumped = ids.copy()
        bumped[:, 4] = (bumped[:, 4] + 3) % config.vocab_size
        moved = forward(params, config, Batch(None, bumped, ids, mask)).logits
        assert np.array_equal(base[:, :4], moved[:, :4])
        assert not np.allclose(base[:, 4:], moved[:, 4:])

    def test_local_window_limits_history(self, rng):
        # with window 1 each position sees only itself, so logits at any
        # position depend on that token alone
        config = tiny_config(mode="decoder_only", dec_self_window=1, layers=2)
        params = init_params(config)
        ids = rng.integers(1, config.vocab_size, size=(1, 5))
        mask = np.ones((1, 5))
        base = forward(params, config, Batch(None, ids, ids, mask)).logits
        bumped = ids.copy()
        bumped[0, 0] = (bumped[0, 0] + 1) % config.vocab_size
        moved = forward(params, config, Batch(None, bumped, ids, mask)).logits
        assert not np.allclose(base[:, 0], moved[:, 0])
        assert np.array_equal(base[:, 1:], moved[:, 1:])

    def test_bad_inputs_rejected(self, rng):
        config = tiny_config()
        params = init_params(config)
        batch = make_batch(config, rng)
        with pytest.raises(InputError):
            forward(params, config, Batch(None, batch.target_in,
                                          batch.target_out, batch.loss_mask))
        big = batch.target_in.copy()
        big[0, 0] = config.vocab_size
        with pytest.raises(InputError):
            forward(params, config, Batch(batch.source, big,
                                          batch.target_out, batch.loss_mask))
        with pytest.raises(InputError):
            forward(params, config, Batch(batch.source, batch.target_in,
                                          batch.target_out,
                                          np.zeros_like(batch.loss_mask)))
        long_ids = rng.integers(1, config.vocab_size,
                                size=(2, config.max_len + 1))
        with pytest.raises(InputError):
            forward(params, config, Batch(batch.source, long_ids, long_ids,
                                          np.ones_like(long_ids, dtype=float)))


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def finite_difference_check(config, batch, coords_per_array=3, eps=1e-5,
                            tol=1e-6):
    params = init_params(config)
    loss, logits, grads = loss_and_grads(params, config, batch)
    assert np.isfinite(loss)
    got = dict(named_arrays(grads))
    sampler = np.random.default_rng(99)
    worst = 0.0
    for name, arr in named_arrays(params):
        grad = got[name]
        assert grad.shape == arr.shape, name
        for _ in range(min(coords_per_array, arr.size)):
            idx = tuple(sampler.integers(0, s) for s in arr.shape)
            keep = arr[idx]
            arr[idx] = keep + eps
            up = forward(params, config, batch).loss
            arr[idx] = keep - eps
            down = forward(params, config, batch).loss
            arr[idx] = keep
            fd = (up - down) / (2 * eps)
            err = relative_error(grad[idx], fd)
            worst = max(worst, err)
            assert err < tol, f"{name}[{idx}]: analytic {grad[idx]} vs fd {fd}"
    return worst


class TestGradients:
    """Central finite differences over every parameter family."""

    @pytest.mark.parametrize("kind", ["multi_head", "multi_query"])
    def test_encoder_decoder_grads(self, rng, kind):
        config = tiny_config(enc_self_kind=kind, dec_self_kind=kind,
                             cross_kind=kind)
        batch = make_batch(config, rng)
        finite_difference_check(config, batch)

    def test_mixed_kind_grads(self, rng):
        config = tiny_config(enc_self_kind="multi_head",
                             dec_self_kind="multi_query",
                             cross_kind="multi_query")
        batch = make_batch(config, rng)
        finite_difference_check(config, batch)

    @pytest.mark.parametrize("kind", ["multi_head", "multi_query"])
    def test_decoder_only_grads(self, rng, kind):
        config = tiny_config(mode="decoder_only", dec_self_kind=kind)
        batch = make_batch(config, rng)
        finite_difference_check(config, batch)

    def test_local_window_grads(self, rng):
        config = tiny_config(mode="decoder_only", dec_self_window=2)
        batch = make_batch(config, rng)
        finite_difference_check(config, batch)

    def test_two_layer_grads(self, rng):
        config = tiny_config(layers=2)
        batch = make_batch(config, rng)
        finite_difference_check(config, batch)

    def test_loss_matches_forward(self, rng):
        config = tiny_config()
        params = init_params(config)
        batch = make_batch(config, rng)
        loss, logits, _ = loss_and_grads(params, config, batch)
        result = forward(params, config, batch)
        assert loss == pytest.approx(result.loss, abs=0)
        assert np.array_equal(logits, result.logits)

    def test_unused_position_rows_get_zero_grad(self, rng):
        config = tiny_config()
        batch = make_batch(config, rng)
        params = init_params(config)
        _, _, grads = loss_and_grads(params, config, batch)
        # longest stream in the batch has 5 positions
        assert not grads.positions[5:].any()
        assert grads.positions[:4].any()
