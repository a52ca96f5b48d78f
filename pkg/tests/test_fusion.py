import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locfuse import tensor as T
from locfuse.backbone import Backbone, BackboneConfig
from locfuse.fusion import (AttentionRecord, EmptyPromptError, FusedPrompt, FusionWeights, PromptFuser,
                            assemble_canvas, embed_patches, fuse, locality_attention, self_align)
from locfuse.locality import LocalityConfig, PriorKind, all_centers

def rand_weights(dim, seed):
    with T.precision("float64"):
        return FusionWeights(dim, seed)


def vanilla_attention(fq, fx, fy, w):
    """Plain cross-attention: keys from prompt images, two value streams."""
    b, n, gh, gw, d = fx.shape
    q = fq.reshape(b, gh * gw, d) @ w["W_Q"].data
    k = fx.reshape(b, n * gh * gw, d) @ w["W_K"].data
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    vx = fx.reshape(b, n * gh * gw, d) @ w["W_VX"].data
    vy = fy.reshape(b, n * gh * gw, d) @ w["W_VY"].data
    return a, (a @ vx).reshape(b, gh, gw, d), (a @ vy).reshape(b, gh, gw, d)


def run(fq, fx, fy, w, cfg):
    att = locality_attention(T.Tensor(fq), T.Tensor(fx), cfg, w)
    fused = fuse(att, T.Tensor(fx), T.Tensor(fy), w)
    return att, fused


def sample(rng, b=2, n=3, g=3, d=4):
    return (rng.normal(size=(b, g, g, d)), rng.normal(size=(b, n, g, g, d)), rng.normal(size=(b, n, g, g, d)))


def test_zero_query_projection_gives_uniform_attention(f64):
    rng = np.random.default_rng(0)
    w = rand_weights(4, 0)
    w.params["W_Q"] = T.Tensor(np.zeros((4, 4)))
    fq, fx, fy = sample(rng)
    att, _ = run(fq, fx, fy, w, LocalityConfig(sigma=0.65))
    np.testing.assert_allclose(att.weights.data, 1 / (3 * 9), atol=1e-15)


def test_closed_form_two_keys(f64):
    # two keys with pre-prior score 2; the second key sits one cell away with psi = 0.5
    sigma = 1 / math.sqrt(2 * math.log(2))
    d = 1
    fq = np.ones((1, 1, 2, d)) * math.sqrt(2.0)
    fx = np.ones((1, 1, 1, 2, d)) * math.sqrt(2.0)
    w = rand_weights(d, 0)
    for k in w.params:
        w.params[k] = T.Tensor(np.eye(d))
    att = locality_attention(T.Tensor(fq), T.Tensor(fx), LocalityConfig(sigma=sigma), w)
    np.testing.assert_allclose(att.weights.data[0, 0], [0.731059, 0.268941], atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_flat_prior_equals_vanilla_cross_attention(seed, f64):
    rng = np.random.default_rng(seed)
    w = rand_weights(4, seed)
    fq, fx, fy = sample(rng)
    att, fused = run(fq, fx, fy, w, LocalityConfig(sigma=1e6))
    a, vx, vy = vanilla_attention(fq, fx, fy, w)
    np.testing.assert_allclose(att.weights.data, a, atol=1e-6)
    np.testing.assert_allclose(fused.fx.data, vx, atol=1e-5)
    np.testing.assert_allclose(fused.fy.data, vy, atol=1e-5)


def test_brute_force_triple_loop(f64):
    rng = np.random.default_rng(3)
    b, n, gh, gw, d = 1, 2, 2, 2, 3
    w = rand_weights(d, 3)
    fq, fx, fy = rng.normal(size=(b, gh, gw, d)), rng.normal(size=(b, n, gh, gw, d)), rng.normal(size=(b, n, gh, gw, d))
    sigma = 0.8
    _, fused = run(fq, fx, fy, w, LocalityConfig(sigma=sigma))
    WQ, WK, WVX, WVY = (w[k].data for k in ("W_Q", "W_K", "W_VX", "W_VY"))
    for h in range(gh):
        for x in range(gw):
            q = [sum(fq[0, h, x, i] * WQ[i, j] for i in range(d)) for j in range(d)]
            scores, vxs, vys = [], [], []
            for p in range(n):
                for u in range(gh):
                    for v in range(gw):
                        k = [sum(fx[0, p, u, v, i] * WK[i, j] for i in range(d)) for j in range(d)]
                        prior = math.exp(-((u - h) ** 2 + (v - x) ** 2) / (2 * sigma * sigma))
                        scores.append(sum(a * c for a, c in zip(q, k)) / math.sqrt(d) * prior)
                        vxs.append([sum(fx[0, p, u, v, i] * WVX[i, j] for i in range(d)) for j in range(d)])
                        vys.append([sum(fy[0, p, u, v, i] * WVY[i, j] for i in range(d)) for j in range(d)])
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(d):
                assert fused.fx.data[0, h, x, j] == pytest.approx(sum(e[k] / z * vxs[k][j] for k in range(len(e))), abs=1e-6)
                assert fused.fy.data[0, h, x, j] == pytest.approx(sum(e[k] / z * vys[k][j] for k in range(len(e))), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.sampled_from([0.01, 0.65, 2.5, 100.0]),
       st.sampled_from(list(PriorKind)))
def test_duplicate_and_permutation_invariance(seed, copies, sigma, kind):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        w = FusionWeights(4, seed % 1000)
        cfg = LocalityConfig(kind, sigma)
        fq, fx, fy = sample(rng, b=1, n=3)
        _, base = run(fq, fx, fy, w, cfg)
        _, dup = run(fq, np.concatenate([fx] * copies, 1), np.concatenate([fy] * copies, 1), w, cfg)
        perm = rng.permutation(3)
        _, shuf = run(fq, fx[:, perm], fy[:, perm], w, cfg)
    for other in (dup, shuf):
        np.testing.assert_allclose(other.fx.data, base.fx.data, atol=1e-5)
        np.testing.assert_allclose(other.fy.data, base.fy.data, atol=1e-5)


def test_single_prompt_duplicates_match_n1(f64):
    rng = np.random.default_rng(8)
    w = rand_weights(4, 8)
    fq, fx, fy = sample(rng, n=1)
    _, one = run(fq, fx, fy, w, LocalityConfig())
    _, many = run(fq, np.repeat(fx, 5, axis=1), np.repeat(fy, 5, axis=1), w, LocalityConfig())
    np.testing.assert_allclose(many.fx.data, one.fx.data, atol=1e-5)
    np.testing.assert_allclose(many.fy.data, one.fy.data, atol=1e-5)


def test_label_perturbation_leaves_keys_bitwise_unchanged():
    rng = np.random.default_rng(4)
    w = FusionWeights(4, 4)
    fq, fx, fy = (a.astype(np.float32) for a in sample(rng))
    att, fused = run(fq, fx, fy, w, LocalityConfig())
    att2, fused2 = run(fq, fx, fy + rng.normal(size=fy.shape).astype(np.float32), w, LocalityConfig())
    assert att.weights.data.tobytes() == att2.weights.data.tobytes()
    assert fused.fx.data.tobytes() == fused2.fx.data.tobytes()
    assert not np.array_equal(fused.fy.data, fused2.fy.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.01, 0.65, 1e6]))
def test_row_stochastic_and_convex(seed, sigma):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        w = FusionWeights(3, seed % 997)
        fq, fx, fy = sample(rng, b=1, n=2, g=2, d=3)
        att, fused = run(fq, fx, fy, w, LocalityConfig(sigma=sigma))
    a = att.weights.data[0]
    assert (a >= 0).all()
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    # convex-hull membership certificate: the attention row itself
    vx = fx.reshape(-1, 3) @ w["W_VX"].data
    vy = fy.reshape(-1, 3) @ w["W_VY"].data
    np.testing.assert_allclose(a @ vx, fused.fx.data[0].reshape(-1, 3), atol=1e-12)
    np.testing.assert_allclose(a @ vy, fused.fy.data[0].reshape(-1, 3), atol=1e-12)


def test_one_hot_attention_selects_value(f64):
    rng = np.random.default_rng(5)
    w = rand_weights(4, 5)
    fx, fy = rng.normal(size=(1, 2, 2, 2, 4)), rng.normal(size=(1, 2, 2, 2, 4))
    a = np.zeros((1, 4, 8))
    a[0, :, 6] = 1.0
    fused = fuse(AttentionRecord(T.Tensor(a), (2, 2), 2), T.Tensor(fx), T.Tensor(fy), w)
    expected_x = fx[0, 1, 1, 0] @ w["W_VX"].data
    expected_y = fy[0, 1, 1, 0] @ w["W_VY"].data
    np.testing.assert_allclose(fused.fx.data[0].reshape(4, 4), np.tile(expected_x, (4, 1)), atol=1e-12)
    np.testing.assert_allclose(fused.fy.data[0].reshape(4, 4), np.tile(expected_y, (4, 1)), atol=1e-12)


def test_shape_errors():
    w = FusionWeights(4)
    att = locality_attention(T.Tensor(np.ones((1, 2, 2, 4))), T.Tensor(np.ones((1, 1, 2, 2, 4))), LocalityConfig(), w)
    with pytest.raises(T.DimensionError):
        fuse(att, T.Tensor(np.ones((1, 1, 2, 2, 4))), T.Tensor(np.ones((1, 1, 2, 3, 4))), w)
    with pytest.raises(T.DimensionError):
        fuse(att, T.Tensor(np.ones((1, 2, 2, 2, 4))), T.Tensor(np.ones((1, 2, 2, 2, 4))), w)
    with pytest.raises(T.DimensionError):
        locality_attention(T.Tensor(np.ones((1, 3, 3, 4))), T.Tensor(np.ones((1, 1, 2, 2, 4))), LocalityConfig(), w)


def test_self_align_examples(f64):
    rng = np.random.default_rng(6)
    w = rand_weights(4, 6)
    x = rng.normal(size=(2, 3, 3, 4))
    assert self_align(T.Tensor(x), w).shape == x.shape
    zero = rand_weights(4, 6)
    for k in ("sa.q", "sa.k", "sa.v", "sa.o"):
        zero.params[k] = T.Tensor(np.zeros((4, 4)))
    np.testing.assert_array_equal(self_align(T.Tensor(x), zero).data, x)
    one = rng.normal(size=(1, 1, 4))
    expected = one + one @ w["sa.v"].data @ w["sa.o"].data
    np.testing.assert_allclose(self_align(T.Tensor(one), w).data, expected, atol=1e-12)


def test_self_align_is_per_sub_image(f64):
    rng = np.random.default_rng(7)
    w = rand_weights(4, 7)
    x = rng.normal(size=(3, 2, 2, 4))
    joint = self_align(T.Tensor(x), w).data
    for i in range(3):
        np.testing.assert_allclose(joint[i], self_align(T.Tensor(x[i]), w).data, atol=1e-12)


def test_assemble_canvas_layout():
    g, d = 2, 3
    blocks = [T.Tensor(np.full((1, g, g, d), v)) for v in (1.0, 2.0, 3.0)]
    mask = T.Tensor(np.array([7.0, 8.0, 9.0]))
    canvas = assemble_canvas(FusedPrompt(blocks[0], blocks[1]), blocks[2], mask).data
    assert canvas.shape == (1, 2 * g, 2 * g, d)
    assert (canvas[0, :g, :g] == 1).all() and (canvas[0, :g, g:] == 2).all() and (canvas[0, g:, :g] == 3).all()
    np.testing.assert_array_equal(canvas[0, g:, g:].reshape(-1, d), np.tile([7.0, 8.0, 9.0], (g * g, 1)))
    with pytest.raises(T.DimensionError):
        assemble_canvas(FusedPrompt(blocks[0], T.Tensor(np.ones((1, g, g + 1, d)))), blocks[2], mask)


def test_embed_patches_examples():
    bb = Backbone(BackboneConfig(patch_size=4, grid=8, dim=8), seed=0)
    zero = embed_patches(np.zeros((32, 32, 3), np.float32), bb).data
    assert zero.shape == (8, 8, 8)
    expected = bb.params["embed.bias"].data + bb.params["embed.sub_pos"].data.reshape(8, 8, 8)
    np.testing.assert_allclose(zero, expected, atol=1e-6)
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    other = img.copy()
    other[8:12, 20:24] = 0.0
    diff = np.abs(embed_patches(img, bb).data - embed_patches(other, bb).data).sum(-1)
    assert set(zip(*np.nonzero(diff))) == {(2, 5)}
    with pytest.raises(ValueError):
        embed_patches(np.zeros((30, 32, 3)), bb)


@pytest.mark.parametrize("n", [1, 2, 4, 7, 32])
def test_forward_shapes(n):
    bb = Backbone(BackboneConfig(patch_size=4, grid=8, dim=8), seed=0).freeze()
    fuser = PromptFuser(8, LocalityConfig(), seed=0)
    rng = np.random.default_rng(n)
    q = rng.random((2, 32, 32, 3)).astype(np.float32)
    p = rng.random((2, n, 32, 32, 3)).astype(np.float32)
    fused, fq, att = fuser.forward(q, p, p, bb)
    assert fused.fx.shape == fused.fy.shape == fq.shape == (2, 8, 8, 8)
    assert att.weights.shape == (2, 64, n * 64)


def test_forward_deterministic_and_needs_prompts():
    bb = Backbone(BackboneConfig(patch_size=4, grid=8, dim=8), seed=0).freeze()
    rng = np.random.default_rng(0)
    q = rng.random((1, 32, 32, 3)).astype(np.float32)
    p = rng.random((1, 3, 32, 32, 3)).astype(np.float32)
    outs = []
    for _ in range(2):
        fused, _, att = PromptFuser(8, LocalityConfig(), seed=3).forward(q, p, p, bb)
        outs.append(fused.fx.data.tobytes() + fused.fy.data.tobytes() + att.weights.data.tobytes())
    assert outs[0] == outs[1]
    with pytest.raises(EmptyPromptError):
        PromptFuser(8, LocalityConfig()).forward(q, p[:, :0], p[:, :0], bb)


def test_fixed_prior_table_is_replicated_across_prompts(f64):
    rng = np.random.default_rng(9)
    w = rand_weights(4, 9)
    fq, fx, fy = sample(rng, b=1, n=2, g=3)
    cfg = LocalityConfig(sigma=0.65)
    att, _ = run(fq, fx, fy, w, cfg)
    q = fq.reshape(1, 9, 4) @ w["W_Q"].data
    k = fx.reshape(1, 18, 4) @ w["W_K"].data
    s = (q @ np.swapaxes(k, -1, -2)) / 2.0 * np.tile(all_centers(3, 3, cfg), (1, 2))
    a = np.exp(s - s.max(-1, keepdims=True))
    np.testing.assert_allclose(att.weights.data, a / a.sum(-1, keepdims=True), atol=1e-12)
