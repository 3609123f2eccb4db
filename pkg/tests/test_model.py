import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssamba import model as m
from ssamba import numerics as nx
from ssamba.model import CapacityError, EncoderModel
from ssamba.numerics import ContractError, DimensionError, DomainError, Tensor

NANO = m.preset("nano")


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


# -- config and parameter counts -----------------------------------------

def test_presets():
    assert (m.preset("tiny").embed_dim, m.preset("tiny").depth) == (192, 24)
    assert (m.preset("small").embed_dim, m.preset("base").embed_dim) == (384, 768)
    assert (NANO.embed_dim, NANO.depth) == (64, 4)
    with pytest.raises(ValueError):
        m.preset("huge")
    with pytest.raises(ValueError):
        m.ModelConfig(embed_dim=0)


def symbolic_count(D, depth, M_max=504, E=2, N=16, k=4):
    ED, r = E * D, math.ceil(D / 16)
    per_direction = ED * k + ED + 2 * ED * N + ED * r + r * ED + ED + ED * N + ED
    block = D + 2 * D * ED + 2 * per_direction + ED * D
    return 256 * D + D + M_max * D + D + depth * block + D


def test_nano_count_matches_formula():
    assert m.count_params(NANO) == symbolic_count(64, 4)
    assert m.count_params(NANO) == EncoderModel.init(NANO).num_params()


@pytest.mark.parametrize("name,lo,hi", [("tiny", 6.3e6, 7.7e6), ("small", 23.4e6, 28.6e6),
                                        ("base", 89e6, 109e6)])
def test_preset_counts_in_bands(name, lo, hi):
    n = m.count_params(m.preset(name))
    assert lo <= n <= hi
    assert n == symbolic_count(m.preset(name).embed_dim, 24)


def test_heads_excluded_from_count():
    heads = m.init_heads(NANO, np.random.default_rng(0))
    assert {h.shape for h in heads.values()} >= {(64, 64), (64, 256), (256,)}
    assert m.count_params(NANO) == sum(math.prod(s) for s in m.encoder_param_shapes(NANO).values())


# -- embedding, positions, masking --------------------------------------

def test_embed_identity():
    x = rand(5, 256)
    assert np.array_equal(m.embed(x, np.eye(256, dtype=np.float32), np.zeros(256, np.float32)).data, x)


def test_embed_zero_patches_give_bias():
    b = rand(8)
    out = m.embed(np.zeros((3, 256), np.float32), rand(256, 8), b).data
    assert np.array_equal(out, np.tile(b, (3, 1)))


def test_embed_dimension_error():
    with pytest.raises(DimensionError):
        m.embed(rand(3, 255), rand(256, 8))


def test_embed_gradient():
    x = np.random.default_rng(1).standard_normal((3, 256)) * 0.1
    err = nx.gradient_check(lambda W, b: nx.tsum(nx.silu(m.embed(x, W, b))),
                            [np.random.default_rng(2).standard_normal((256, 4)) * 0.1, np.zeros(4)])
    assert err < 1e-4


def test_positional_zero_and_identity():
    E, P = rand(6, 8), rand(10, 8, seed=1)
    assert np.array_equal(m.add_positional(E, np.zeros((10, 8), np.float32)).data, E)
    assert np.array_equal(m.add_positional(np.zeros((6, 8), np.float32), P).data, P[:6])


def test_positional_capacity():
    with pytest.raises(CapacityError):
        m.add_positional(rand(11, 8), rand(10, 8))


def test_mask_empty_full_single():
    E, emb = rand(6, 8), rand(8, seed=3)
    assert np.array_equal(m.apply_mask(E, np.array([], dtype=int), emb).data, E)
    assert np.array_equal(m.apply_mask(E, np.arange(6), emb).data, np.tile(emb, (6, 1)))
    out = m.apply_mask(E, np.array([3]), emb).data
    assert np.array_equal(out[3], emb)
    assert np.array_equal(np.delete(out, 3, axis=0), np.delete(E, 3, axis=0))


@pytest.mark.parametrize("idx", [[1, 1], [6], [-1]])
def test_mask_rejects_bad_indices(idx):
    with pytest.raises(ContractError):
        m.apply_mask(rand(6, 8), np.array(idx), rand(8))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.data())
def test_mask_locality(M, data):
    E, emb = rand(M, 4, seed=M), rand(4, seed=99)
    idx = np.array(sorted(data.draw(st.sets(st.integers(0, M - 1)))), dtype=int)
    out = m.apply_mask(E, idx, emb).data
    keep = np.setdiff1d(np.arange(M), idx)
    assert out[keep].tobytes() == E[keep].tobytes()
    assert np.all(out[idx] == emb)


def test_batched_mask():
    E, emb = rand(2, 5, 4), rand(4, seed=1)
    out = m.apply_mask(E, np.array([[0, 2], [1, 4]]), emb).data
    assert np.array_equal(out[0, 2], emb) and np.array_equal(out[1, 4], emb)
    assert np.array_equal(out[1, 0], E[1, 0])


# -- encoder ----------------------------------------------------------------

def test_depth_zero_is_final_norm():
    cfg = replace(NANO, depth=0)
    model = EncoderModel.init(cfg)
    E = rand(7, 64)
    assert np.array_equal(m.encode(E, model.params, cfg).data,
                          nx.rms_norm(E, model.params["final_norm.g"]).data)


@pytest.mark.parametrize("M", [1, 5, 104])
def test_encoder_shape(M):
    assert EncoderModel.init(NANO)(rand(M, 256)).shape == (M, 64)


def test_encoder_golden_values():
    model = EncoderModel.init(NANO, seed=7)
    x = nx.make_rng(0, "golden").standard_normal((24, 256)).astype(np.float32)
    H = model(x).data
    assert float(H.astype(np.float64).sum()) == pytest.approx(35.03066070697969, abs=1e-4)
    assert np.allclose(H[0, :3], [3.2658255, 1.3231866, 0.3177007], atol=1e-5)


def test_encoder_deterministic():
    model = EncoderModel.init(NANO, seed=3)
    x = rand(16, 256)
    assert model(x).data.tobytes() == model(x).data.tobytes()
    assert EncoderModel.init(NANO, seed=3)(x).data.tobytes() == model(x).data.tobytes()


def test_permutation_probe():
    model = EncoderModel.init(replace(NANO, depth=2), seed=1)
    x = rand(12, 256, seed=5)
    perm = np.random.default_rng(0).permutation(12)
    zero_pos = dict(model.params, pos=nx.parameter(np.zeros_like(model.params["pos"].data)))
    no_pos = EncoderModel(model.config, zero_pos)
    # the scan mixes tokens in order, so even without positions a permutation is not equivariant
    assert not np.allclose(no_pos(x[perm]).data, no_pos(x).data[perm], atol=1e-4)
    # without any sequence mixing, zero positions make the encoder permutation-equivariant
    flat = EncoderModel(replace(model.config, depth=0), zero_pos)
    assert np.array_equal(flat(x[perm]).data, flat(x).data[perm])
    posd = EncoderModel(replace(model.config, depth=0), model.params)
    assert not np.allclose(posd(x[perm]).data, posd(x).data[perm], atol=1e-4)


def test_permutation_sensitivity_with_unit_conv():
    cfg = replace(NANO, depth=1, d_conv=1)
    model = EncoderModel.init(cfg, seed=2)
    model.params["pos"] = nx.parameter(np.zeros_like(model.params["pos"].data))
    x = rand(10, 256, seed=6)
    perm = np.roll(np.arange(10), 3)
    assert not np.allclose(model(x[perm]).data, model(x).data[perm], atol=1e-4)


def test_masking_happens_before_positions():
    model = EncoderModel.init(replace(NANO, depth=0), seed=4)
    x = rand(6, 256)
    out = model(x, mask_idx=np.array([1, 4])).data
    P, emb = model.params["pos"].data, model.params["mask_emb"].data
    expect = nx.rms_norm(emb + P[1], model.params["final_norm.g"]).data
    assert np.allclose(out[1], expect, atol=1e-6)


# -- losses ---------------------------------------------------------------

def test_infonce_single_candidate():
    assert m.infonce_loss(rand(1, 256), rand(1, 256, seed=1)).item() == 0.0


@pytest.mark.parametrize("N", [2, 5])
def test_infonce_uniform(N):
    c = np.zeros((N, 256), np.float32)
    assert m.infonce_loss(c, rand(N, 256)).item() == pytest.approx(math.log(N), abs=1e-6)


def test_infonce_sharp_limit():
    x = np.eye(4, 256, dtype=np.float32)
    assert m.infonce_loss(50 * x, x).item() < 1e-6


def test_infonce_naive_formula():
    c, x = rand(5, 256) * 0.1, rand(5, 256, seed=1) * 0.1
    cd, xd = c.astype(np.float64), x.astype(np.float64)
    logits = cd @ xd.T
    naive = -np.mean([math.log(math.exp(logits[i, i]) / sum(math.exp(v) for v in logits[i]))
                      for i in range(5)])
    assert m.infonce_loss(c, x).item() == pytest.approx(naive, rel=1e-5)


def test_infonce_extra_negatives():
    c, x, neg = rand(3, 8), rand(3, 8, seed=1), rand(4, 8, seed=2)
    with_neg = m.infonce_loss(c, x, neg).item()
    assert with_neg > m.infonce_loss(c, x).item()
    assert m.infonce_loss(np.zeros((3, 8), np.float32), x, neg).item() == pytest.approx(math.log(7), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_infonce_bounds(N, seed):
    r = np.random.default_rng(seed)
    c, x = r.standard_normal((N, 16)).astype(np.float32), r.standard_normal((N, 16)).astype(np.float32)
    L = m.infonce_loss(c, x).item()
    assert L >= 0
    # uniform c reaches ln N exactly
    assert m.infonce_loss(np.zeros_like(c), x).item() <= math.log(N) + 1e-5


def test_infonce_gradient():
    r = np.random.default_rng(4)
    err = nx.gradient_check(m.infonce_loss, [r.standard_normal((4, 6)), r.standard_normal((4, 6))])
    assert err < 1e-4


def test_mse_cases():
    x = rand(4, 256)
    assert m.mse_loss(x, x).item() == 0.0
    assert m.mse_loss(x + 1, x).item() == pytest.approx(256.0, rel=1e-6)
    xh = rand(4, 256, seed=9)
    ref = 0.0
    for i in range(4):
        for j in range(256):
            ref += (float(xh[i, j]) - float(x[i, j])) ** 2
    assert m.mse_loss(xh, x).item() == pytest.approx(ref / 4, rel=1e-6)


def test_combined_loss():
    assert m.combined_loss(Tensor(np.array(0.5)), Tensor(np.array(0.2)), 10).item() == pytest.approx(2.5)
    assert m.combined_loss(Tensor(np.array(0.5)), Tensor(np.array(0.2)), 0).item() == 0.5
    assert m.combined_loss(Tensor(np.array(0.5)), Tensor(np.array(0.0)), 3.7).item() == 0.5
    with pytest.raises(DomainError):
        m.combined_loss(Tensor(np.array(0.5)), Tensor(np.array(0.2)), -1)


# -- pooling ----------------------------------------------------------------

def test_mean_pool_constant_rows():
    H = np.tile(rand(8), (5, 1))
    assert np.allclose(m.mean_pool(H).data, H[0])


def test_segment_pool_single_segment_is_mean():
    H = rand(2 * 8, 4)
    one = m.segment_pool(H, (8, 2), segment_seconds=100.0).data
    assert one.shape == (1, 4) and np.allclose(one[0], m.mean_pool(H).data, atol=1e-6)


def test_sixty_second_segments_match_frame_centres():
    from ssamba import features as ft
    T = ft.frame_count(60 * 16000)
    tp = -(-T // 16)
    seg = m.segment_assignment((8, tp), 1.0)
    assert seg.max() + 1 == 60
    for col in range(tp):
        centres = [(f * 160 + 200) / 16000 for f in range(16 * col, 16 * col + 16)]
        expect = math.floor(sum(centres) / 16)
        assert np.all(seg[8 * col:8 * col + 8] == expect)
    H = rand(8 * tp, 4)
    assert m.segment_pool(H, (8, tp)).shape == (60, 4)


def test_segment_pool_empty_segment():
    with pytest.raises(ContractError):
        m.segment_pool(rand(16, 4), (8, 2), 1.0, n_segments=3)


def test_resize_positional_endpoints():
    P = rand(8 * 5, 3)
    Q = m.resize_positional(P, 8, 9)
    assert Q.shape == (72, 3)
    assert np.allclose(Q[:8], P[:8]) and np.allclose(Q[-8:], P[-8:])
    assert np.allclose(m.resize_positional(P, 8, 5), P)


def test_with_time_capacity():
    model = m.with_time_capacity(EncoderModel.init(replace(NANO, max_time_patches=13)), 20)
    assert model.params["pos"].shape == (160, 64) and model.config.max_time_patches == 20
    assert model(rand(160, 256)).shape == (160, 64)


# -- descent ----------------------------------------------------------------

def test_overfit_single_batch_descends():
    cfg = replace(NANO, max_time_patches=4)
    model = EncoderModel.init(cfg, seed=0)
    heads = m.init_heads(cfg, np.random.default_rng(1))
    x = rand(2, 32, 256) * 0.5
    idx = np.stack([np.arange(0, 32, 3), np.arange(1, 32, 3)])
    params = dict(model.params, **heads)
    adam = nx.AdamState(lr=1e-3)
    losses = []
    for _ in range(50):
        with nx.GradTape() as tape:
            tape.watch(params)
            H = model(x, mask_idx=idx)
            Hm = nx.take_rows(H, idx)
            target = x[np.arange(2)[:, None], idx].reshape(-1, 256)
            c = nx.reshape(m.mlp_head(Hm, params, "cls"), (-1, 256))
            r = nx.reshape(m.mlp_head(Hm, params, "rec"), (-1, 256))
            L = m.combined_loss(m.infonce_loss(c, target), m.mse_loss(r, target))
        losses.append(L.item())
        nx.adam_step(params, tape.backward(L), adam)
    assert losses[-1] < 0.5 * losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
