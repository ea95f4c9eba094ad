import itertools
import math

import numpy as np
import pytest

from recomposer import tensor as T
from recomposer.checkpoint import prior_checkpoint
from recomposer.prior import (CondSpec, PriorConfig, PriorModel, PriorTrainConfig, generate_sequence,
                              grid_log_prob, prior_logits, prior_loss, sample_codes, train_prior)
from recomposer.tensor import Tape, Tensor, finite_diff_grad

from oracles import causal_mask, conv2d_loop

SMALL = PriorConfig(codebook_size=7, chord_vocab_size=5, grid_shape=(4, 3), channels=6,
                    embed_dim=4, head_channels=5)
TOY = PriorConfig(codebook_size=3, chord_vocab_size=4, grid_shape=(2, 2), channels=8,
                  embed_dim=4, head_channels=8)


def random_grids(cfg, n, seed):
    return np.random.default_rng(seed).integers(0, cfg.codebook_size, (n, *cfg.grid_shape))


@pytest.fixture(scope="module")
def small():
    return PriorModel.init(SMALL, seed=3, dtype=np.float64)


def test_reference_config_layout():
    m = PriorModel.init(PriorConfig(chord_vocab_size=6), seed=0)
    p = m.params
    assert p["code_embed"].shape == (256, 64) and p["spatial_embed"].shape == (256, 64)
    assert p["chord_prev"].shape == (6, 64)
    assert p["layer0.w"].shape == (5, 5, 64, 128) and p["layer1.w"].shape == (3, 3, 64, 128)
    assert "layer14.w" in p and "layer15.w" not in p
    assert p["head2.w"].shape == (1, 1, 64, 256)
    masks = m.masks()
    assert len(masks) == 15 and masks[0].kind == "A" and all(mk.kind == "B" for mk in masks[1:])


def test_mask_counts():
    m = PriorModel.init(PriorConfig(), seed=0)
    assert int(m.masks()[0].array().sum()) == 12
    assert int(m.masks()[1].array().sum()) == 5


def test_output_shape_reference():
    m = PriorModel.init(PriorConfig(chord_vocab_size=3), seed=0)
    out = prior_logits(m, np.zeros((2, 13, 4), int), CondSpec([[0, 1, 2], [2, 2, 2]]))
    assert out.shape == (2, 13, 4, 256)


# -- causality -----------------------------------------------------------------


def test_causality_twenty_trials(small):
    rng = np.random.default_rng(0)
    gh, gw = SMALL.grid_shape
    for trial in range(20):
        g = random_grids(SMALL, 1, trial)
        cond = CondSpec(rng.integers(0, SMALL.chord_vocab_size, (1, 3)))
        i, j = int(rng.integers(gh)), int(rng.integers(gw))
        g2 = g.copy()
        g2[0, i, j] = (g[0, i, j] + 1 + rng.integers(SMALL.codebook_size - 1)) % SMALL.codebook_size
        a = prior_logits(small, g, cond).data[0]
        b = prior_logits(small, g2, cond).data[0]
        p = i * gw + j
        for q in range(gh * gw):
            qi, qj = divmod(q, gw)
            if q <= p:
                assert np.array_equal(a[qi, qj], b[qi, qj]), (trial, p, q)
        # something downstream must move unless p is the final position
        if p < gh * gw - 1:
            assert not np.array_equal(a, b)


def test_first_position_ignores_grid_but_not_chords(small):
    cond = CondSpec([[1, 2, 3]])
    outs = [prior_logits(small, random_grids(SMALL, 1, s), cond).data[0, 0, 0] for s in range(5)]
    assert all(np.array_equal(outs[0], o) for o in outs)
    g = random_grids(SMALL, 1, 0)
    for role in range(3):
        t = [1, 2, 3]
        t[role] = 4
        other = prior_logits(small, g, CondSpec([t])).data[0, 0, 0]
        assert not np.allclose(outs[0], other)


def test_spatial_absent_equals_zero_map(small):
    g = random_grids(SMALL, 2, 1)
    sp = random_grids(SMALL, 2, 2)
    trip = [[0, 1, 2], [3, 3, 4]]
    off = prior_logits(small, g, CondSpec(trip, sp, [False, False])).data
    zero_emb = dict(small.tensors())
    zero_emb["spatial_embed"] = Tensor(np.zeros_like(small.params["spatial_embed"]))
    ref = prior_logits(small, g, CondSpec(trip, sp), zero_emb).data
    assert np.array_equal(off, ref)
    on = prior_logits(small, g, CondSpec(trip, sp)).data
    assert not np.allclose(on, off)
    # a map entry reaches its own position, never an earlier one
    gh, gw = SMALL.grid_shape
    for i, j in [(0, 0), (1, 2), (3, 1)]:
        sp2 = sp.copy()
        sp2[:, i, j] = (sp2[:, i, j] + 1) % SMALL.codebook_size
        moved = prior_logits(small, g, CondSpec(trip, sp2)).data
        p = i * gw + j
        for q in range(gh * gw):
            qi, qj = divmod(q, gw)
            same = np.array_equal(moved[:, qi, qj], on[:, qi, qj])
            if q < p:
                assert same, (p, q)
            elif q == p:
                assert not same, p


def test_residual_ablation_reduces_to_first_layer_and_head(small):
    params = {k: v.copy() for k, v in small.params.items()}
    for layer in range(1, SMALL.layers):
        for part in ("w", "b", "cond_w", "spatial_w"):
            params[f"layer{layer}.{part}"][...] = 0
    ablated = PriorModel(SMALL, params)
    g = random_grids(SMALL, 2, 5)
    trip = np.array([[0, 1, 2], [4, 0, 3]])
    got = prior_logits(ablated, g, CondSpec(trip)).data

    c = SMALL.channels
    x = params["code_embed"][g]
    hvec = np.concatenate([params["chord_prev"][trip[:, 0]], params["chord_cur"][trip[:, 1]],
                           params["chord_next"][trip[:, 2]]], axis=-1)
    pre = conv2d_loop(x, params["layer0.w"], params["layer0.b"], mask=causal_mask("A", 5, 5))
    pre = pre + (hvec @ params["layer0.cond_w"])[:, None, None, :]
    h = np.tanh(pre[..., :c]) / (1 + np.exp(-pre[..., c:]))
    h = np.maximum(conv2d_loop(h, params["head1.w"], params["head1.b"]), 0)
    ref = conv2d_loop(h, params["head2.w"], params["head2.b"])
    assert np.abs(got - ref).max() <= 1e-10
    assert not np.allclose(got, prior_logits(small, g, CondSpec(trip)).data)


def test_out_of_range_ids():
    m = PriorModel.init(SMALL, seed=0)
    g = random_grids(SMALL, 1, 0)
    with pytest.raises(IndexError):
        prior_logits(m, g, CondSpec([[0, 5, 0]]))
    with pytest.raises(IndexError):
        prior_logits(m, g, CondSpec([[-1, 0, 0]]))
    with pytest.raises(IndexError):
        prior_logits(m, g + SMALL.codebook_size, CondSpec([[0, 0, 0]]))
    with pytest.raises(ValueError):
        CondSpec([[0, 1]])


# -- normalisation ---------------------------------------------------------------


@pytest.mark.parametrize("spatial", [False, True])
def test_chain_rule_sums_to_one(spatial):
    m = PriorModel.init(TOY, seed=11, dtype=np.float64)
    grids = np.array(list(itertools.product(range(3), repeat=4))).reshape(81, 2, 2)
    trip = np.tile([[1, 0, 3]], (81, 1))
    if spatial:
        cond = CondSpec(trip, np.tile([[2, 0], [1, 1]], (81, 1, 1)))
    else:
        cond = CondSpec(trip)
    total = math.fsum(np.exp(grid_log_prob(m, grids, cond)))
    assert abs(total - 1.0) <= 1e-6


def test_loss_values():
    k = 256
    grids = np.random.default_rng(0).integers(0, k, (2, 13, 4))
    uniform = Tensor(np.zeros((2, 13, 4, k)))
    assert prior_loss(uniform, grids).item() == pytest.approx(math.log(256), abs=1e-9)
    peaked = np.zeros((2, 13, 4, k))
    np.put_along_axis(peaked, grids[..., None], 50.0, axis=-1)
    assert prior_loss(Tensor(peaked), grids).item() < 1e-15
    rnd = Tensor(np.random.default_rng(1).standard_normal((2, 13, 4, k)))
    swapped = Tensor(rnd.data[::-1].copy())
    assert prior_loss(rnd, grids).item() == pytest.approx(prior_loss(swapped, grids[::-1]).item(), rel=1e-12)


def test_prior_gradients_match_finite_differences():
    cfg = PriorConfig(codebook_size=3, chord_vocab_size=3, grid_shape=(3, 2), channels=3, layers=3,
                      embed_dim=2, head_channels=3)
    m = PriorModel.init(cfg, seed=2, dtype=np.float64)
    g = random_grids(cfg, 2, 0)
    cond = CondSpec([[0, 1, 2], [2, 2, 1]], random_grids(cfg, 2, 1), [True, False])
    P = m.tensors(requires_grad=True)
    with Tape() as tape:
        loss = prior_loss(prior_logits(m, g, cond, P), g)
    names = ["code_embed", "chord_cur", "spatial_embed", "layer0.w", "layer1.cond_w",
             "layer2.spatial_w", "head1.w", "head2.b"]
    grads = tape.backward(loss, [P[n] for n in names])
    for name, got in zip(names, grads):
        def f(v, name=name):
            Q = dict(m.tensors())
            Q[name] = Tensor(v)
            return prior_loss(prior_logits(m, g, cond, Q), g).item()
        num = finite_diff_grad(f, m.params[name])
        scale = max(np.abs(num).max(), np.abs(got).max(), 1e-12)
        assert np.abs(got - num).max() / scale <= 1e-4, name


# -- sampling --------------------------------------------------------------------


def test_greedy_is_deterministic_and_self_consistent(small):
    cond = CondSpec([[0, 1, 2], [3, 4, 0]])
    a = sample_codes(small, cond, 0.0)
    b = sample_codes(small, cond, 0.0, seed=99)
    assert np.array_equal(a, b) and a.shape == (2, *SMALL.grid_shape)
    teacher = prior_logits(small, a, cond).data
    assert np.array_equal(teacher.argmax(axis=-1), a)


def test_seeded_sampling_reproducible(small):
    cond = CondSpec([[0, 1, 2]])
    a = sample_codes(small, cond, 1.0, seed=5)
    assert np.array_equal(a, sample_codes(small, cond, 1.0, seed=5))
    draws = [sample_codes(small, cond, 1.0, seed=s) for s in range(6)]
    assert any(not np.array_equal(draws[0], d) for d in draws[1:])
    assert all(d.min() >= 0 and d.max() < SMALL.codebook_size for d in draws)


def test_negative_temperature_rejected(small):
    with pytest.raises(ValueError):
        sample_codes(small, CondSpec([[0, 0, 0]]), -0.1)


def test_generate_sequence_counts(small):
    ids = [0, 0, 1, 2, 3, 4, 1, 2, 0, 0]
    for spatial in (False, True):
        out = generate_sequence(small, ids, use_spatial=spatial, temperature=1.0, seed=4)
        assert len(out) == 8
        assert all(g.shape == SMALL.grid_shape and g.min() >= 0 and g.max() < SMALL.codebook_size
                   for g in out)
    a = generate_sequence(small, ids, temperature=0.0)
    assert all(np.array_equal(x, y) for x, y in zip(a, generate_sequence(small, ids, temperature=0.0)))
    with pytest.raises(ValueError):
        generate_sequence(small, [0, 1])


def test_generate_first_measure_uses_zero_map(small):
    ids = [1, 2, 3]
    got = generate_sequence(small, ids, use_spatial=True, temperature=0.0)[0]
    zero = dict(small.tensors())
    zero["spatial_embed"] = Tensor(np.zeros_like(small.params["spatial_embed"]))
    ref = PriorModel(SMALL, {k: v.data for k, v in zero.items()})
    assert np.array_equal(got, sample_codes(ref, CondSpec([[1, 2, 3]]), 0.0)[0])


# -- training --------------------------------------------------------------------


def _train_setup():
    cfg = PriorConfig(codebook_size=5, chord_vocab_size=4, grid_shape=(3, 2), channels=4, layers=3,
                      embed_dim=3, head_channels=4)
    grids = random_grids(cfg, 6, 7)
    cond = CondSpec(np.random.default_rng(8).integers(0, 4, (6, 3)))
    return cfg, grids, cond


def test_zero_steps_keeps_init():
    cfg, grids, cond = _train_setup()
    m = PriorModel.init(cfg, seed=1)
    before = {k: v.copy() for k, v in m.params.items()}
    res = train_prior(m, grids, cond, PriorTrainConfig(steps=0, batch=4))
    assert res.losses == []
    assert all(np.array_equal(before[k], res.model.params[k]) for k in before)


def test_same_seed_bit_identical_checkpoints():
    cfg, grids, cond = _train_setup()
    blobs = []
    for _ in range(2):
        res = train_prior(PriorModel.init(cfg, seed=1), grids, cond,
                          PriorTrainConfig(steps=5, batch=4, seed=3, log_every=2))
        blobs.append(prior_checkpoint(res.model, res.optimizer).to_bytes())
    assert blobs[0] == blobs[1]


def test_training_never_touches_holdout_and_lowers_loss():
    cfg, grids, cond = _train_setup()
    seen = set()
    res = train_prior(PriorModel.init(cfg, seed=1), grids, cond,
                      PriorTrainConfig(steps=60, batch=4, seed=0, lr=1e-2, log_every=20),
                      train_indices=[0, 1, 2, 3],
                      on_batch=lambda step, b: seen.update(int(i) for i in b))
    assert seen <= {0, 1, 2, 3}
    assert res.losses[-1][1] < res.losses[0][1]


def test_misaligned_inputs_rejected():
    cfg, grids, cond = _train_setup()
    with pytest.raises(ValueError):
        train_prior(PriorModel.init(cfg), grids[:5], cond, PriorTrainConfig(steps=1))
