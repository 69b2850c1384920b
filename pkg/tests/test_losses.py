import logging
import math

import numpy as np
import pytest

from metacsr import graph as gr
from metacsr import losses
from metacsr import sequence as seq
from metacsr.autodiff import Tape, finite_difference_check
from metacsr.data import BehaviorSequence
from metacsr.params import ModelConfig, init_model

from oracles import reference_convolve, reference_encode, reference_pairwise_loss, sigmoid


def test_pairwise_equal_scores_is_ln2():
    assert losses.pairwise_loss(0.5, [0.5]) == pytest.approx(math.log(2))


def test_pairwise_loss_vanishes_for_large_margin():
    assert losses.pairwise_loss(1e4, [0.0]) == pytest.approx(0.0, abs=1e-12)


def test_pairwise_loss_two_negatives_reference():
    got = losses.pairwise_loss(0.9, [0.1, 0.5])
    expected = (-math.log(sigmoid(0.8)) - math.log(sigmoid(0.4))) / 2
    assert got == pytest.approx(expected)
    assert got == pytest.approx(reference_pairwise_loss(0.9, [0.1, 0.5]))


def test_pairwise_loss_positive_and_decreasing():
    margins = np.linspace(-3, 3, 13)
    values = [losses.pairwise_loss(m, [0.0]) for m in margins]
    assert all(v > 0 for v in values)
    assert all(a > b for a, b in zip(values, values[1:]))


def test_pairwise_loss_order_invariant():
    rng = np.random.default_rng(0)
    negs = rng.uniform(size=7).tolist()
    assert losses.pairwise_loss(0.6, negs) == pytest.approx(
        losses.pairwise_loss(0.6, negs[::-1]))


def test_pairwise_gradient_signs():
    t = Tape()
    p_pos = t.param("pos", [0.4])
    p_neg = t.param("neg", [0.7])
    loss = t.sum(t.softplus(t.add(p_neg, t.neg(p_pos))))
    t.forward()
    t.backward(loss)
    assert t.grads["pos"][0] < 0
    assert t.grads["neg"][0] > 0
    assert finite_difference_check(t, loss, "pos") < 1e-8


def _tiny_setup(dim=4, n_users=3, n_items=6, seed=5):
    edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)]
    g = gr.build_interaction_graph(edges, n_users, n_items)
    config = ModelConfig(dim=dim, diffusion_depth=2, neighbor_cap=10,
                         t_min=2, t_max=6)
    params = init_model(g.n_entities, config, np.random.default_rng(seed))
    positives = {0: {0, 1}, 1: {1, 2}, 2: {0, 3}}
    return g, params, positives


def test_batch_loss_single_sequence_equals_pairwise():
    g, params, positives = _tiny_setup()
    s = BehaviorSequence(user=0, items=(0, 1, 2), target=3)
    rng = np.random.default_rng(9)
    tape, loss, info = losses.build_model_loss(
        g, params, [s], k_neg=1, rng=rng, user_positives=positives,
        plan=gr.sample_neighbor_plan(g, 10, 2, np.random.default_rng(0)))
    tape.forward()

    # oracle: frozen features + value-level encoder + scalar pairwise loss
    feats = losses.cached_item_features(g, params, np.random.default_rng(0))
    s_u = seq.encode_sequence(feats[list(s.items)], params.theta2)
    (neg,) = info.negatives[0]
    p_pos = seq.score(s_u, feats[s.target])
    p_neg = seq.score(s_u, feats[neg])
    assert float(loss.value) == pytest.approx(
        losses.pairwise_loss(p_pos, [p_neg]), rel=1e-10)


def test_batch_loss_duplicate_sequence_mean_invariant():
    g, params, positives = _tiny_setup()
    s = BehaviorSequence(user=0, items=(0, 1), target=2)
    feats = losses.cached_item_features(g, params, np.random.default_rng(0))

    def run(seqs, rng_seed):
        tape = Tape()
        nodes = {k: tape.param(k, v) for k, v in params.theta2.items()}
        f = tape.constant(feats)
        # force the same negative for each copy
        rng = np.random.default_rng(rng_seed)
        loss, _ = losses.build_batch_loss(
            tape, f, nodes, seqs, 1, rng, {0: {0, 1, 2, 4, 5}}, g.n_items)
        tape.forward()
        return float(loss.value)

    assert run([s], 3) == pytest.approx(run([s, s], 3), rel=1e-12)


def test_batch_loss_skips_short_sequences(caplog):
    g, params, positives = _tiny_setup()
    good = BehaviorSequence(user=0, items=(0, 1, 2), target=3)
    short = BehaviorSequence(user=1, items=(1, 2), target=3)
    params.config.t_min = 3
    with caplog.at_level(logging.WARNING, logger="metacsr.losses"):
        tape, loss, info = losses.build_model_loss(
            g, params, [good, short], k_neg=1,
            rng=np.random.default_rng(1), user_positives=positives,
            cached_features=losses.cached_item_features(
                g, params, np.random.default_rng(0)))
    assert info.n_skipped == 1
    assert info.n_sequences == 1
    assert "skipped" in caplog.text


def test_batch_loss_all_short_raises():
    g, params, positives = _tiny_setup()
    short = BehaviorSequence(user=1, items=(1, 2), target=3)
    params.config.t_min = 5
    with pytest.raises(ValueError, match="no usable sequences"):
        losses.build_model_loss(
            g, params, [short], 1, np.random.default_rng(1), positives,
            cached_features=np.zeros((g.n_items, params.dim)))


def test_grouped_encoder_matches_per_sequence_path():
    g, params, positives = _tiny_setup()
    feats = losses.cached_item_features(g, params, np.random.default_rng(0))
    seqs = [
        BehaviorSequence(user=0, items=(0, 1, 2), target=3),
        BehaviorSequence(user=1, items=(2, 4, 1), target=5),
        BehaviorSequence(user=2, items=(3, 0), target=1),
    ]
    tape = Tape()
    nodes = {k: tape.leaf(k, v) for k, v in params.theta2.items()}
    f = tape.constant(feats)
    by_len = {}
    for s in seqs:
        by_len.setdefault(len(s.items), []).append(s)
    for t_len, group in by_len.items():
        prefs = losses._grouped_preferences(tape, f, group, nodes, True)
        tape.forward()
        for row, s in enumerate(group):
            expected = seq.encode_sequence(feats[list(s.items)], params.theta2)
            np.testing.assert_allclose(prefs.value[row], expected, rtol=1e-9,
                                       atol=1e-12)
            oracle = reference_encode(feats[list(s.items)], params.theta2)
            np.testing.assert_allclose(prefs.value[row], oracle, rtol=1e-8,
                                       atol=1e-12)


def test_full_stack_matches_scalar_reference():
    """End-to-end oracle: diffusion + encoding + scoring + loss by hand."""
    g, params, positives = _tiny_setup(dim=3)
    seqs = [BehaviorSequence(user=0, items=(0, 1, 2), target=3),
            BehaviorSequence(user=1, items=(2, 0), target=4)]
    plan = gr.sample_neighbor_plan(g, 10, 2, np.random.default_rng(0))
    rng = np.random.default_rng(11)
    tape, loss, info = losses.build_model_loss(
        g, params, seqs, k_neg=2, rng=rng, user_positives=positives,
        plan=plan)
    tape.forward()

    # unrolled diffusion with the same neighbor plan
    inherent = params.theta1[gr.INHERENT]
    def layer(k):
        return (params.theta1[gr.LATENT_W.format(layer=k)],
                params.theta1[gr.LATENT_B.format(layer=k)],
                params.theta1[gr.MERGE_W.format(layer=k)],
                params.theta1[gr.MERGE_B.format(layer=k)])
    current = inherent
    for k in range(2):
        nxt = [reference_convolve(inherent[e],
                                  [current[nb] for nb in plan[k][e]],
                                  *layer(k))
               for e in range(g.n_entities)]
        current = np.array(nxt)
    feats = current[g.n_users:]

    per_pair = []
    for i, s in enumerate(seqs):
        s_u = reference_encode(feats[list(s.items)], params.theta2)
        p_pos = sigmoid(float(s_u @ feats[s.target]))
        for neg in info.negatives[i]:
            p_neg = sigmoid(float(s_u @ feats[neg]))
            per_pair.append(-math.log(sigmoid(p_pos - p_neg)))
    assert float(loss.value) == pytest.approx(np.mean(per_pair), rel=1e-8)


def test_negative_sampling_respects_history_and_determinism():
    rng = np.random.default_rng(4)
    negs = losses.sample_negatives({0, 1, 2}, 50, 10, rng)
    assert len(set(negs)) == 10
    assert not set(negs) & {0, 1, 2}
    again = losses.sample_negatives({0, 1, 2}, 50, 10,
                                    np.random.default_rng(4))
    assert negs == again
    with pytest.raises(ValueError, match="catalog"):
        losses.sample_negatives(set(range(45)), 50, 10,
                                np.random.default_rng(0))


def test_full_stack_gradients_pass_finite_differences():
    g, params, positives = _tiny_setup(dim=3)
    seqs = [BehaviorSequence(user=0, items=(0, 1, 2, 4), target=3)]
    plan = gr.sample_neighbor_plan(g, 10, 2, np.random.default_rng(0))
    tape, loss, _ = losses.build_model_loss(
        g, params, seqs, k_neg=2, rng=np.random.default_rng(2),
        user_positives=positives, plan=plan)
    for name in [gr.INHERENT, "diff0.latent_w", "diff1.merge_w",
                 seq.ATT_SRC_W, seq.ATT_SCORE_W, seq.COMBINE_W,
                 seq.COMBINE_B]:
        assert finite_difference_check(tape, loss, name, 1e-6) < 1e-4, name


def test_ablation_no_sequence_uses_window_mean():
    g, params, positives = _tiny_setup()
    params.config.use_sequence = False
    feats = losses.cached_item_features(g, params, np.random.default_rng(0))
    s = BehaviorSequence(user=0, items=(0, 1, 2), target=3)
    tape, loss, info = losses.build_model_loss(
        g, params, [s], 1, np.random.default_rng(3), positives,
        cached_features=feats)
    tape.forward()
    s_u = feats[list(s.items)].mean(axis=0)
    p_pos = seq.score(s_u, feats[s.target])
    p_neg = seq.score(s_u, feats[info.negatives[0][0]])
    assert float(loss.value) == pytest.approx(
        losses.pairwise_loss(p_pos, [p_neg]), rel=1e-10)


def test_ablation_no_diffusion_uses_inherent_features():
    g, params, positives = _tiny_setup()
    params.config.use_diffusion = False
    s = BehaviorSequence(user=0, items=(0, 1, 2), target=3)
    tape, loss, info = losses.build_model_loss(
        g, params, [s], 1, np.random.default_rng(3), positives)
    tape.forward()
    feats = params.theta1[gr.INHERENT][g.n_users:]
    s_u = seq.encode_sequence(feats[list(s.items)], params.theta2)
    p_pos = seq.score(s_u, feats[s.target])
    p_neg = seq.score(s_u, feats[info.negatives[0][0]])
    assert float(loss.value) == pytest.approx(
        losses.pairwise_loss(p_pos, [p_neg]), rel=1e-10)
