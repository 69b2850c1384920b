"""Pairwise ranking objective and the full differentiable training graph.

The per-pair loss is the numerically safe BPR form
``-log sigmoid(p_pos - p_neg)`` (softplus of the negated difference),
mean-reduced over each sequence's sampled negatives and then over the
batch. ``build_batch_loss`` assembles sequence encoding and scoring for a
whole batch on one tape, grouping sequences of equal length so the node
count stays small; ``build_model_loss`` prepends the diffusion stack (or a
cached feature table) to produce the complete graph from raw parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import graph as gr
from . import sequence as seq
from .autodiff import Tape

log = logging.getLogger(__name__)


def pairwise_loss(p_pos, p_negs) -> float:
    """Mean over negatives of -log sigmoid(p_pos - p_neg)."""
    if len(p_negs) == 0:
        raise ValueError("need at least one negative")
    diffs = np.asarray([p_pos - p for p in p_negs], dtype=np.float64)
    return float(np.logaddexp(0.0, -diffs).mean())


def sample_negatives(positives, n_items, k, rng):
    """k distinct item ids outside the user's positive set."""
    if n_items - len(positives) < k:
        raise ValueError("catalog too small for negative sampling")
    out = []
    chosen = set()
    while len(out) < k:
        draw = int(rng.integers(0, n_items))
        if draw in positives or draw in chosen:
            continue
        chosen.add(draw)
        out.append(draw)
    return out


@dataclass
class BatchInfo:
    """What the batch builder actually used (for tests and diagnostics)."""

    n_sequences: int = 0
    n_skipped: int = 0
    negatives: list[list[int]] = field(default_factory=list)


def _grouped_attention(tape, embeds, theta2, n_seq, t_len, direction):
    """Attention outputs for n_seq stacked sequences of equal length.

    ``embeds`` holds the sequences' item embeddings as consecutive row
    blocks. Returns the (n_seq * t_len, d) per-position output node, rows
    in (sequence, position) order.
    """
    src_w, dst_w = seq._direction_weights(theta2, direction)
    srcs = tape.matmul(embeds, tape.transpose(src_w))
    dsts = tape.matmul(embeds, tape.transpose(dst_w))
    base = np.repeat(np.arange(n_seq) * t_len, t_len * t_len)
    pair_m = base + np.tile(np.tile(np.arange(t_len), t_len), n_seq)
    pair_n = base + np.tile(np.repeat(np.arange(t_len), t_len), n_seq)
    hidden = tape.sigmoid(tape.add(tape.lookup(srcs, pair_m),
                                   tape.lookup(dsts, pair_n)))
    content = tape.reshape(tape.matmul(hidden, theta2[seq.ATT_SCORE_W]),
                           (n_seq * t_len, t_len))
    bias = seq.position_bias(t_len)
    mask = bias.forward if direction == "fw" else bias.backward
    logits = tape.add(content, tape.constant(np.tile(mask.T, (n_seq, 1))))
    att = tape.masked_softmax_rows(logits)
    att_cols = tape.transpose(att)
    out = None
    row_seq = np.repeat(np.arange(n_seq), t_len)
    for m in range(t_len):
        sources = tape.lookup(embeds, row_seq * t_len + m)
        weighted = tape.scale_rows(sources, tape.lookup(att_cols, m))
        out = weighted if out is None else tape.add(out, weighted)
    return out


def _block_mean(tape, rows, n_seq, t_len):
    """Mean over each sequence's block of t_len consecutive rows."""
    acc = None
    for n in range(t_len):
        picked = tape.lookup(rows, np.arange(n_seq) * t_len + n)
        acc = picked if acc is None else tape.add(acc, picked)
    return tape.scale(acc, 1.0 / t_len)


def _grouped_preferences(tape, item_features, group, theta2, use_sequence):
    """(n_seq, d) preference matrix node for equal-length sequences."""
    t_len = len(group[0].items)
    n_seq = len(group)
    all_ids = np.asarray([it for s in group for it in s.items])
    embeds = tape.lookup(item_features, all_ids)
    if not use_sequence:
        return _block_mean(tape, embeds, n_seq, t_len)
    fw = _grouped_attention(tape, embeds, theta2, n_seq, t_len, "fw")
    bw = _grouped_attention(tape, embeds, theta2, n_seq, t_len, "bw")
    pooled = tape.concat([_block_mean(tape, fw, n_seq, t_len),
                          _block_mean(tape, bw, n_seq, t_len)], axis=1)
    return tape.relu(tape.add(
        tape.matmul(pooled, tape.transpose(theta2[seq.COMBINE_W])),
        theta2[seq.COMBINE_B]))


def _scores(tape, prefs, item_features, cand_ids, rep_seq, theta2):
    """Engagement probabilities for candidate rows against their sequences."""
    cands = tape.lookup(item_features, np.asarray(cand_ids))
    prefs_rep = tape.lookup(prefs, np.asarray(rep_seq))
    if seq.SCORER_HIDDEN_W in theta2:
        both = tape.concat([prefs_rep, cands], axis=1)
        hidden = tape.relu(tape.add(
            tape.matmul(both, tape.transpose(theta2[seq.SCORER_HIDDEN_W])),
            theta2[seq.SCORER_HIDDEN_B]))
        logits = tape.reshape(
            tape.matmul(hidden, tape.transpose(theta2[seq.SCORER_OUT_W])),
            (len(cand_ids),))
    else:
        dim = theta2[seq.COMBINE_B].value.shape[0]
        # row dot products via mean * d, avoiding a per-row reduction op
        logits = tape.scale(tape.mean_axis(tape.mul(cands, prefs_rep), 1), dim)
    return tape.sigmoid(logits)


def build_batch_loss(tape, item_features, theta2, sequences, k_neg, rng,
                     user_positives, n_items, t_min=2, use_sequence=True):
    """Sequence encoding + scoring + pairwise loss for one batch.

    ``item_features`` is a (n_items, d) node; ``theta2`` maps sequence
    parameter names to nodes. Negatives are sampled per sequence, in input
    order, from items outside ``user_positives[user]``. Sequences shorter
    than ``t_min`` are skipped with a counted warning. Returns
    (scalar mean-loss node, BatchInfo).
    """
    if k_neg < 1:
        raise ValueError("k_neg must be >= 1")
    info = BatchInfo()
    usable = []
    for s in sequences:
        if len(s.items) < t_min:
            info.n_skipped += 1
            continue
        positives = user_positives.get(s.user, set())
        info.negatives.append(sample_negatives(positives, n_items, k_neg, rng))
        usable.append(s)
    if info.n_skipped:
        log.warning("skipped %d sequences shorter than %d",
                    info.n_skipped, t_min)
    if not usable:
        raise ValueError("no usable sequences in batch")
    info.n_sequences = len(usable)

    by_len: dict[int, list[int]] = {}
    for idx, s in enumerate(usable):
        by_len.setdefault(len(s.items), []).append(idx)

    pair_nodes = []
    for t_len in sorted(by_len):
        idxs = by_len[t_len]
        group = [usable[i] for i in idxs]
        prefs = _grouped_preferences(tape, item_features, group, theta2,
                                     use_sequence)
        width = 1 + k_neg
        cand_ids = []
        rep_seq = []
        for row, i in enumerate(idxs):
            cand_ids.append(usable[i].target)
            cand_ids.extend(info.negatives[i])
            rep_seq.extend([row] * width)
        probs = _scores(tape, prefs, item_features, cand_ids, rep_seq, theta2)
        pos_rep = [row * width for row in range(len(idxs)) for _ in range(k_neg)]
        neg_pos = [row * width + 1 + j
                   for row in range(len(idxs)) for j in range(k_neg)]
        pairs = tape.softplus(tape.add(tape.lookup(probs, neg_pos),
                                       tape.neg(tape.lookup(probs, pos_rep))))
        pair_nodes.append(pairs)
    all_pairs = pair_nodes[0] if len(pair_nodes) == 1 \
        else tape.concat(pair_nodes, axis=0)
    # equal k_neg everywhere: mean over all pairs == mean over sequences of
    # per-sequence means
    return tape.mean_axis(all_pairs, 0), info


def item_feature_node(tape, graph_, theta1_nodes, config, plan=None,
                      cached=None):
    """Item-rows feature node: diffusion output, inherent table, or a cache.

    ``cached`` (a concrete (n_items, d) array) wins when given; otherwise
    the diffusion subgraph (or the raw inherent table when diffusion is
    ablated) is built so gradients reach theta1.
    """
    if cached is not None:
        return tape.constant(cached)
    item_rows = np.arange(graph_.n_users, graph_.n_entities)
    if not config.use_diffusion:
        return tape.lookup(theta1_nodes[gr.INHERENT], item_rows)
    if plan is None:
        raise ValueError("diffusion requires a neighbor plan")
    diffused = gr.build_diffusion(tape, graph_, plan, theta1_nodes,
                                  config.diffusion_depth, config.aggregator)
    return tape.lookup(diffused, item_rows)


def build_model_loss(graph_, params, sequences, k_neg, rng, user_positives,
                     plan=None, cached_features=None, theta2_override=None,
                     tape=None):
    """Complete loss graph from raw parameters.

    Returns (tape, loss node, BatchInfo). theta1 enters only when no cached
    feature table is supplied. ``theta2_override`` substitutes adapted
    sequence weights without touching ``params``.
    """
    tape = tape or Tape()
    config = params.config
    theta2_values = theta2_override if theta2_override is not None \
        else params.theta2
    if cached_features is None:
        theta1_nodes = {name: tape.param(name, value)
                        for name, value in params.theta1.items()}
    else:
        theta1_nodes = {}
    theta2_nodes = {name: tape.param(name, value)
                    for name, value in theta2_values.items()}
    features = item_feature_node(tape, graph_, theta1_nodes, config,
                                 plan=plan, cached=cached_features)
    loss, info = build_batch_loss(
        tape, features, theta2_nodes, sequences, k_neg, rng, user_positives,
        n_items=graph_.n_items, t_min=config.t_min,
        use_sequence=config.use_sequence)
    return tape, loss, info


def cached_item_features(graph_, params, rng):
    """Concrete diffused (or inherent) item feature table, theta1 frozen."""
    config = params.config
    if not config.use_diffusion:
        return params.theta1[gr.INHERENT][graph_.n_users:].copy()
    table = gr.diffuse_all(graph_, params.theta1, config.diffusion_depth,
                           config.neighbor_cap, rng, config.aggregator)
    return table.diffused[graph_.n_users:].copy()
