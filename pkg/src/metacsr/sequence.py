"""Masked bidirectional self-attention over a user's item-embedding sequence.

For a sequence of T item embeddings, each pair (m, n) gets a content logit
``score_w^T sigmoid(src_w @ e_m + dst_w @ e_n)`` plus an additive position
bias of ``-exp(|m - n|)`` that decays attention with distance. The forward
pass lets position n attend to sources m <= n, the backward pass to m >= n
(the diagonal is included in both so every position has a non-empty
attendable set). Per-direction outputs are mean-pooled over positions,
concatenated and projected to the preference vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, stable_sigmoid

# theta2 parameter names
ATT_SCORE_W = "seq.att_score_w"   # d x 1
ATT_SRC_W = "seq.att_src_w"       # d x d, applied to the attended source e_m
ATT_DST_W = "seq.att_dst_w"       # d x d, applied to the target position e_n
ATT_SRC_W_BW = "seq.att_src_w_bw"  # only when directions are untied
ATT_DST_W_BW = "seq.att_dst_w_bw"
COMBINE_W = "seq.combine_w"       # d x 2d
COMBINE_B = "seq.combine_b"       # d
SCORER_HIDDEN_W = "scorer.hidden_w"  # d x 2d, only for the MLP scorer
SCORER_HIDDEN_B = "scorer.hidden_b"  # d
SCORER_OUT_W = "scorer.out_w"        # 1 x d
SEQ_PARAM_NAMES = (ATT_SCORE_W, ATT_SRC_W, ATT_DST_W, COMBINE_W, COMBINE_B)


@dataclass(frozen=True)
class PositionBias:
    """Additive attention masks: finite entries are -exp(|m - n|)."""

    forward: np.ndarray   # [m, n] finite iff m <= n
    backward: np.ndarray  # [m, n] finite iff m >= n


def position_bias(length: int) -> PositionBias:
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    idx = np.arange(length)
    decay = -np.exp(np.abs(idx[:, None] - idx[None, :]).astype(np.float64))
    fw = np.where(idx[:, None] <= idx[None, :], decay, -np.inf)
    bw = np.where(idx[:, None] >= idx[None, :], decay, -np.inf)
    return PositionBias(forward=fw, backward=bw)


def init_seq_params(dim, rng, untie_directions=False,
                    scorer="dot") -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(dim)
    params = {
        ATT_SCORE_W: rng.uniform(-bound, bound, size=(dim, 1)),
        ATT_SRC_W: rng.uniform(-bound, bound, size=(dim, dim)),
        ATT_DST_W: rng.uniform(-bound, bound, size=(dim, dim)),
        COMBINE_W: rng.uniform(-1.0 / np.sqrt(2 * dim), 1.0 / np.sqrt(2 * dim),
                               size=(dim, 2 * dim)),
        COMBINE_B: np.zeros(dim),
    }
    if untie_directions:
        params[ATT_SRC_W_BW] = rng.uniform(-bound, bound, size=(dim, dim))
        params[ATT_DST_W_BW] = rng.uniform(-bound, bound, size=(dim, dim))
    if scorer == "mlp":
        wide = 1.0 / np.sqrt(2 * dim)
        params[SCORER_HIDDEN_W] = rng.uniform(-wide, wide, size=(dim, 2 * dim))
        params[SCORER_HIDDEN_B] = np.zeros(dim)
        params[SCORER_OUT_W] = rng.uniform(-bound, bound, size=(1, dim))
    elif scorer != "dot":
        raise ValueError(f"unknown scorer {scorer!r}")
    return params


def _direction_weights(params, direction):
    if direction == "bw" and ATT_SRC_W_BW in params:
        return params[ATT_SRC_W_BW], params[ATT_DST_W_BW]
    return params[ATT_SRC_W], params[ATT_DST_W]


def build_attention(tape, embeds, params, bias, direction="fw"):
    """Masked self-attention over one (T, d) embedding node.

    ``bias`` is the (T, T) numpy mask for this direction, indexed [m, n].
    Internally logits are laid out with one row per target position n so a
    row softmax yields each position's distribution over sources m.
    Returns the (T, d) output node.
    """
    t_len = bias.shape[0]
    src_w, dst_w = _direction_weights(params, direction)
    srcs = tape.matmul(embeds, tape.transpose(src_w))  # row m: src_w @ e_m
    dsts = tape.matmul(embeds, tape.transpose(dst_w))  # row n: dst_w @ e_n
    pair_m = np.tile(np.arange(t_len), t_len)            # m fastest
    pair_n = np.repeat(np.arange(t_len), t_len)
    hidden = tape.sigmoid(tape.add(tape.lookup(srcs, pair_m),
                                   tape.lookup(dsts, pair_n)))
    content = tape.matmul(hidden, params[ATT_SCORE_W])   # (T*T, 1)
    logits = tape.add(tape.reshape(content, (t_len, t_len)),
                      tape.constant(bias.T))             # row n, col m
    att = tape.masked_softmax_rows(logits)
    return tape.matmul(att, embeds), att


def build_preference(tape, fw_out, bw_out, params):
    """Mean-pool both directions, concatenate, project: the (d,) s_u node."""
    pooled = tape.concat([tape.mean_axis(fw_out, 0), tape.mean_axis(bw_out, 0)],
                         axis=0)
    return tape.relu(tape.add(tape.matmul(params[COMBINE_W], pooled),
                              params[COMBINE_B]))


def build_sequence_encoder(tape, embeds, params, t_len):
    """Full per-sequence encoder: embeddings node -> preference node."""
    bias = position_bias(t_len)
    fw, _ = build_attention(tape, embeds, params, bias.forward, "fw")
    bw, _ = build_attention(tape, embeds, params, bias.backward, "bw")
    return build_preference(tape, fw, bw, params)


def build_score(tape, preference, item_embed, params):
    """Engagement probability node: sigmoid of the scoring function.

    Inner product by default; when MLP scorer weights are present, a
    ReLU-hidden two-layer head over [s_u; i] produces the logit instead.
    """
    if SCORER_HIDDEN_W in params:
        both = tape.concat([preference, item_embed], axis=0)
        hidden = tape.relu(tape.add(tape.matmul(params[SCORER_HIDDEN_W], both),
                                    params[SCORER_HIDDEN_B]))
        return tape.sigmoid(tape.sum(tape.matmul(params[SCORER_OUT_W], hidden)))
    return tape.sigmoid(tape.sum(tape.mul(preference, item_embed)))


def _param_nodes(tape, params):
    return {name: tape.leaf(name, value) for name, value in params.items()}


def masked_self_attention(seq_embeds, params, bias):
    """Value-level attention pass: (T, d) embeddings -> (T, d) outputs.

    ``bias`` is a (T, T) matrix indexed [m, n]; -inf marks masked pairs.
    """
    seq_embeds = np.asarray(seq_embeds, dtype=np.float64)
    tape = Tape()
    out, _ = build_attention(tape, tape.leaf("e", seq_embeds),
                             _param_nodes(tape, params), np.asarray(bias))
    tape.forward()
    return out.value.copy()


def attention_weights(seq_embeds, params, bias):
    """Attention distributions, one row per target position n."""
    seq_embeds = np.asarray(seq_embeds, dtype=np.float64)
    tape = Tape()
    _, att = build_attention(tape, tape.leaf("e", seq_embeds),
                             _param_nodes(tape, params), np.asarray(bias))
    tape.forward()
    return att.value.copy()


def encode_preference(fw_out, bw_out, params):
    """Value-level preference head: two (T, d) matrices -> (d,) vector."""
    tape = Tape()
    node = build_preference(tape, tape.leaf("fw", np.asarray(fw_out, float)),
                            tape.leaf("bw", np.asarray(bw_out, float)),
                            _param_nodes(tape, params))
    tape.forward()
    return node.value.copy()


def encode_sequence(seq_embeds, params):
    """Value-level full encoder for one sequence."""
    seq_embeds = np.asarray(seq_embeds, dtype=np.float64)
    tape = Tape()
    node = build_sequence_encoder(tape, tape.leaf("e", seq_embeds),
                                  _param_nodes(tape, params),
                                  seq_embeds.shape[0])
    tape.forward()
    return node.value.copy()


def score(preference, item_embed, params=None):
    """Engagement probability in (0, 1) for one (preference, item) pair."""
    preference = np.asarray(preference, dtype=np.float64)
    item_embed = np.asarray(item_embed, dtype=np.float64)
    if preference.shape != item_embed.shape:
        raise ValueError("preference and item embedding dimensions differ")
    if params and SCORER_HIDDEN_W in params:
        both = np.concatenate([preference, item_embed])
        hidden = np.maximum(params[SCORER_HIDDEN_W] @ both
                            + params[SCORER_HIDDEN_B], 0.0)
        return float(stable_sigmoid(np.asarray(params[SCORER_OUT_W] @ hidden))[0])
    return float(stable_sigmoid(np.asarray(preference @ item_embed)))


def score_candidates(preference, item_embeds, params=None):
    """Vectorized :func:`score` over the rows of a candidate matrix."""
    preference = np.asarray(preference, dtype=np.float64)
    item_embeds = np.asarray(item_embeds, dtype=np.float64)
    if params and SCORER_HIDDEN_W in params:
        both = np.concatenate(
            [np.broadcast_to(preference, item_embeds.shape), item_embeds],
            axis=1)
        hidden = np.maximum(both @ params[SCORER_HIDDEN_W].T
                            + params[SCORER_HIDDEN_B], 0.0)
        return stable_sigmoid(hidden @ params[SCORER_OUT_W].ravel())
    return stable_sigmoid(item_embeds @ preference)
