"""Reference scorers for directional comparisons.

Popularity ranks by global training-interaction counts. BPR-MF learns user
and item factors with SGD on sampled (user, positive, negative) triples;
cold users, which have no learned factor, are represented by the mean item
factor of their observed behaviors. The joint trainer fits the full
metaCSR architecture with plain Adam mini-batches (no episodes, no inner
loop), which is the "without meta-learning" ablation arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as gr
from . import losses
from . import meta as meta_mod
from .autodiff import stable_sigmoid
from .data import window_sequence
from .seeding import component_rng


@dataclass
class PopularityModel:
    counts: np.ndarray

    @classmethod
    def fit(cls, histories, n_items):
        counts = np.zeros(n_items)
        for items in histories.values():
            for item in items:
                counts[item] += 1
        return cls(counts=counts)

    def rank(self, user, history, candidates):
        scored = [(item, float(self.counts[item])) for item in candidates]
        return sorted(scored, key=lambda p: (-p[1], p[0]))


@dataclass
class BprMfModel:
    user_factors: np.ndarray
    item_factors: np.ndarray

    def score_user_vector(self, vector, candidates):
        return self.item_factors[candidates] @ vector

    def rank(self, user, history, candidates):
        if 0 <= user < self.user_factors.shape[0]:
            vector = self.user_factors[user]
        else:
            vector = self.item_factors[history].mean(axis=0)
        scores = self.score_user_vector(vector, np.asarray(candidates))
        scored = list(zip(candidates, scores.tolist()))
        return sorted(scored, key=lambda p: (-p[1], p[0]))


def train_bpr(histories, n_users, n_items, rng, dim=32, epochs=20,
              lr=0.05, reg=0.002, loss_probe=None):
    """SGD over sampled triples on the pairwise logistic objective.

    One epoch visits every (user, item) interaction once in a shuffled
    order, pairing each with a uniformly sampled unseen negative.
    ``loss_probe``, when given, receives the mean probe-triple loss once
    per epoch (used to watch convergence).
    """
    user_factors = rng.normal(scale=0.1, size=(n_users, dim))
    item_factors = rng.normal(scale=0.1, size=(n_items, dim))
    pairs = [(u, it) for u, items in sorted(histories.items())
             for it in items]
    seen = {u: set(items) for u, items in histories.items()}
    probe = [pairs[i] for i in range(0, len(pairs),
                                     max(1, len(pairs) // 64))]
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for idx in order:
            user, pos = pairs[idx]
            neg = int(rng.integers(n_items))
            while neg in seen[user]:
                neg = int(rng.integers(n_items))
            pu = user_factors[user]
            diff = item_factors[pos] - item_factors[neg]
            weight = 1.0 - float(stable_sigmoid(np.asarray(pu @ diff)))
            grad_u = weight * diff - reg * pu
            grad_pos = weight * pu - reg * item_factors[pos]
            grad_neg = -weight * pu - reg * item_factors[neg]
            user_factors[user] += lr * grad_u
            item_factors[pos] += lr * grad_pos
            item_factors[neg] += lr * grad_neg
        if loss_probe is not None:
            values = []
            for user, pos in probe:
                neg = (pos + 1) % n_items
                x = user_factors[user] @ (item_factors[pos] - item_factors[neg])
                values.append(float(np.logaddexp(0.0, -x)))
            loss_probe(float(np.mean(values)))
    return BprMfModel(user_factors=user_factors, item_factors=item_factors)


def joint_train(graph_, histories, params, cfg, seed, max_steps=None,
                batch_size=None, on_step=None, adam=None):
    """Plain Adam mini-batch training of the identical architecture.

    Each step draws random training windows from all regular users and
    minimizes the same pairwise objective; there are no episodes and no
    inner adaptation, so this is the meta-less arm of the comparison.
    Mutates ``params``; returns the loss trace.
    """
    cfg.validate()
    config = params.config
    rng_batch = component_rng(seed, "joint/batches")
    rng_neg = component_rng(seed, "joint/negatives")
    rng_plan = component_rng(seed, "joint/neighbor-plan")
    user_positives = {u: set(h) for u, h in histories.items()}
    eligible = sorted(u for u, h in histories.items()
                      if len(h) >= config.t_min + 1)
    if not eligible:
        raise ValueError("no users long enough for training windows")
    if batch_size is None:
        batch_size = cfg.task_batch * cfg.n_way
    adam = adam if adam is not None else meta_mod.AdamState()
    cap = cfg.max_outer_steps if max_steps is None else max_steps
    trace = []
    for step in range(cap):
        plan = gr.sample_neighbor_plan(graph_, config.neighbor_cap,
                                       config.diffusion_depth, rng_plan) \
            if config.use_diffusion else None
        picked = rng_batch.choice(len(eligible), size=batch_size)
        batch = [window_sequence(histories[eligible[i]], config.t_min,
                                 config.t_max, rng_batch, user=eligible[i])
                 for i in picked]
        tape, loss, _ = losses.build_model_loss(
            graph_, params, batch, cfg.k_neg, rng_neg, user_positives,
            plan=plan)
        tape.forward()
        tape.backward(loss)
        g1 = {k: tape.grads[k] for k in params.theta1 if k in tape.grads}
        g2 = {k: tape.grads[k] for k in params.theta2 if k in tape.grads}
        adam.apply(params.theta1, g1, cfg)
        adam.apply(params.theta2, g2, cfg)
        value = float(loss.value)
        trace.append((step, value))
        if on_step:
            on_step(step, value)
    return trace
