"""Episodic meta-training and meta-test adaptation.

Training alternates an inner loop and an outer loop. The inner loop adapts
only the sequence/scorer weights (theta2) to each task's support set with
plain SGD; the entity embeddings and diffusion weights (theta1) are shared
across users and stay frozen during adaptation. The outer loop evaluates
each task's query set at its adapted weights and applies one Adam step with
decoupled weight decay to both partitions.

The meta-gradient is first-order by default (the inner update is treated
as a stop-gradient). Exact mode assembles the correction term of the
bilevel derivative from central finite differences of the support gradient
(Hessian-vector and cross products); it is meant for tiny models, supports
a single inner step, and makes the first-order approximation auditable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import graph as gr
from . import losses
from . import sequence as seq
from .autodiff import Tape
from .data import BehaviorSequence, usable_sequence_count, window_sequence
from .seeding import component_rng

log = logging.getLogger(__name__)


@dataclass
class MetaConfig:
    inner_lr: float = 1e-4
    outer_lr: float = 1e-2
    inner_steps: int = 1
    weight_decay: float = 5e-4
    task_batch: int = 16
    n_way: int = 15
    k_support: int = 5
    k_query: int = 15
    order: str = "first"            # "first" | "exact"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_outer_steps: int = 2000
    k_neg: int = 1
    plateau_windows: int = 5
    window_steps: int = 20
    plateau_tol: float = 1e-4
    diffusion_refresh: int = 1      # rebuild diffusion every N outer steps
    fine_tune_steps: int = 5
    fine_tune_lr: float | None = None

    def validate(self):
        if self.inner_lr < 0 or self.outer_lr <= 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive (inner_lr may be 0 "
                             "for diagnostics)")
        if self.order not in ("first", "exact"):
            raise ValueError(f"unknown meta-gradient order {self.order!r}")
        if min(self.task_batch, self.n_way, self.k_support, self.k_query,
               self.k_neg, self.inner_steps) < 1:
            raise ValueError("episode sizes must be positive")

    @property
    def adaptation_lr(self) -> float:
        return self.inner_lr if self.fine_tune_lr is None else self.fine_tune_lr


@dataclass(frozen=True)
class MetaTask:
    users: tuple[int, ...]
    support: tuple[BehaviorSequence, ...]
    query: tuple[BehaviorSequence, ...]


def sample_task(histories, cfg, rng, t_min=2, t_max=10) -> MetaTask:
    """One episode: n_way users, disjoint support/query windows per user.

    A user's candidate sequences are keyed by target position, so support
    and query never share a target. Users need at least
    k_support + k_query usable sequences to be eligible.
    """
    need = cfg.k_support + cfg.k_query
    eligible = sorted(u for u, h in histories.items()
                      if usable_sequence_count(len(h), t_min) >= need)
    if len(eligible) < cfg.n_way:
        raise ValueError(
            f"need {cfg.n_way} users with >= {need} usable sequences, "
            f"only {len(eligible)} eligible")
    picked = sorted(rng.choice(len(eligible), size=cfg.n_way, replace=False))
    support = []
    query = []
    users = []
    for idx in picked:
        user = eligible[idx]
        users.append(user)
        history = histories[user]
        targets = np.arange(t_min, len(history))
        chosen = rng.choice(len(targets), size=need, replace=False)
        for j, pick in enumerate(chosen):
            window = window_sequence(history, t_min, t_max, rng, user=user,
                                     target_index=int(targets[pick]))
            (support if j < cfg.k_support else query).append(window)
    return MetaTask(users=tuple(users), support=tuple(support),
                    query=tuple(query))


@dataclass
class AdamState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def apply(self, params, grads, cfg):
        """One Adam step with decoupled weight decay, in place."""
        self.step += 1
        b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        correct1 = 1.0 - b1 ** self.step
        correct2 = 1.0 - b2 ** self.step
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            m = self.first.setdefault(name, np.zeros_like(value))
            v = self.second.setdefault(name, np.zeros_like(value))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = (m / correct1) / (np.sqrt(v / correct2) + eps)
            value -= cfg.outer_lr * update
            if cfg.weight_decay:
                value -= cfg.outer_lr * cfg.weight_decay * value


class LossTape:
    """A loss graph that can be re-evaluated at rebound parameter values."""

    def __init__(self, tape, loss):
        self.tape = tape
        self.loss = loss

    @classmethod
    def over_features(cls, features, theta2, sequences, cfg, rng,
                      user_positives, n_items, model_config):
        """Support-style tape: concrete item features, theta2 trainable."""
        tape = Tape()
        nodes = {name: tape.param(name, value)
                 for name, value in theta2.items()}
        loss, _ = losses.build_batch_loss(
            tape, tape.constant(features), nodes, list(sequences), cfg.k_neg,
            rng, user_positives, n_items, t_min=model_config.t_min,
            use_sequence=model_config.use_sequence)
        return cls(tape, loss)

    @classmethod
    def bilevel(cls, graph_, params, sequences, cfg, rng, user_positives,
                plan):
        """Full-stack tape with theta1 in-graph (exact mode, tiny models)."""
        tape, loss, _ = losses.build_model_loss(
            graph_, params, list(sequences), cfg.k_neg, rng, user_positives,
            plan=plan)
        return cls(tape, loss)

    def loss_and_grads(self, rebind=None):
        if rebind:
            for name, value in rebind.items():
                self.tape.set_param(name, value)
        self.tape.zero_grad()
        self.tape.forward()
        self.tape.backward(self.loss)
        return float(self.loss.value), {k: v.copy()
                                        for k, v in self.tape.grads.items()}


def inner_adapt(params, support, cfg, features, rng, user_positives,
                n_items) -> dict[str, np.ndarray]:
    """SGD-adapt theta2 on a support set; theta1 and ``params`` untouched.

    ``features`` is the frozen item-feature table computed from theta1 once
    per task batch. Returns the adapted copy of theta2.
    """
    theta2 = {k: v.copy() for k, v in params.theta2.items()}
    if cfg.inner_lr == 0.0 or not support:
        return theta2
    tape = LossTape.over_features(features, theta2, support, cfg, rng,
                                  user_positives, n_items, params.config)
    for _ in range(cfg.inner_steps):
        _, grads = tape.loss_and_grads(theta2)
        for name in theta2:
            g = grads.get(name)
            if g is not None:
                theta2[name] = theta2[name] - cfg.inner_lr * g
    return theta2


def exact_meta_grads(theta2, support_grads, query_grads, inner_lr,
                     hvp_scale=1e-5):
    """Meta-gradient through one exact inner step, on parameter dicts.

    ``support_grads(theta2) -> (g1, g2)`` and
    ``query_grads(theta2_adapted) -> (loss, g1, g2)`` evaluate the two
    objectives at the current theta1. The second-order terms (the
    Hessian-vector product in theta2 and the cross theta1 derivative of
    the support gradient) come from central differences of
    ``support_grads`` along the query-gradient direction.
    """
    g_s1, g_s2 = support_grads(theta2)
    del g_s1
    adapted = {k: theta2[k] - inner_lr * g_s2[k] for k in theta2}
    loss, g_q1, g_q2 = query_grads(adapted)
    vnorm = np.sqrt(sum(float((g * g).sum()) for g in g_q2.values()))
    if vnorm < 1e-12 or inner_lr == 0.0:
        return loss, g_q1, g_q2
    pnorm = np.sqrt(sum(float((p * p).sum()) for p in theta2.values()))
    r = hvp_scale * (1.0 + pnorm) / vnorm
    hi1, hi2 = support_grads({k: theta2[k] + r * g_q2[k] for k in theta2})
    lo1, lo2 = support_grads({k: theta2[k] - r * g_q2[k] for k in theta2})
    g1 = {k: g_q1[k] - inner_lr * (hi1[k] - lo1[k]) / (2 * r) for k in g_q1}
    g2 = {k: g_q2[k] - inner_lr * (hi2[k] - lo2[k]) / (2 * r) for k in g_q2}
    return loss, g1, g2


class MetaTrainer:
    """Drives episodic training over regular-user histories."""

    def __init__(self, graph_, histories, params, cfg, seed):
        cfg.validate()
        self.graph = graph_
        self.histories = histories
        self.params = params
        self.cfg = cfg
        self.seed = seed
        self.user_positives = {u: set(h) for u, h in histories.items()}
        self.adam = AdamState()
        self._plan = None
        self._features = None
        self._theta1_live = True

    def _rng(self, kind, step, task=None):
        """Per-(phase, step, task) stream so gradient modes and execution
        order cannot change which negatives or windows are drawn."""
        suffix = f"/{task}" if task is not None else ""
        return component_rng(self.seed, f"meta/{kind}/{step}{suffix}")

    # ----------------------------------------------------------- plumbing

    def _refresh_features(self, step):
        """Item-feature table for the inner loops of this outer step.

        Diffusion is rebuilt every ``diffusion_refresh`` steps; in between,
        the cached table is reused and theta1 only moves through weight
        decay (the stale-feature trade-off is the point of the cache).
        """
        config = self.params.config
        refresh_due = self._features is None or \
            step % max(1, self.cfg.diffusion_refresh) == 0
        if refresh_due:
            rng = self._rng("neighbor-plan", step)
            if config.use_diffusion:
                self._plan = gr.sample_neighbor_plan(
                    self.graph, config.neighbor_cap, config.diffusion_depth,
                    rng)
                self._features = self._features_from_plan(self._plan)
            else:
                self._features = losses.cached_item_features(
                    self.graph, self.params, rng)
        self._theta1_live = refresh_due or not config.use_diffusion
        return self._features

    def _features_from_plan(self, plan):
        tape = Tape()
        nodes = {name: tape.param(name, value)
                 for name, value in self.params.theta1.items()}
        out = losses.item_feature_node(tape, self.graph, nodes,
                                       self.params.config, plan=plan)
        tape.forward()
        return out.value.copy()

    def sample_tasks(self, step=0):
        config = self.params.config
        rng = self._rng("tasks", step)
        return [sample_task(self.histories, self.cfg, rng,
                            config.t_min, config.t_max)
                for _ in range(self.cfg.task_batch)]

    # --------------------------------------------------------- outer loop

    def outer_update(self, tasks, step=0):
        """Adapt every task, then one Adam step on the summed query loss.

        Returns the mean per-task query loss. First-order mode shares one
        query tape across tasks (the diffusion subgraph is built once);
        exact mode runs per-task bilevel corrections.
        """
        self._refresh_features(step)
        if self.cfg.order == "exact":
            # exact mode re-derives the adaptation inside the bilevel
            # correction, with theta1 in-graph
            loss, g1, g2 = self._exact_outer_grads(tasks, step)
        else:
            features = self._features
            adapted = [
                inner_adapt(self.params, task.support, self.cfg, features,
                            self._rng("support-neg", step, t),
                            self.user_positives, self.graph.n_items)
                for t, task in enumerate(tasks)
            ]
            loss, g1, g2 = self._first_order_grads(tasks, adapted, step)
        self.adam.apply(self.params.theta1, g1, self.cfg)
        self.adam.apply(self.params.theta2, g2, self.cfg)
        return loss / len(tasks)

    def _first_order_grads(self, tasks, adapted, step):
        config = self.params.config
        tape = Tape()
        if config.use_diffusion and not self._theta1_live:
            features = tape.constant(self._features)
        else:
            theta1_nodes = {name: tape.param(name, value)
                            for name, value in self.params.theta1.items()}
            features = losses.item_feature_node(
                tape, self.graph, theta1_nodes, config, plan=self._plan)
        total = None
        for t, (task, theta2) in enumerate(zip(tasks, adapted)):
            nodes = {name: tape.param(f"task{t}/{name}", value)
                     for name, value in theta2.items()}
            task_loss, _ = losses.build_batch_loss(
                tape, features, nodes, list(task.query), self.cfg.k_neg,
                self._rng("query-neg", step, t), self.user_positives,
                self.graph.n_items, t_min=config.t_min,
                use_sequence=config.use_sequence)
            total = task_loss if total is None else tape.add(total, task_loss)
        tape.forward()
        tape.backward(total)
        g1 = {name: tape.grads[name] for name in self.params.theta1
              if name in tape.grads}
        g2 = {}
        for t in range(len(tasks)):
            for name in self.params.theta2:
                g = tape.grads.get(f"task{t}/{name}")
                if g is not None:
                    g2[name] = g2.get(name, 0) + g
        return float(total.value), g1, g2

    def _exact_outer_grads(self, tasks, step):
        if self.cfg.inner_steps != 1:
            raise NotImplementedError(
                "exact meta-gradients support a single inner step")
        total_loss = 0.0
        sum_g1: dict[str, np.ndarray] = {}
        sum_g2: dict[str, np.ndarray] = {}
        for t, task in enumerate(tasks):
            support_tape = LossTape.bilevel(
                self.graph, self.params, task.support, self.cfg,
                self._rng("support-neg", step, t), self.user_positives,
                self._plan)
            query_tape = LossTape.bilevel(
                self.graph, self.params, task.query, self.cfg,
                self._rng("query-neg", step, t), self.user_positives,
                self._plan)

            def split(grads):
                g1 = {k: grads[k] for k in self.params.theta1 if k in grads}
                g2 = {k: grads.get(k, np.zeros_like(v))
                      for k, v in self.params.theta2.items()}
                return g1, g2

            def support_grads(theta2, _tape=support_tape, _split=split):
                _, grads = _tape.loss_and_grads(theta2)
                return _split(grads)

            def query_grads(theta2, _tape=query_tape, _split=split):
                loss, grads = _tape.loss_and_grads(theta2)
                g1, g2 = _split(grads)
                return loss, g1, g2

            loss, g1, g2 = exact_meta_grads(
                {k: v.copy() for k, v in self.params.theta2.items()},
                support_grads, query_grads, self.cfg.inner_lr)
            total_loss += loss
            for k, v in g1.items():
                sum_g1[k] = sum_g1.get(k, 0) + v
            for k, v in g2.items():
                sum_g2[k] = sum_g2.get(k, 0) + v
        return total_loss, sum_g1, sum_g2

    # --------------------------------------------------------- train loop

    def train(self, max_steps=None, on_step=None):
        """Run outer steps until plateau or the step cap; returns the trace.

        The trace holds (step, mean task query loss). Convergence: no
        window-mean improvement beyond ``plateau_tol`` for
        ``plateau_windows`` consecutive windows of ``window_steps`` steps.
        """
        cap = self.cfg.max_outer_steps if max_steps is None else max_steps
        trace = []
        window: list[float] = []
        best = np.inf
        stale = 0
        for step in range(cap):
            tasks = self.sample_tasks(step)
            loss = self.outer_update(tasks, step)
            trace.append((step, loss))
            if on_step:
                on_step(step, loss)
            window.append(loss)
            if len(window) >= self.cfg.window_steps:
                mean = float(np.mean(window))
                window.clear()
                if best - mean > self.cfg.plateau_tol:
                    best = mean
                    stale = 0
                else:
                    stale += 1
                    if stale >= self.cfg.plateau_windows:
                        log.info("query loss plateaued at step %d", step)
                        break
        return trace


def meta_train(graph_, histories, params, cfg, seed, max_steps=None,
               on_step=None):
    """Episodic training entry point: mutates ``params``, returns the trace."""
    trainer = MetaTrainer(graph_, histories, params, cfg, seed)
    return trainer.train(max_steps=max_steps, on_step=on_step)


def fine_tune_theta2(params, support, features, cfg, rng, user_positives,
                     n_items, steps) -> dict[str, np.ndarray]:
    """Meta-test adaptation: ``steps`` SGD updates of theta2 on a new
    user's support sequences against frozen features."""
    theta2 = {k: v.copy() for k, v in params.theta2.items()}
    if steps == 0 or not support:
        return theta2
    tape = LossTape.over_features(features, theta2, support, cfg, rng,
                                  user_positives, n_items, params.config)
    lr = cfg.adaptation_lr
    for _ in range(steps):
        _, grads = tape.loss_and_grads(theta2)
        for name in theta2:
            g = grads.get(name)
            if g is not None:
                theta2[name] = theta2[name] - lr * g
    return theta2


def preference_vector(params, theta2, features, scoring_window):
    window = list(scoring_window)[-params.config.t_max:]
    if params.config.use_sequence:
        return seq.encode_sequence(features[window], theta2)
    return features[window].mean(axis=0)


def fine_tune_and_predict(params, support, scoring_window, candidates,
                          steps, features, cfg, rng,
                          user_positives=None) -> list[tuple[int, float]]:
    """Adapt to a new user and rank candidate items.

    ``support`` are the user's adaptation sequences (may be empty: the
    meta-initialization scores directly), ``scoring_window`` the item-id
    window preceding the held-out target. Returns (item, score) pairs in
    descending score order, ties broken by ascending item id.
    """
    positives = user_positives if user_positives is not None else \
        {s.user: set(s.items) | {s.target} for s in support}
    theta2 = fine_tune_theta2(params, list(support), features, cfg, rng,
                              positives, features.shape[0], steps)
    s_u = preference_vector(params, theta2, features, scoring_window)
    scores = seq.score_candidates(s_u, features[list(candidates)], theta2)
    ranked = sorted(zip(candidates, scores), key=lambda p: (-p[1], p[0]))
    return [(int(item), float(value)) for item, value in ranked]
