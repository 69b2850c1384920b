"""Bipartite user-item interaction graph and stacked convolution embeddings.

Entities share one index space: users occupy ids ``0..n_users-1`` and items
``n_users..n_users+n_items-1``. One convolution step mean-pools sampled
neighbor features, projects them to a latent vector, merges with the
entity's inherent feature and L2-normalizes. Stacking ``depth`` such layers
propagates information across multi-hop neighborhoods.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape

# parameter name templates for one convolution layer
LATENT_W = "diff{layer}.latent_w"   # d x d, applied to the pooled neighbor mean
LATENT_B = "diff{layer}.latent_b"   # d
MERGE_W = "diff{layer}.merge_w"     # d x 2d, applied to [inherent; latent]
MERGE_B = "diff{layer}.merge_b"     # d
INHERENT = "emb.inherent"           # |V| x d free embeddings


@dataclass(frozen=True)
class InteractionGraph:
    """Immutable bipartite adjacency over the shared entity index space."""

    n_users: int
    n_items: int
    adjacency: tuple[tuple[int, ...], ...]

    @property
    def n_entities(self) -> int:
        return self.n_users + self.n_items

    def item_entity(self, item: int) -> int:
        return self.n_users + item

    def neighbors(self, entity: int) -> tuple[int, ...]:
        return self.adjacency[entity]

    def degree(self, entity: int) -> int:
        return len(self.adjacency[entity])


def build_interaction_graph(interactions, n_users, n_items) -> InteractionGraph:
    """Deduplicated symmetric adjacency from (user, item) pairs.

    Ids must be dense integers in range; anything else raises ValueError.
    Neighbor lists come out sorted, so construction is order-independent.
    """
    adj = [set() for _ in range(n_users + n_items)]
    for user, item in interactions:
        if not (0 <= user < n_users):
            raise ValueError(f"user id {user} out of range [0, {n_users})")
        if not (0 <= item < n_items):
            raise ValueError(f"item id {item} out of range [0, {n_items})")
        e_item = n_users + item
        adj[user].add(e_item)
        adj[e_item].add(user)
    return InteractionGraph(
        n_users=n_users,
        n_items=n_items,
        adjacency=tuple(tuple(sorted(s)) for s in adj),
    )


def sample_neighbors(graph, entity, cap, rng) -> list[int]:
    """All neighbors when degree <= cap, else a uniform sample without
    replacement of size cap. Returned sorted so downstream mean pooling is
    independent of sampling order. Isolated entities yield []."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    nbrs = graph.neighbors(entity)
    if len(nbrs) <= cap:
        return list(nbrs)
    picked = rng.choice(len(nbrs), size=cap, replace=False)
    return sorted(nbrs[i] for i in picked)


def sample_neighbor_plan(graph, cap, depth, rng) -> list[list[list[int]]]:
    """Per-layer, per-entity neighbor samples, fixed for one diffusion pass."""
    return [
        [sample_neighbors(graph, e, cap, rng) for e in range(graph.n_entities)]
        for _ in range(depth)
    ]


def init_diffusion_params(n_entities, dim, depth, rng) -> dict[str, np.ndarray]:
    """Inherent embeddings plus per-layer convolution weights.

    Embeddings are uniform in [-1/sqrt(d), 1/sqrt(d)]; weight matrices use
    the same scale over their fan-in.
    """
    bound = 1.0 / np.sqrt(dim)
    params = {INHERENT: rng.uniform(-bound, bound, size=(n_entities, dim))}
    for layer in range(depth):
        params[LATENT_W.format(layer=layer)] = rng.uniform(
            -bound, bound, size=(dim, dim))
        params[LATENT_B.format(layer=layer)] = np.zeros(dim)
        merge_bound = 1.0 / np.sqrt(2 * dim)
        params[MERGE_W.format(layer=layer)] = rng.uniform(
            -merge_bound, merge_bound, size=(dim, 2 * dim))
        params[MERGE_B.format(layer=layer)] = np.zeros(dim)
    return params


def build_convolve(tape, inherent_row, neighbor_rows, latent_w, latent_b,
                   merge_w, merge_b):
    """One convolution for one entity, as tape nodes.

    ``inherent_row`` is a (1, d) node; ``neighbor_rows`` a (k, d) node or
    None when the entity is isolated (aggregate treated as the zero vector).
    Returns the (1, d) normalized output node.
    """
    if neighbor_rows is None:
        d = latent_b  # (d,) param node gives us the width
        pooled = tape.scale(tape.reshape(d, (1, -1)), 0.0)
    else:
        pooled = tape.reshape(tape.mean_axis(neighbor_rows, 0), (1, -1))
    latent = tape.relu(tape.add(tape.matmul(pooled, tape.transpose(latent_w)),
                                latent_b))
    merged = tape.concat([inherent_row, latent], axis=1)
    fused = tape.relu(tape.add(tape.matmul(merged, tape.transpose(merge_w)),
                               merge_b))
    return tape.l2norm(fused)


def convolve(inherent, neighbor_feats, latent_w, latent_b, merge_w, merge_b,
             aggregator="mean"):
    """Value-level single-entity convolution (see :func:`build_convolve`).

    ``aggregator`` is "mean" (default) or "max". Empty neighborhoods
    aggregate to the zero vector.
    """
    inherent = np.asarray(inherent, dtype=np.float64)
    if len(neighbor_feats) == 0:
        pooled = np.zeros_like(inherent)
    else:
        stack = np.asarray(neighbor_feats, dtype=np.float64)
        pooled = stack.max(axis=0) if aggregator == "max" else stack.mean(axis=0)
    tape = Tape()
    out = build_convolve(
        tape,
        tape.reshape(tape.leaf("inherent", inherent), (1, -1)),
        tape.reshape(tape.leaf("pooled", pooled), (1, -1)),
        tape.leaf("lw", latent_w), tape.leaf("lb", latent_b),
        tape.leaf("mw", merge_w), tape.leaf("mb", merge_b),
    )
    tape.forward()
    return out.value[0]


def build_diffusion(tape, graph, plan, param_nodes, depth, aggregator="mean"):
    """Stacked convolutions over all entities, as tape nodes.

    Layer k consumes layer k-1 outputs (layer 0 is the inherent table) and
    updates every entity synchronously. Entities are processed in groups of
    equal sampled-neighbor count so each group is a handful of batched
    matrix nodes; a final gather restores entity order. Returns the
    (|V|, d) diffused matrix node.
    """
    n = graph.n_entities
    features = param_nodes[INHERENT]
    inherent = features
    for layer in range(depth):
        lw = param_nodes[LATENT_W.format(layer=layer)]
        lb = param_nodes[LATENT_B.format(layer=layer)]
        mw = param_nodes[MERGE_W.format(layer=layer)]
        mb = param_nodes[MERGE_B.format(layer=layer)]
        samples = plan[layer]
        by_count: dict[int, list[int]] = {}
        for e in range(n):
            by_count.setdefault(len(samples[e]), []).append(e)
        group_nodes = []
        order = []
        for count in sorted(by_count):
            entities = by_count[count]
            order.extend(entities)
            if count == 0:
                pooled = tape.scale(tape.lookup(inherent, entities), 0.0)
            else:
                cols = [tape.lookup(features, [samples[e][j] for e in entities])
                        for j in range(count)]
                acc = cols[0]
                for col in cols[1:]:
                    acc = tape.add(acc, col)
                if aggregator == "max":
                    pooled = _rowwise_max(tape, cols)
                else:
                    pooled = tape.scale(acc, 1.0 / count)
            latent = tape.relu(tape.add(
                tape.matmul(pooled, tape.transpose(lw)), lb))
            merged = tape.concat([tape.lookup(inherent, entities), latent],
                                 axis=1)
            fused = tape.relu(tape.add(
                tape.matmul(merged, tape.transpose(mw)), mb))
            group_nodes.append(tape.l2norm(fused))
        stacked = group_nodes[0] if len(group_nodes) == 1 else tape.concat(
            group_nodes, axis=0)
        inverse = np.empty(n, dtype=np.intp)
        inverse[np.asarray(order, dtype=np.intp)] = np.arange(n)
        features = tape.lookup(stacked, inverse)
    return features


def _rowwise_max(tape, cols):
    # max(a, b) = a + relu(b - a), folded across the column nodes
    acc = cols[0]
    for col in cols[1:]:
        acc = tape.add(acc, tape.relu(tape.add(col, tape.neg(acc))))
    return acc


@dataclass
class EmbeddingTable:
    """Inherent and diffused feature matrices over the entity index space."""

    inherent: np.ndarray
    diffused: np.ndarray

    @property
    def dim(self) -> int:
        return self.inherent.shape[1]


def diffuse_all(graph, params, depth, cap, rng, aggregator="mean"):
    """Value-level diffusion pass: returns an :class:`EmbeddingTable`.

    Deterministic given the rng state (neighbor sampling is the only
    randomness). ``depth`` must be >= 1.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    plan = sample_neighbor_plan(graph, cap, depth, rng)
    tape = Tape()
    nodes = {name: tape.param(name, value) for name, value in params.items()}
    out = build_diffusion(tape, graph, plan, nodes, depth, aggregator)
    tape.forward()
    return EmbeddingTable(inherent=params[INHERENT].copy(),
                          diffused=out.value.copy())
