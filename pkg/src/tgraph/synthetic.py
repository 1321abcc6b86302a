"""Seeded synthetic layout datasets with a known runtime function.

Each graph is a random DAG.  Runtimes are a deterministic function of the
configuration, drawn once per dataset from the seed::

    runtime(c) = sum over all nodes        base_cost[opcode]
               + sum over configurable n   node_table[opcode[n]][code(c, n)]
               + sum over edges (u, v) with both ends configurable
                                           interaction[code(c, u)][code(c, v)]

``code(c, n) = output[0] + 4 * input[0]`` is the pair of minor-most axes the
configuration assigns to node ``n``.  All tables are integers, so runtimes are
exact integer nanoseconds and can be recomputed from ``oracle.json``.  The
interaction term charges a penalty when two adjacent configurable nodes
disagree on their minor-most output or input axis; it is symmetric, so edge
direction does not matter.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import (
    FEATURE_DIM, LAYOUT_SLOTS, NUMERIC_DIM, CollectionKind, ComputationGraph,
    ConfigurationSet, GraphRecord, make_manifest, save_dataset, write_json,
)

ORACLE = "oracle.json"
N_CODES = 16
CONFIGURABLE_OPCODES = (0, 1, 2)  # convolution, dot, reshape
CONVOLUTION = 0
ONE_HOT_OFFSET = 30
SHAPE_DIM = 8


def draw_tables(rng, n_opcodes, node_scale=4000, interaction_scale=1500):
    node_table = rng.integers(0, node_scale, size=(n_opcodes, N_CODES))
    # neighbours that disagree on a minor-most axis pay a relayout penalty
    out_penalty, in_penalty = rng.integers(interaction_scale // 2, interaction_scale + 1, size=2)
    codes = np.arange(N_CODES)
    interaction = (out_penalty * (codes[:, None] % 4 != codes[None, :] % 4)
                   + in_penalty * (codes[:, None] // 4 != codes[None, :] // 4))
    base_cost = rng.integers(100, 1000, size=n_opcodes)
    return {"node_table": node_table, "interaction": interaction, "base_cost": base_cost}


def layout_code(layouts):
    """Minor-most output axis + 4 * minor-most input axis; works on ``(..., 3, 6)``."""
    layouts = np.asarray(layouts)
    return layouts[..., 0, 0] + 4 * layouts[..., 1, 0]


def oracle_runtimes(graph, layouts, tables):
    """Recompute runtimes of ``layouts`` ``(n, M, 3, 6)`` for ``graph`` from the tables."""
    node_table = np.asarray(tables["node_table"])
    interaction = np.asarray(tables["interaction"])
    base = int(np.asarray(tables["base_cost"])[graph.opcodes].sum())
    n = layouts.shape[0]
    if graph.configurable_nodes.size == 0:
        return np.full(n, base, dtype=np.int64)
    codes = layout_code(layouts)  # (n, M)
    ops = graph.opcodes[graph.configurable_nodes]
    total = base + node_table[ops[None, :], codes].sum(axis=1)
    slot = {int(v): i for i, v in enumerate(graph.configurable_nodes)}
    for u, v in graph.edges.tolist():
        if u in slot and v in slot:
            total = total + interaction[codes[:, slot[u]], codes[:, slot[v]]]
    return total.astype(np.int64)


def _padded(perm):
    out = np.full(LAYOUT_SLOTS, -1, dtype=np.int64)
    out[:len(perm)] = perm
    return out


def random_graph(rng, graph_id, n_nodes, n_opcodes, configurable_prob=0.4, min_configurable=2):
    """A random DAG with zero-padded layout slots and rank metadata."""
    n_plain = n_opcodes - len(CONFIGURABLE_OPCODES)
    opcodes = np.where(rng.random(n_nodes) < configurable_prob,
                       rng.integers(0, len(CONFIGURABLE_OPCODES), n_nodes),
                       len(CONFIGURABLE_OPCODES) + rng.integers(0, n_plain, n_nodes))
    configurable = np.isin(opcodes, CONFIGURABLE_OPCODES)
    short = min_configurable - int(configurable.sum())
    if short > 0:
        promote = rng.choice(np.flatnonzero(~configurable), size=short, replace=False)
        opcodes[promote] = rng.integers(0, len(CONFIGURABLE_OPCODES), short)

    edges = []
    for i in range(1, n_nodes):
        window = np.arange(max(0, i - 5), i)
        k = min(len(window), 1 + int(rng.random() < 0.35))
        for p in np.sort(rng.choice(window, size=k, replace=False)):
            edges.append((int(p), i))
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    rank = rng.integers(2, 5, size=n_nodes)
    node_feat = np.zeros((n_nodes, FEATURE_DIM))
    node_feat[np.arange(n_nodes), ONE_HOT_OFFSET + opcodes] = 1.0
    # Only structural features: the oracle ignores tensor sizes, and random
    # filler columns would just give a small training set noise to memorise.
    for i in range(n_nodes):
        node_feat[i, 12:12 + rank[i]] = SHAPE_DIM
        node_feat[i, 16] = SHAPE_DIM * rank[i]
        # zero-padded descending minor-to-major, as emitted by the compiler
        node_feat[i, NUMERIC_DIM:NUMERIC_DIM + rank[i]] = np.arange(rank[i])[::-1]
    node_feat[:, 17] = np.bincount(edges[:, 1], minlength=n_nodes)
    node_feat[:, 18] = np.bincount(edges[:, 0], minlength=n_nodes)

    graph = ComputationGraph(
        graph_id=graph_id, opcodes=opcodes, node_feat=node_feat, edges=edges,
        configurable_nodes=np.flatnonzero(np.isin(opcodes, CONFIGURABLE_OPCODES)),
        layout_rank=rank, pad_value=0)
    return graph.validate()


def random_layouts(rng, graph, n_configs):
    """``(n_configs, M, 3, 6)`` random permutation layouts for the configurable nodes."""
    cfg = graph.configurable_nodes
    in_rank = rng.integers(2, 5, size=cfg.size)
    out = np.full((n_configs, cfg.size, 3, LAYOUT_SLOTS), -1, dtype=np.int64)
    for c in range(n_configs):
        for m, node in enumerate(cfg):
            out[c, m, 0] = _padded(rng.permutation(graph.layout_rank[node]))
            out[c, m, 1] = _padded(rng.permutation(in_rank[m]))
            if graph.opcodes[node] == CONVOLUTION:
                out[c, m, 2] = _padded(rng.permutation(4))
    return out


def default_style_layouts(rng, graph, n_configs, change_prob=0.15):
    """Low-variance configurations: a per-graph default with a few nodes re-drawn.

    Each configuration re-draws one or more configurable nodes (one chosen
    uniformly, every other with probability ``change_prob``); a re-drawn layout
    can coincide with the default.
    """
    drawn = random_layouts(rng, graph, n_configs + 1)
    default, fresh = drawn[0], drawn[1:]
    m = graph.configurable_nodes.size
    changed = rng.random((n_configs, m)) < change_prob
    if m:
        changed[np.arange(n_configs), rng.integers(0, m, n_configs)] = True
    return np.where(changed[:, :, None, None], fresh, default[None])


def synthesize(seed, n_graphs, nodes_range=(8, 40), configs_per_graph=200, n_opcodes=12,
               kind=CollectionKind("layout_random"), node_scale=4000, interaction_scale=1500):
    """Build the records and oracle tables in memory (see :func:`generate_synthetic`)."""
    lo, hi = nodes_range
    if lo < 4 or hi < lo:
        raise ValueError("nodes_range must satisfy 4 <= min <= max")
    if configs_per_graph < 2:
        raise ValueError("configs_per_graph must be >= 2")
    if not len(CONFIGURABLE_OPCODES) < n_opcodes <= NUMERIC_DIM - ONE_HOT_OFFSET:
        raise ValueError(f"n_opcodes must be in ({len(CONFIGURABLE_OPCODES)}, {NUMERIC_DIM - ONE_HOT_OFFSET}]")
    if kind.is_tile:
        raise ValueError("the synthetic generator emits layout collections only")
    rng = np.random.default_rng(seed)
    tables = draw_tables(rng, n_opcodes, node_scale, interaction_scale)
    records = []
    width = len(str(n_graphs - 1))
    for g in range(n_graphs):
        graph = random_graph(rng, f"g{g:0{width}d}", int(rng.integers(lo, hi + 1)), n_opcodes)
        if kind.mode == "layout_default":
            layouts = default_style_layouts(rng, graph, configs_per_graph)
        else:
            layouts = random_layouts(rng, graph, configs_per_graph)
        runtimes = oracle_runtimes(graph, layouts, tables)
        records.append(GraphRecord(graph, ConfigurationSet(runtimes, layouts=layouts), kind))
    return records, tables


def generate_synthetic(out_dir, seed, n_graphs, nodes_range=(8, 40), configs_per_graph=200,
                       n_opcodes=12, kind=CollectionKind("layout_random"), **scales):
    """Write a synthetic dataset to ``out_dir``; same arguments give identical bytes."""
    records, tables = synthesize(seed, n_graphs, nodes_range, configs_per_graph, n_opcodes, kind, **scales)
    out_dir = Path(out_dir)
    manifest = make_manifest(kind, n_opcodes, ["train"], synthetic_seed=int(seed))
    save_dataset(out_dir, records, manifest)
    write_json(out_dir / ORACLE, {
        "seed": int(seed),
        "configurable_opcodes": list(CONFIGURABLE_OPCODES),
        "code": "output[0] + 4 * input[0]",
        **{k: np.asarray(v).tolist() for k, v in tables.items()},
    })
    return out_dir
