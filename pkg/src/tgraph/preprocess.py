"""Graph pruning, configuration de-duplication, layout compression, pad
normalisation and feature scaling.

Preprocessed graphs keep their configurations compressed (three base-7
integers per configurable node) both on disk and in memory; layouts are only
expanded for the configurations sampled into a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    CONFIG_SLOTS, LAYOUT_SLOTS, MANIFEST, NUMERIC_DIM, TILE_CONFIG_DIM, CollectionKind,
    ComputationGraph, ConfigurationSet, SchemaError, ValidationError, graph_files,
    graph_from_doc, graph_to_doc, load_graph, read_json, read_manifest, validate_layouts,
    write_json,
)

CODE_LIMIT = 7 ** LAYOUT_SLOTS  # 117649
_POWERS = 7 ** np.arange(LAYOUT_SLOTS, dtype=np.int64)
STD_FLOOR = 1e-6


# -- pruning ----------------------------------------------------------------

@dataclass
class PrunedGraph(ComputationGraph):
    """A graph restricted to configurable nodes and their direct neighbours.

    ``node_origin[i]`` is the index of new node ``i`` in the original graph.
    """

    node_origin: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        origin = np.arange(self.n_nodes) if self.node_origin is None else self.node_origin
        self.node_origin = np.asarray(origin, dtype=np.int64).reshape(-1)

    @property
    def empty(self):
        """True when the source graph had no configurable node (nothing to rank)."""
        return self.configurable_nodes.size == 0


def keep_mask(graph):
    """Nodes that are configurable or adjacent (either direction) to one."""
    keep = np.zeros(graph.n_nodes, dtype=bool)
    keep[graph.configurable_nodes] = True
    if graph.edges.size:
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        configurable = keep.copy()
        keep[src[configurable[dst]]] = True
        keep[dst[configurable[src]]] = True
    return keep


def _subgraph(graph, keep):
    origin = np.flatnonzero(keep)
    new_index = np.full(graph.n_nodes, -1, dtype=np.int64)
    new_index[origin] = np.arange(origin.size)
    edges = graph.edges
    if edges.size:
        edges = edges[keep[edges[:, 0]] & keep[edges[:, 1]]]
    return PrunedGraph(
        graph_id=graph.graph_id,
        opcodes=graph.opcodes[origin],
        node_feat=graph.node_feat[origin],
        edges=new_index[edges],
        configurable_nodes=new_index[graph.configurable_nodes],
        layout_rank=None if graph.layout_rank is None else graph.layout_rank[origin],
        pad_value=graph.pad_value,
        node_origin=origin,
    )


def prune(graph):
    """Drop every node that is neither configurable nor next to a configurable node.

    The result may consist of several disconnected pieces.  A graph without
    configurable nodes prunes to an empty graph (``result.empty`` is True).
    """
    return _subgraph(graph, keep_mask(graph))


def no_prune(graph):
    return _subgraph(graph, np.ones(graph.n_nodes, dtype=bool))


# -- de-duplication ---------------------------------------------------------

def _config_rows(configs):
    if configs.layouts is not None:
        return configs.layouts.reshape(len(configs), -1)
    return configs.config_feat


def dedup(configs):
    """Collapse identical configurations, keeping the smallest runtime of each group.

    The runtime is not part of the identity.  Output order follows the first
    occurrence of each distinct configuration.
    """
    n = len(configs)
    rows = np.ascontiguousarray(_config_rows(configs))
    if rows.shape[1] == 0:
        first, inverse = np.array([0]), np.zeros(n, dtype=np.int64)
    else:
        _, first, inverse = np.unique(rows, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
    best = np.full(first.shape[0], np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(best, inverse, configs.runtimes)
    order = np.argsort(first, kind="stable")
    out = configs.take(first[order])
    out.runtimes = best[order]
    return out


# -- base-7 layout compression ----------------------------------------------

def compress_layout(vec6):
    """Encode six entries in {-1..5} as ``sum((v[k] + 1) * 7**k)``."""
    vec = np.asarray(vec6, dtype=np.int64)
    if vec.shape != (LAYOUT_SLOTS,):
        raise ValidationError(f"compress_layout: expected {LAYOUT_SLOTS} entries, got shape {vec.shape}")
    if np.any((vec < -1) | (vec > 5)):
        raise ValidationError("compress_layout: entries must be in {-1..5}")
    return int(((vec + 1) * _POWERS).sum())


def decompress_layout(code):
    """Inverse of :func:`compress_layout`."""
    code = int(code)
    if not 0 <= code < CODE_LIMIT:
        raise ValidationError(f"decompress_layout: code {code} outside [0, {CODE_LIMIT - 1}]")
    return tuple(int(d) for d in (code // _POWERS) % 7 - 1)


def compress_layouts(layouts):
    """Vectorised compression over the last axis (length 6)."""
    layouts = np.asarray(layouts, dtype=np.int64)
    if np.any((layouts < -1) | (layouts > 5)):
        raise ValidationError("compress_layouts: entries must be in {-1..5}")
    return ((layouts + 1) * _POWERS).sum(axis=-1)


def decompress_codes(codes):
    """Vectorised decompression: appends a length-6 axis."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= CODE_LIMIT):
        raise ValidationError(f"decompress_codes: codes outside [0, {CODE_LIMIT - 1}]")
    return (codes[..., None] // _POWERS) % 7 - 1


# -- pad value ---------------------------------------------------------------

def repad_node_feat(graph):
    """Return a copy whose output-layout slots (node_feat[134:]) are -1 padded.

    Zero-padded input is disambiguated with ``layout_rank``: slots at or beyond
    a node's rank become -1, slots inside it (including a genuine 0) are kept.
    """
    if graph.pad_value == -1:
        return graph
    if graph.layout_rank is None:
        raise ValidationError("zero-padded node_feat requires layout_rank metadata")
    feat = graph.node_feat.copy()
    slot = np.arange(LAYOUT_SLOTS)[None, :]
    slots = feat[:, NUMERIC_DIM:]
    slots[slot >= graph.layout_rank[:, None]] = -1.0
    kwargs = {k: getattr(graph, k) for k in graph.__dataclass_fields__}
    kwargs.update(node_feat=feat, pad_value=-1)
    return type(graph)(**kwargs)


# -- feature scaling ---------------------------------------------------------

@dataclass
class FeatureScaler:
    """Per-column standardisation.

    Columns whose spread is below ``STD_FLOOR`` store ``std = 1`` so they are
    only centred.  ``provenance`` lists the graph ids the scaler was fitted on.
    """

    mean: np.ndarray
    std: np.ndarray
    provenance: tuple = field(default_factory=tuple)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "provenance": list(self.provenance)}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["mean"], dtype=np.float64),
                   np.asarray(doc["std"], dtype=np.float64), tuple(doc.get("provenance", ())))


def fit_columns(blocks, provenance=()):
    """Two-pass mean/std over row blocks, combined in the given order."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    count = sum(b.shape[0] for b in blocks)
    if count == 0:
        raise ValueError("cannot fit a scaler on an empty training set")
    total = np.zeros(blocks[0].shape[1])
    for b in blocks:
        total += b.sum(axis=0)
    mean = total / count
    sq = np.zeros_like(mean)
    for b in blocks:
        sq += ((b - mean) ** 2).sum(axis=0)
    std = np.sqrt(sq / count)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return FeatureScaler(mean, std, tuple(provenance))


def fit_scaler(graphs):
    """Fit on ``node_feat[:, :134]`` of ``graphs`` (sorted by id for a fixed order)."""
    graphs = sorted(graphs, key=lambda g: g.graph_id)
    if not graphs:
        raise ValueError("cannot fit a scaler on an empty training set")
    return fit_columns([g.node_feat[:, :NUMERIC_DIM] for g in graphs],
                       provenance=[g.graph_id for g in graphs])


def apply_scaler(scaler, graph):
    """Copy of ``graph`` with ``node_feat[:, :134]`` standardised."""
    feat = graph.node_feat.copy()
    feat[:, :NUMERIC_DIM] = scaler.apply(feat[:, :NUMERIC_DIM])
    kwargs = {k: getattr(graph, k) for k in graph.__dataclass_fields__}
    kwargs["node_feat"] = feat
    return type(graph)(**kwargs)


# -- preprocessed graphs -----------------------------------------------------

@dataclass
class PreprocessedGraph:
    """A pruned, re-padded graph with de-duplicated, compressed configurations.

    ``codes`` has shape ``(n_configs, M, 3)`` (output, input, kernel) for layout
    collections; tile collections carry ``config_feat`` instead.
    """

    graph: PrunedGraph
    runtimes: np.ndarray
    kind: CollectionKind
    codes: np.ndarray | None = None
    config_feat: np.ndarray | None = None
    split: str = "train"

    @property
    def graph_id(self):
        return self.graph.graph_id

    @property
    def n_configs(self):
        return self.runtimes.shape[0]

    @property
    def empty(self):
        """Nothing to rank: no nodes (tile) or no configurable nodes (layout)."""
        return self.graph.n_nodes == 0 if self.kind.is_tile else self.graph.empty

    def layouts(self, indices=None):
        """Decompressed config slots ``(k, M, 18)`` for the selected configurations."""
        codes = self.codes if indices is None else self.codes[np.asarray(indices)]
        return decompress_codes(codes).reshape(codes.shape[0], codes.shape[1], CONFIG_SLOTS)

    def configuration_set(self):
        if self.codes is None:
            return ConfigurationSet(self.runtimes, config_feat=self.config_feat)
        return ConfigurationSet(self.runtimes, layouts=decompress_codes(self.codes))


def preprocess_graph(graph, configs, kind, split="train", do_prune=True, do_dedup=True):
    """Re-pad, prune, de-duplicate and compress one graph.

    Tile graphs have no configurable nodes, so pruning applies to layout
    collections only.
    """
    graph = repad_node_feat(graph)
    pruned = prune(graph) if do_prune and not kind.is_tile else no_prune(graph)
    if do_dedup:
        configs = dedup(configs)
    if configs.layouts is not None:
        return PreprocessedGraph(pruned, configs.runtimes, kind,
                                 codes=compress_layouts(configs.layouts), split=split)
    return PreprocessedGraph(pruned, configs.runtimes, kind, config_feat=configs.config_feat, split=split)


def to_doc(pg):
    graph = pg.graph
    doc = graph_to_doc(graph, pg.configuration_set(), pg.kind)
    doc["node_origin"] = graph.node_origin.tolist()
    if pg.codes is not None:
        del doc["configs"]
        doc["configs_compressed"] = pg.codes.tolist()
    return doc


def from_doc(doc, split="train", path="$"):
    if "node_origin" not in doc:
        raise SchemaError("missing required field (not a preprocessed graph)", f"{path}.node_origin")
    compressed = doc.get("configs_compressed")
    if compressed is not None:
        codes = np.asarray(compressed, dtype=np.int64).reshape(len(compressed), -1, 3)
        doc = dict(doc, configs=decompress_codes(codes).reshape(codes.shape[0], codes.shape[1], -1).tolist())
    graph, configs, kind = graph_from_doc(doc, path)
    graph.validate()
    configs.validate(graph)
    pruned = PrunedGraph(**{k: getattr(graph, k) for k in graph.__dataclass_fields__},
                         node_origin=doc["node_origin"])
    if pruned.node_origin.shape != (pruned.n_nodes,):
        raise ValidationError("node_origin must have one entry per node")
    if configs.layouts is not None:
        validate_layouts(configs.layouts)
        return PreprocessedGraph(pruned, configs.runtimes, kind,
                                 codes=compress_layouts(configs.layouts), split=split)
    return PreprocessedGraph(pruned, configs.runtimes, kind, config_feat=configs.config_feat, split=split)


def save_preprocessed(pg, path):
    write_json(path, to_doc(pg))


def load_preprocessed(path, split="train"):
    return from_doc(read_json(path), split, str(path))


def fit_config_scaler(graphs):
    """Scaler for tile ``config_feat`` (24 columns)."""
    graphs = sorted(graphs, key=lambda g: g.graph_id)
    return fit_columns([g.config_feat for g in graphs], [g.graph_id for g in graphs])


def preprocess_dataset(in_dir, out_dir, do_prune=True, do_dedup=True, scaler_split="train"):
    """Preprocess every graph of a raw dataset into ``out_dir``.

    The manifest gains a ``preprocess`` section and a reference ``scaler`` fitted
    on the ``scaler_split`` graphs.  Training refits per fold.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    manifest = read_manifest(in_dir)
    if "preprocess" in manifest:
        raise ValidationError(f"{in_dir} is already preprocessed")
    out = []
    for split, path in graph_files(in_dir, manifest):
        graph, configs, kind = load_graph(path)
        pg = preprocess_graph(graph, configs, kind, split, do_prune, do_dedup)
        save_preprocessed(pg, out_dir / manifest["collection"] / split / path.name)
        out.append(pg)
    fit_on = [pg.graph for pg in out if pg.split == scaler_split] or [pg.graph for pg in out]
    manifest = dict(manifest, preprocess={"prune": do_prune, "dedup": do_dedup,
                                          "configs": "base-7 compressed" if not manifest["kind"].startswith("tile") else "raw"},
                    scaler=fit_scaler(fit_on).to_dict())
    write_json(out_dir / MANIFEST, manifest)
    return out


@dataclass
class PreprocessedDataset:
    root: Path
    manifest: dict
    graphs: list

    @property
    def kind(self):
        return CollectionKind.parse(self.manifest["kind"])

    @property
    def n_opcodes(self):
        return int(self.manifest["n_opcodes"])

    def by_id(self):
        return {g.graph_id: g for g in self.graphs}


def load_preprocessed_dataset(root, splits=None):
    root = Path(root)
    manifest = read_manifest(root)
    if "preprocess" not in manifest:
        raise ValidationError(f"{root} is not a preprocessed dataset (run `tgraph preprocess` first)")
    graphs = [load_preprocessed(path, split) for split, path in graph_files(root, manifest, splits)]
    return PreprocessedDataset(root, manifest, graphs)


__all__ = [
    "CODE_LIMIT", "STD_FLOOR", "TILE_CONFIG_DIM", "FeatureScaler", "PreprocessedDataset",
    "PreprocessedGraph", "PrunedGraph", "apply_scaler", "compress_layout", "compress_layouts",
    "decompress_codes", "decompress_layout", "dedup", "fit_columns", "fit_config_scaler",
    "fit_scaler", "from_doc", "keep_mask", "load_preprocessed", "load_preprocessed_dataset",
    "no_prune", "preprocess_dataset", "preprocess_graph", "prune", "repad_node_feat",
    "save_preprocessed", "to_doc",
]
