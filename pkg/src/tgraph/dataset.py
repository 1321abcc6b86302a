"""Computational graphs, configuration sets and their on-disk JSON form.

A dataset root looks like::

    <root>/manifest.json
    <root>/<collection>/<split>/<graph_id>.json

Graph files are single JSON documents (keys sorted, compact separators) so that
identical inputs always serialise to identical bytes.  Runtimes are integer
nanoseconds.

Layout configurations are stored per configuration as one 18-entry row per
configurable node: output, input and kernel minor-to-major vectors of six
entries each, ``-1`` marking padding.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError

FEATURE_DIM = 140
NUMERIC_DIM = 134
LAYOUT_SLOTS = 6
CONFIG_SLOTS = 18
TILE_CONFIG_DIM = 24

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class CollectionKind:
    """Which collection (layout or tile data, xla or nlp source) a graph belongs to.

    ``mode`` is ``layout_random``, ``layout_default`` or ``tile``; ``source`` is
    ``xla`` or ``nlp``.  The string form is e.g. ``layout:xla:random`` or
    ``tile:xla``.
    """

    mode: str
    source: str = "xla"

    MODES = ("layout_random", "layout_default", "tile")
    SOURCES = ("xla", "nlp")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValidationError(f"unknown collection mode {self.mode!r}")
        if self.source not in self.SOURCES:
            raise ValidationError(f"unknown graph source {self.source!r}")

    @property
    def is_tile(self):
        return self.mode == "tile"

    @property
    def is_random(self):
        return self.mode == "layout_random"

    def __str__(self):
        if self.is_tile:
            return f"tile:{self.source}"
        return f"layout:{self.source}:{self.mode.split('_', 1)[1]}"

    @property
    def dirname(self):
        return str(self).replace(":", "-")

    @classmethod
    def parse(cls, text):
        parts = text.replace("-", ":").split(":")
        if parts[0] == "tile" and len(parts) == 2:
            return cls("tile", parts[1])
        if parts[0] == "layout" and len(parts) == 3:
            return cls(f"layout_{parts[2]}", parts[1])
        raise ValidationError(f"cannot parse collection kind {text!r}")


@dataclass
class ComputationGraph:
    graph_id: str
    opcodes: np.ndarray
    node_feat: np.ndarray
    edges: np.ndarray
    configurable_nodes: np.ndarray
    # Optional per-node rank of the output layout; required to re-pad
    # zero-padded node_feat[134:].
    layout_rank: np.ndarray | None = None
    pad_value: int = -1

    def __post_init__(self):
        self.opcodes = np.asarray(self.opcodes, dtype=np.int64).reshape(-1)
        self.node_feat = np.asarray(self.node_feat, dtype=np.float64).reshape(-1, FEATURE_DIM) \
            if np.size(self.node_feat) else np.zeros((0, FEATURE_DIM))
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.configurable_nodes = np.asarray(self.configurable_nodes, dtype=np.int64).reshape(-1)
        if self.layout_rank is not None:
            self.layout_rank = np.asarray(self.layout_rank, dtype=np.int64).reshape(-1)

    @property
    def n_nodes(self):
        return self.opcodes.shape[0]

    def validate(self):
        n = self.n_nodes
        if self.node_feat.shape != (n, FEATURE_DIM):
            raise ValidationError(
                f"node_feat must have {FEATURE_DIM} entries per node, got shape {self.node_feat.shape} "
                f"for {n} nodes")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValidationError("edge endpoint out of range")
        cfg = self.configurable_nodes
        if cfg.size and (np.any(np.diff(cfg) <= 0)):
            raise ValidationError("configurable_nodes must be strictly increasing")
        if cfg.size and (cfg[0] < 0 or cfg[-1] >= n):
            raise ValidationError("configurable node index out of range")
        slots = self.node_feat[:, NUMERIC_DIM:]
        if np.any(slots != np.round(slots)) or np.any((slots < -1) | (slots > 5)):
            raise ValidationError("node_feat[134:] entries must be integers in {-1..5}")
        if self.pad_value not in (0, -1):
            raise ValidationError("pad_value must be 0 or -1")
        if self.layout_rank is not None:
            if self.layout_rank.shape != (n,):
                raise ValidationError("layout_rank must have one entry per node")
            if np.any((self.layout_rank < 0) | (self.layout_rank > LAYOUT_SLOTS)):
                raise ValidationError("layout_rank entries must be in 0..6")
        elif self.pad_value == 0:
            raise ValidationError("zero-padded node_feat requires layout_rank metadata")
        return self


@dataclass
class ConfigurationSet:
    """Configurations of one graph and their measured runtimes.

    Layout collections carry ``layouts`` with shape ``(n, M, 3, 6)`` (M
    configurable nodes); tile collections carry ``config_feat`` ``(n, 24)``.
    """

    runtimes: np.ndarray
    layouts: np.ndarray | None = None
    config_feat: np.ndarray | None = None

    def __post_init__(self):
        self.runtimes = np.asarray(self.runtimes, dtype=np.int64).reshape(-1)
        if self.layouts is not None:
            self.layouts = np.asarray(self.layouts, dtype=np.int64)
            if self.layouts.ndim == 3:
                self.layouts = self.layouts.reshape(self.layouts.shape[0], -1, 3, LAYOUT_SLOTS)
        if self.config_feat is not None:
            self.config_feat = np.asarray(self.config_feat, dtype=np.float64)

    def __len__(self):
        return self.runtimes.shape[0]

    def validate(self, graph=None):
        n = len(self)
        if n < 1:
            raise ValidationError("a configuration set needs at least one configuration")
        if np.any(self.runtimes < 0):
            raise ValidationError("runtimes must be nonnegative")
        if (self.layouts is None) == (self.config_feat is None):
            raise ValidationError("exactly one of layouts / config_feat must be present")
        if self.layouts is not None:
            if self.layouts.shape[0] != n:
                raise ValidationError("number of configs differs from number of runtimes")
            if graph is not None and self.layouts.shape[1] != graph.configurable_nodes.shape[0]:
                raise ValidationError("config rows must match the configurable nodes")
            validate_layouts(self.layouts)
        else:
            if self.config_feat.shape != (n, TILE_CONFIG_DIM):
                raise ValidationError(f"config_feat must be ({n}, {TILE_CONFIG_DIM})")
        return self

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ConfigurationSet(
            self.runtimes[indices],
            None if self.layouts is None else self.layouts[indices],
            None if self.config_feat is None else self.config_feat[indices])


def validate_layouts(layouts):
    """Entries in {-1..5}; padding (-1) only as a contiguous suffix of each 6-vector."""
    layouts = np.asarray(layouts)
    if np.any((layouts < -1) | (layouts > 5)):
        raise ValidationError("layout entries must be in {-1..5}")
    pad = layouts == -1
    # once padding starts, it must continue to the end of the vector
    if np.any(pad[..., :-1] & ~pad[..., 1:]):
        raise ValidationError("layout padding (-1) must be a contiguous suffix")


# -- JSON ------------------------------------------------------------------

def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))
    os.replace(tmp, path)


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None


def _field(doc, key, kind, path):
    if key not in doc:
        raise SchemaError("missing required field", f"{path}.{key}")
    value = doc[key]
    if not isinstance(value, kind):
        raise SchemaError(f"expected {getattr(kind, '__name__', kind)}", f"{path}.{key}")
    return value


def _int_list(values, path):
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError("expected integer", f"{path}[{i}]")
    return values


def _matrix(values, width, path, integer=False):
    for i, row in enumerate(values):
        if not isinstance(row, list) or (width is not None and len(row) != width):
            raise SchemaError(f"expected array of length {width}", f"{path}[{i}]")
        for j, v in enumerate(row):
            ok = isinstance(v, int) if integer else isinstance(v, (int, float))
            if isinstance(v, bool) or not ok:
                raise SchemaError("expected integer" if integer else "expected number", f"{path}[{i}][{j}]")
    return values


def graph_to_doc(graph, configs, kind):
    doc = {
        "graph_id": graph.graph_id,
        "kind": str(kind),
        "opcodes": graph.opcodes.tolist(),
        "node_feat": graph.node_feat.tolist(),
        "edges": graph.edges.tolist(),
        "configurable_nodes": graph.configurable_nodes.tolist(),
        "runtimes_ns": configs.runtimes.tolist(),
        "pad_value": int(graph.pad_value),
    }
    if graph.layout_rank is not None:
        doc["layout_rank"] = graph.layout_rank.tolist()
    if configs.layouts is not None:
        doc["configs"] = configs.layouts.reshape(len(configs), -1, CONFIG_SLOTS).tolist()
    else:
        doc["configs"] = configs.config_feat.tolist()
    return doc


def graph_from_doc(doc, path="$"):
    if not isinstance(doc, dict):
        raise SchemaError("expected object", path)
    kind = CollectionKind.parse(_field(doc, "kind", str, path))
    opcodes = _int_list(_field(doc, "opcodes", list, path), f"{path}.opcodes")
    node_feat = _matrix(_field(doc, "node_feat", list, path), FEATURE_DIM, f"{path}.node_feat")
    edges = _matrix(_field(doc, "edges", list, path), 2, f"{path}.edges", integer=True)
    cfg_nodes = _int_list(_field(doc, "configurable_nodes", list, path), f"{path}.configurable_nodes")
    runtimes = _int_list(_field(doc, "runtimes_ns", list, path), f"{path}.runtimes_ns")
    layout_rank = doc.get("layout_rank")
    if layout_rank is not None:
        _int_list(layout_rank, f"{path}.layout_rank")
    pad_value = doc.get("pad_value", -1)
    graph = ComputationGraph(
        graph_id=_field(doc, "graph_id", str, path), opcodes=opcodes, node_feat=node_feat,
        edges=edges, configurable_nodes=cfg_nodes, layout_rank=layout_rank, pad_value=pad_value)
    raw = _field(doc, "configs", list, path)
    if len(raw) != len(runtimes):
        raise ValidationError("number of configs differs from number of runtimes")
    if kind.is_tile:
        configs = ConfigurationSet(runtimes, config_feat=np.asarray(
            _matrix(raw, TILE_CONFIG_DIM, f"{path}.configs"), dtype=np.float64).reshape(-1, TILE_CONFIG_DIM))
    else:
        for i, cfg in enumerate(raw):
            if not isinstance(cfg, list) or len(cfg) != len(cfg_nodes):
                raise SchemaError("expected one row per configurable node", f"{path}.configs[{i}]")
            _matrix(cfg, CONFIG_SLOTS, f"{path}.configs[{i}]", integer=True)
        layouts = np.asarray(raw, dtype=np.int64).reshape(len(raw), len(cfg_nodes), 3, LAYOUT_SLOTS)
        configs = ConfigurationSet(runtimes, layouts=layouts)
    return graph, configs, kind


def load_graph(path):
    """Read one graph file; returns ``(ComputationGraph, ConfigurationSet, CollectionKind)``."""
    graph, configs, kind = graph_from_doc(read_json(path))
    graph.validate()
    configs.validate(graph)
    return graph, configs, kind


def save_graph(graph, configs, kind, path):
    graph.validate()
    configs.validate(graph)
    write_json(path, graph_to_doc(graph, configs, kind))


# -- dataset directories ----------------------------------------------------

@dataclass
class GraphRecord:
    graph: ComputationGraph
    configs: ConfigurationSet
    kind: CollectionKind
    split: str = "train"

    @property
    def graph_id(self):
        return self.graph.graph_id


@dataclass
class Dataset:
    root: Path
    manifest: dict
    records: list = field(default_factory=list)

    @property
    def kind(self):
        return CollectionKind.parse(self.manifest["kind"])

    @property
    def n_opcodes(self):
        return int(self.manifest["n_opcodes"])

    def by_id(self):
        return {r.graph_id: r for r in self.records}


def make_manifest(kind, n_opcodes, splits, **extra):
    manifest = {
        "collection": kind.dirname,
        "kind": str(kind),
        "n_opcodes": int(n_opcodes),
        "feature_dim": FEATURE_DIM,
        "config_feature_layout": ("config_feat[24] per configuration" if kind.is_tile else
                                  "per configurable node: output[6], input[6], kernel[6] minor-to-major, -1 padded"),
        "splits": sorted(splits),
    }
    manifest.update(extra)
    return manifest


def read_manifest(root):
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    manifest = read_json(path)
    for key in ("kind", "n_opcodes", "feature_dim"):
        _field(manifest, key, (str, int), "$manifest")
    if manifest["feature_dim"] != FEATURE_DIM:
        raise ValidationError(f"manifest feature_dim must be {FEATURE_DIM}")
    return manifest


def graph_files(root, manifest, splits=None):
    base = Path(root) / manifest["collection"]
    wanted = splits or manifest.get("splits") or sorted(p.name for p in base.iterdir() if p.is_dir())
    out = []
    for split in wanted:
        for path in sorted((base / split).glob("*.json")):
            out.append((split, path))
    return out


def load_dataset(root, splits=None):
    """Load every graph of the dataset at ``root`` (optionally only some splits)."""
    root = Path(root)
    manifest = read_manifest(root)
    records = []
    for split, path in graph_files(root, manifest, splits):
        graph, configs, kind = load_graph(path)
        records.append(GraphRecord(graph, configs, kind, split))
    return Dataset(root, manifest, records)


def save_dataset(dataset_root, records, manifest):
    root = Path(dataset_root)
    for rec in records:
        save_graph(rec.graph, rec.configs, rec.kind,
                   root / manifest["collection"] / rec.split / f"{rec.graph_id}.json")
    write_json(root / MANIFEST, manifest)
