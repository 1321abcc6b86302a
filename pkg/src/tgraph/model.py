"""The TGraph ranking network.

Input features per (configuration, node) are the concatenation of

* the standardised numeric node features (134),
* the embedded output-layout slots of the node (6 x 4),
* the embedded configuration layout slots (18 x 4; zeros for nodes that are
  not configurable), and
* the opcode embedding (16),

giving 246 channels in layout mode.  A two-layer GELU MLP lifts them to
``hidden_dim`` channels, ``n_blocks`` graph convolution blocks follow, node
features are mean-pooled and a final linear layer yields one score per
configuration.

Tensors keep the configuration axis first, ``(n_configs, n_nodes, channels)``.
Every operation except the cross-configuration softmax acts on each
configuration independently, so permuting the configurations of a batch
permutes the scores exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import CONFIG_SLOTS, LAYOUT_SLOTS, NUMERIC_DIM, TILE_CONFIG_DIM
from .errors import ValidationError
from .preprocess import FeatureScaler, apply_scaler

CHECKPOINT_MAGIC = b"TGRAPH-CKPT\n"
CHECKPOINT_VERSION = 1
LAYOUT_VOCAB = 7  # slot values -1..5, shifted by one


@dataclass(frozen=True)
class ModelConfig:
    n_opcodes: int
    hidden_dim: int = 256
    n_blocks: int = 2
    opcode_embed_dim: int = 16
    layout_embed_dim: int = 4
    se_reduction: int = 8
    use_self_attention: bool = True
    use_cross_attention: bool = True
    use_edges: bool = True
    mode: str = "layout"

    def __post_init__(self):
        c = self.hidden_dim
        if c % 2 or (c // 2) % self.se_reduction:
            raise ValidationError(f"hidden_dim {c} must be even with hidden_dim/2 divisible by {self.se_reduction}")
        if self.n_blocks < 1:
            raise ValidationError("n_blocks must be >= 1")
        if self.mode not in ("layout", "tile"):
            raise ValidationError(f"unknown model mode {self.mode!r}")
        if self.n_opcodes < 1:
            raise ValidationError("n_opcodes must be >= 1")

    @property
    def input_dim(self):
        config_part = CONFIG_SLOTS * self.layout_embed_dim if self.mode == "layout" else 0
        return NUMERIC_DIM + LAYOUT_SLOTS * self.layout_embed_dim + config_part + self.opcode_embed_dim

    @property
    def half_dim(self):
        return self.hidden_dim // 2

    @property
    def bottleneck_dim(self):
        return self.half_dim // self.se_reduction

    def replace(self, **changes):
        return ModelConfig(**{**asdict(self), **changes})


@dataclass
class BatchInput:
    """One graph with a block of configurations.

    ``config_nodes`` are the positions of the configurable nodes in the
    (pruned) graph; ``config_layout`` holds their slots per configuration.
    """

    opcodes: np.ndarray
    node_numeric: np.ndarray
    node_layout: np.ndarray
    edges: np.ndarray
    config_nodes: np.ndarray
    config_layout: np.ndarray | None = None
    config_feat: np.ndarray | None = None

    @property
    def n_nodes(self):
        return self.opcodes.shape[0]

    @property
    def n_configs(self):
        if self.config_layout is not None:
            return self.config_layout.shape[0]
        return self.config_feat.shape[0]

    def take(self, indices):
        """Same graph with configurations reordered/selected by ``indices``."""
        indices = np.asarray(indices, dtype=np.int64)
        return BatchInput(
            self.opcodes, self.node_numeric, self.node_layout, self.edges, self.config_nodes,
            None if self.config_layout is None else np.ascontiguousarray(self.config_layout[indices]),
            None if self.config_feat is None else np.ascontiguousarray(self.config_feat[indices]))


def make_batch(pg, scaler, indices=None, config_scaler=None):
    """Build a :class:`BatchInput` for ``pg`` (a PreprocessedGraph).

    ``scaler`` may be None when ``pg`` is already standardised.  Configurations
    are decompressed here, only for ``indices``.
    """
    graph = pg.graph if scaler is None else apply_scaler(scaler, pg.graph)
    idx = np.arange(pg.n_configs) if indices is None else np.asarray(indices, dtype=np.int64)
    layout = feat = None
    if pg.codes is not None:
        layout = pg.layouts(idx)
    else:
        feat = pg.config_feat[idx]
        if config_scaler is not None:
            feat = config_scaler.apply(feat)
    return BatchInput(
        opcodes=graph.opcodes,
        node_numeric=np.ascontiguousarray(graph.node_feat[:, :NUMERIC_DIM]),
        node_layout=graph.node_feat[:, NUMERIC_DIM:].astype(np.int64),
        edges=graph.edges,
        config_nodes=graph.configurable_nodes,
        config_layout=layout,
        config_feat=feat,
    )


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class TGraphModel:
    """Parameters plus the forward pass.

    Parameters live in ``self.params`` (name -> leaf Tensor).  The learnable
    temperature of each block is stored as its logarithm so that it stays
    positive.
    """

    def __init__(self, config, seed=0, params=None):
        self.config = config
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg = self.config
        p = {}

        def dense(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            p[f"{name}.weight"] = _uniform(rng, bound, (fan_in, fan_out))
            p[f"{name}.bias"] = _uniform(rng, bound, (fan_out,))

        p["layout_embedding"] = rng.normal(0.0, 0.02, size=(LAYOUT_VOCAB, cfg.layout_embed_dim))
        p["opcode_embedding"] = rng.normal(0.0, 0.02, size=(cfg.n_opcodes, cfg.opcode_embed_dim))
        c, half, neck = cfg.hidden_dim, cfg.half_dim, cfg.bottleneck_dim
        dense("f_in.0", cfg.input_dim, c)
        dense("f_in.1", c, c)
        for k in range(cfg.n_blocks):
            b = f"blocks.{k}"
            p[f"{b}.norm.weight"] = np.ones(c)
            p[f"{b}.norm.bias"] = np.zeros(c)
            dense(f"{b}.f1", c, half)
            dense(f"{b}.f2", c + half, half)
            dense(f"{b}.excitation", half, neck)
            dense(f"{b}.squeeze", neck, half)
            p[f"{b}.log_temperature"] = np.zeros(())
        head_in = c + (TILE_CONFIG_DIM if cfg.mode == "tile" else 0)
        dense("f_out", head_in, 1)
        return {name: Tensor(value, requires_grad=True) for name, value in p.items()}

    # -- parameter bookkeeping -------------------------------------------

    def parameter_count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValidationError(f"parameter names differ: {sorted(missing)}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ValidationError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def temperature(self, k):
        return float(np.exp(self.params[f"blocks.{k}.log_temperature"].data))

    # -- forward ---------------------------------------------------------

    def _dense(self, x, name):
        return ad.add(ad.matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def __call__(self, batch):
        return forward(batch, self)


def assemble_features(batch, model):
    """``(n_configs, n_nodes, input_dim)`` input features."""
    cfg = model.config
    p = model.params
    n, b = batch.n_nodes, batch.n_configs
    le = cfg.layout_embed_dim
    node_slots = ad.reshape(ad.embedding_lookup(p["layout_embedding"], batch.node_layout + 1),
                            (n, LAYOUT_SLOTS * le))
    opcode = ad.embedding_lookup(p["opcode_embedding"], batch.opcodes)
    parts = [ad.expand(ad.concat([Tensor(batch.node_numeric), node_slots], axis=-1),
                       (b, n, NUMERIC_DIM + LAYOUT_SLOTS * le))]
    if cfg.mode == "layout":
        if batch.config_layout is None:
            raise ValidationError("layout model needs config_layout")
        m = batch.config_nodes.shape[0]
        if batch.config_layout.shape[1:] != (m, CONFIG_SLOTS):
            raise ValidationError(
                f"missing config for a configurable node: config block {batch.config_layout.shape[1:]} "
                f"vs {m} configurable nodes")
        slots = ad.reshape(ad.embedding_lookup(p["layout_embedding"], batch.config_layout + 1),
                           (b, m, CONFIG_SLOTS * le))
        # row m of the padded block is all zeros, used by non-configurable nodes
        padded = ad.concat([slots, Tensor(np.zeros((b, 1, CONFIG_SLOTS * le)))], axis=1)
        row = np.full(n, m, dtype=np.int64)
        row[batch.config_nodes] = np.arange(m)
        parts.append(ad.gather_rows(padded, row, axis=1))
    parts.append(ad.expand(opcode, (b, n, cfg.opcode_embed_dim)))
    return ad.concat(parts, axis=-1)


def undirected(edges):
    """Message sources and destinations treating each edge in both directions."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    return src, dst


def graphsage(eps, edges, model, k, use_edges=True):
    """``L2norm(f2(concat(eps_i, sum_{j in N(i)} f1(eps_j))))``; output has hidden_dim/2 channels."""
    b, n, _ = eps.shape
    name = f"blocks.{k}"
    if use_edges and len(edges):
        src, dst = undirected(edges)
        messages = ad.gather_rows(model._dense(eps, f"{name}.f1"), src, axis=1)
        neighbours = ad.segment_sum(messages, dst, n, axis=1)
    else:
        neighbours = Tensor(np.zeros((b, n, model.config.half_dim)))
    return ad.l2_normalize(model._dense(ad.concat([eps, neighbours], axis=-1), f"{name}.f2"), axis=-1)


def channel_self_attention(eta, model, k):
    """Squeeze-and-excitation style channel gate: ``eta * sigmoid(up(relu(down(eta))))``."""
    name = f"blocks.{k}"
    gate = ad.sigmoid(model._dense(ad.relu(model._dense(eta, f"{name}.excitation")), f"{name}.squeeze"))
    return ad.mul(eta, gate)


def cross_config_attention(eta, temperature):
    """``eta * softmax over configurations of (eta / T)``, per node and channel."""
    return ad.mul(eta, ad.softmax(eta, axis=0, temperature=temperature))


def conv_block(eps, edges, model, k):
    """``eps + GELU(concat(eta, A_cross(eta)))`` with ``eta = A_self(S(N_instance(eps)))``."""
    cfg = model.config
    name = f"blocks.{k}"
    normed = ad.instance_norm(eps, model.params[f"{name}.norm.weight"], model.params[f"{name}.norm.bias"], axis=1)
    eta = graphsage(normed, edges, model, k, use_edges=cfg.use_edges)
    if cfg.use_self_attention:
        eta = channel_self_attention(eta, model, k)
    if cfg.use_cross_attention:
        crossed = cross_config_attention(eta, ad.exp(model.params[f"{name}.log_temperature"]))
    else:
        crossed = eta
    return ad.add(eps, ad.gelu(ad.concat([eta, crossed], axis=-1)))


def input_layer(batch, model):
    """First dense layer of ``f_in`` applied to :func:`assemble_features`.

    Computed blockwise: the node-level columns are projected once per node and
    the configuration columns only at configurable nodes, then summed.  Same
    value as ``dense(assemble_features(batch))`` without materialising the
    broadcast input.
    """
    cfg = model.config
    p = model.params
    n, b = batch.n_nodes, batch.n_configs
    le = cfg.layout_embed_dim
    weight = p["f_in.0.weight"]
    node_dim = NUMERIC_DIM + LAYOUT_SLOTS * le
    config_dim = CONFIG_SLOTS * le if cfg.mode == "layout" else 0
    node_rows = np.r_[0:node_dim, node_dim + config_dim:cfg.input_dim]
    node_slots = ad.reshape(ad.embedding_lookup(p["layout_embedding"], batch.node_layout + 1),
                            (n, LAYOUT_SLOTS * le))
    opcode = ad.embedding_lookup(p["opcode_embedding"], batch.opcodes)
    node_in = ad.concat([Tensor(batch.node_numeric), node_slots, opcode], axis=-1)
    h = ad.add(ad.matmul(node_in, ad.gather_rows(weight, node_rows, axis=0)), p["f_in.0.bias"])
    if cfg.mode == "tile":
        return ad.expand(h, (b, n, cfg.hidden_dim))
    if batch.config_layout is None:
        raise ValidationError("layout model needs config_layout")
    m = batch.config_nodes.shape[0]
    if batch.config_layout.shape[1:] != (m, CONFIG_SLOTS):
        raise ValidationError(
            f"missing config for a configurable node: config block {batch.config_layout.shape[1:]} "
            f"vs {m} configurable nodes")
    slots = ad.reshape(ad.embedding_lookup(p["layout_embedding"], batch.config_layout + 1),
                       (b, m, config_dim))
    projected = ad.matmul(slots, ad.gather_rows(weight, np.arange(node_dim, node_dim + config_dim), axis=0))
    padded = ad.concat([projected, Tensor(np.zeros((b, 1, cfg.hidden_dim)))], axis=1)
    row = np.full(n, m, dtype=np.int64)
    row[batch.config_nodes] = np.arange(m)
    return ad.add(ad.gather_rows(padded, row, axis=1), h)


def forward(batch, model):
    """Scores ``(n_configs,)``; lower means predicted faster."""
    cfg = model.config
    h = ad.gelu(input_layer(batch, model))
    h = ad.gelu(model._dense(h, "f_in.1"))
    for k in range(cfg.n_blocks):
        h = conv_block(h, batch.edges, model, k)
    pooled = ad.mean(h, axis=1, keepdims=True)  # (B, 1, C)
    if cfg.mode == "tile":
        if batch.config_feat is None:
            raise ValidationError("tile model needs config_feat")
        pooled = ad.concat([pooled, Tensor(batch.config_feat[:, None, :])], axis=-1)
    scores = model._dense(pooled, "f_out")
    return ad.reshape(scores, (batch.n_configs,))


def predict(model, batch):
    """Plain float scores without recording gradients."""
    return forward(batch, frozen(model)).data.copy()


def frozen(model):
    """Read-only snapshot sharing parameter values but not tracking gradients."""
    return TGraphModel(model.config, params={n: Tensor(t.data) for n, t in model.params.items()})


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    model: TGraphModel
    scaler: FeatureScaler
    config_scaler: FeatureScaler | None = None
    meta: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt):
    """Serialise to a byte-stable blob: magic, header length, JSON header, float64 data."""
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.model.params):
        arr = np.ascontiguousarray(ckpt.model.params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.model.config),
        "params": entries,
        "scaler": ckpt.scaler.to_dict(),
        "config_scaler": None if ckpt.config_scaler is None else ckpt.config_scaler.to_dict(),
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValidationError(f"{path}: not a TGraph checkpoint")
    start = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack("<Q", raw[start:start + 8])
    header = json.loads(raw[start + 8:start + 8 + size])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header['version']}")
    data = np.frombuffer(raw[start + 8 + size:], dtype="<f8")
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        values = data[entry["offset"]:entry["offset"] + count].reshape(entry["shape"]).astype(np.float64)
        params[entry["name"]] = Tensor(values, requires_grad=True)
    model = TGraphModel(ModelConfig(**header["config"]), params=params)
    cs = header.get("config_scaler")
    return Checkpoint(model, FeatureScaler.from_dict(header["scaler"]),
                      None if cs is None else FeatureScaler.from_dict(cs), header.get("meta", {}))
