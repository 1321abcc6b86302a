"""Scoring with test-time augmentation (TTA) and fold ensembling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .model import make_batch, predict
from .preprocess import apply_scaler
from .ranking import kendall_tau, tile_metric


@dataclass(frozen=True)
class RankingResult:
    graph_id: str
    scores: np.ndarray
    order: np.ndarray
    tta_seed: int
    n_tta: int
    n_folds: int

    def to_doc(self):
        return {"order": self.order.tolist(), "scores": self.scores.tolist(),
                "tta_seed": self.tta_seed, "n_tta": self.n_tta, "n_folds": self.n_folds}


def top_k(scores, k):
    """Indices of the ``k`` lowest scores, ties broken by index."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    return np.lexsort((np.arange(scores.size), scores))[:k]


def tta_permutations(n, n_tta, seed):
    """The ``n_tta`` permutations used to reshuffle ``n`` configurations into batches."""
    rng = np.random.default_rng(seed)
    return [rng.permutation(n) for _ in range(n_tta)]


def _check(pg, ckpt):
    cfg = ckpt.model.config
    if pg.kind.is_tile != (cfg.mode == "tile"):
        raise ValidationError(f"{pg.graph_id}: {pg.kind} data does not match a {cfg.mode} checkpoint")
    if pg.graph.opcodes.size and int(pg.graph.opcodes.max()) >= cfg.n_opcodes:
        raise ValidationError(f"{pg.graph_id}: opcode exceeds checkpoint vocabulary {cfg.n_opcodes}")
    if pg.kind.is_tile and ckpt.config_scaler is None:
        raise ValidationError("tile checkpoint lacks a configuration scaler")


def fold_scores(pg, ckpt, perms, batch=128):
    """Scores of one checkpoint averaged over the TTA permutations ``perms``."""
    _check(pg, ckpt)
    scaled = replace(pg, graph=apply_scaler(ckpt.scaler, pg.graph))
    acc = np.zeros(pg.n_configs)
    for perm in perms:
        out = np.empty(pg.n_configs)
        for start in range(0, pg.n_configs, batch):
            idx = perm[start:start + batch]
            out[idx] = predict(ckpt.model, make_batch(scaled, None, idx, ckpt.config_scaler))
        acc += out
    return acc / len(perms)


def rank(pg, checkpoints, n_tta=10, batch=128, seed=0):
    """Ensemble scores for every configuration of ``pg`` (lower = predicted faster)."""
    if not checkpoints:
        raise ValidationError("need at least one checkpoint")
    if n_tta < 1 or batch < 1:
        raise ValidationError("n_tta and batch must be >= 1")
    if pg.n_configs == 0:
        raise ValidationError(f"{pg.graph_id}: no configurations to rank")
    perms = tta_permutations(pg.n_configs, n_tta, seed)
    # fold-major accumulation in a fixed order
    total = np.zeros(pg.n_configs)
    for ckpt in checkpoints:
        total += fold_scores(pg, ckpt, perms, batch)
    scores = total / len(checkpoints)
    return RankingResult(pg.graph_id, scores, top_k(scores, pg.n_configs), int(seed), n_tta, len(checkpoints))


def evaluate_scores(runtimes, scores, tile=False, k=5):
    """Kendall's tau for layout data, the top-k tile metric for tile data."""
    return tile_metric(runtimes, scores, k) if tile else kendall_tau(runtimes, scores)


def evaluate(graphs, predictions, k=5):
    """Per-graph metric and mean for ``predictions`` (graph id -> scores)."""
    per_graph = {}
    for pg in graphs:
        if pg.graph_id not in predictions:
            raise ValidationError(f"no prediction for graph {pg.graph_id}")
        scores = np.asarray(predictions[pg.graph_id], dtype=np.float64)
        if scores.shape != (pg.n_configs,):
            raise ValidationError(f"{pg.graph_id}: expected {pg.n_configs} scores, got {scores.shape}")
        per_graph[pg.graph_id] = evaluate_scores(pg.runtimes, scores, pg.kind.is_tile, k)
    metric = "tile_metric" if graphs and graphs[0].kind.is_tile else "kendall_tau"
    mean = float(np.mean(list(per_graph.values()))) if per_graph else None
    return {"metric": metric, "per_graph": per_graph, "mean": mean}


def holdout_evaluation(dataset, results, n_tta=10, batch=128, seed=0):
    """Score each fold's validation graphs with that fold's checkpoint.

    Returns the per-graph metric over all held-out graphs and its mean.
    """
    by_id = dataset.by_id()
    predictions, graphs = {}, []
    for res in results:
        for gid in res.fold.valid_ids:
            pg = by_id[gid]
            if pg.empty or pg.n_configs < 2:
                continue
            predictions[gid] = rank(pg, [res.checkpoint], n_tta, batch, seed).scores
            graphs.append(pg)
    return evaluate(graphs, predictions)
