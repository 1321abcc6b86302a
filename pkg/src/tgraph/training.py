"""K-fold training protocol: fold plans, learning-rate schedule, AdamW with
global-norm clipping, and the per-fold training loop.

One training step samples one graph and a block of its configurations; the
configurations form the batch axis.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ValidationError
from .model import Checkpoint, TGraphModel, forward, make_batch, predict
from .preprocess import apply_scaler, fit_config_scaler, fit_scaler
from .ranking import kendall_tau, pairwise_hinge_loss

log = logging.getLogger(__name__)

# Epoch budgets per collection family.
EPOCHS = {"layout:nlp": 1000, "layout:xla": 750, "tile": 17.5}
LOSS_NORMALIZATION = "sum over active ordered pairs / number of active pairs"


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-3
    lr_floor: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 1e-5
    grad_clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: float = 750
    # None picks 128 for random-sampled collections and 64 otherwise
    configs_per_batch: int | None = None
    k_folds: int = 20
    folds_trained: int = 5
    folds_kept: int = 4
    seed: int = 0
    validate_every: int = 1
    eval_batch: int = 128

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValidationError("warmup_frac must be in (0, 1)")
        if not self.folds_kept <= self.folds_trained <= self.k_folds:
            raise ValidationError("need folds_kept <= folds_trained <= k_folds")
        if self.epochs <= 0:
            raise ValidationError("epochs must be positive")

    @classmethod
    def for_collection(cls, kind, **overrides):
        key = "tile" if kind.is_tile else f"layout:{kind.source}"
        return cls(**{"epochs": EPOCHS[key], **overrides})

    def batch_size(self, kind):
        if self.configs_per_batch is not None:
            return self.configs_per_batch
        return 128 if kind.mode in ("layout_random", "tile") else 64


@dataclass(frozen=True)
class Fold:
    index: int
    train_ids: tuple
    valid_ids: tuple


def make_folds(graph_ids, k, seed):
    """Shuffle graph ids with ``seed`` and split them into ``k`` validation shards.

    Whole graphs go to one side only, so configurations of a graph never
    appear in both training and validation.
    """
    ids = sorted(set(graph_ids))
    if len(ids) != len(list(graph_ids)):
        raise ValidationError("graph ids must be unique")
    if len(ids) < k:
        raise ValidationError(f"need at least k={k} graphs, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shards = np.array_split(perm, k)
    folds = []
    for i, shard in enumerate(shards):
        valid = {ids[j] for j in shard}
        folds.append(Fold(i, tuple(x for x in ids if x not in valid), tuple(sorted(valid))))
    return folds


def lr_at(step, total_steps, cfg):
    """Linear warm-up to ``lr_peak``, then cosine decay to ``lr_floor`` at ``total_steps``."""
    warmup = cfg.warmup_frac * total_steps
    if step < warmup:
        return cfg.lr_peak * step / warmup
    span = total_steps - warmup
    progress = 1.0 if span <= 0 else min(1.0, (step - warmup) / span)
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name):
    """Weight decay applies to every parameter except biases and temperatures."""
    return not (name.endswith(".bias") or name.endswith("log_temperature"))


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` (name -> array) so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay and decays(name):
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def score_all(model, pg, batch_size=128, scaler=None, config_scaler=None):
    """Scores for every configuration of ``pg``, in contiguous batches."""
    out = np.empty(pg.n_configs)
    for start in range(0, pg.n_configs, batch_size):
        idx = np.arange(start, min(start + batch_size, pg.n_configs))
        out[idx] = predict(model, make_batch(pg, scaler, idx, config_scaler))
    return out


def validation_tau(model, graphs, batch_size=128, config_scaler=None):
    taus = [kendall_tau(g.runtimes, score_all(model, g, batch_size, None, config_scaler)) for g in graphs]
    return float(np.mean(taus)) if taus else None


@dataclass
class FoldResult:
    fold: Fold
    checkpoint: Checkpoint
    best_tau: float | None
    best_epoch: int
    history: list = field(default_factory=list)
    seen_graph_ids: frozenset = frozenset()


def rankable(pg):
    return not pg.empty and pg.n_configs >= 2


def train_fold(dataset, fold, cfg, model_cfg, log_file=None):
    """Train one fold and return the checkpoint with the best validation tau.

    ``dataset`` is a PreprocessedDataset.  ``log_file`` (a text handle) receives
    one JSON line per validated epoch.
    """
    kind = dataset.kind
    by_id = dataset.by_id()
    missing = [i for i in fold.train_ids + fold.valid_ids if i not in by_id]
    if missing:
        raise ValidationError(f"fold refers to unknown graphs {missing[:3]}")
    train_all = [by_id[i] for i in fold.train_ids]
    scaler = fit_scaler([g.graph for g in train_all])
    config_scaler = fit_config_scaler(train_all) if kind.is_tile else None

    def scaled(pg):
        return replace(pg, graph=apply_scaler(scaler, pg.graph))

    train = [scaled(g) for g in train_all if rankable(g)]
    valid = [scaled(by_id[i]) for i in fold.valid_ids if rankable(by_id[i])]
    if not train:
        raise ValidationError(f"fold {fold.index} has no rankable training graph")

    seeds = np.random.SeedSequence([cfg.seed, fold.index]).spawn(2)
    model = TGraphModel(model_cfg, seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    opt = AdamW(model.params, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    batch_size = cfg.batch_size(kind)
    steps_per_epoch = len(train)
    total = max(1, int(round(cfg.epochs * steps_per_epoch)))
    n_epochs = math.ceil(total / steps_per_epoch)

    def emit(record):
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    emit({"event": "start", "fold": fold.index, "train_graphs": len(train), "valid_graphs": len(valid),
          "total_steps": total, "batch_size": batch_size, "loss_normalization": LOSS_NORMALIZATION,
          "parameters": model.parameter_count(), "train_config": asdict(cfg), "model_config": asdict(model_cfg)})
    log.info("fold %d: %d train / %d valid graphs, %d steps, %d parameters",
             fold.index, len(train), len(valid), total, model.parameter_count())

    best_tau, best_epoch, best_state = None, -1, model.state_dict()
    history, seen, losses = [], set(), []
    order = None
    for step in range(total):
        pos = step % steps_per_epoch
        if pos == 0:
            order = rng.permutation(steps_per_epoch)
        g = train[order[pos]]
        idx = rng.choice(g.n_configs, batch_size, replace=g.n_configs < batch_size)
        batch = make_batch(g, None, idx, config_scaler)
        seen.add(g.graph_id)
        model.zero_grad()
        try:
            loss = pairwise_hinge_loss(g.runtimes[idx], forward(batch, model))
        except NumericError as exc:
            raise NumericError(f"fold {fold.index} step {step} graph {g.graph_id}: {exc} "
                               f"(learning rate {lr_at(step, total, cfg):.3g}); training diverged") from None
        ad.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
        grads, _ = clip_grad_norm(grads, cfg.grad_clip_norm)
        lr = lr_at(step, total, cfg)
        opt.step(model.params, grads, lr)
        losses.append(loss.item())

        epoch_done = pos == steps_per_epoch - 1 or step == total - 1
        epoch = step // steps_per_epoch
        if epoch_done and ((epoch + 1) % cfg.validate_every == 0 or epoch == n_epochs - 1):
            tau = validation_tau(model, valid, cfg.eval_batch, config_scaler)
            record = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses)), "tau_val": tau}
            history.append(record)
            emit(record)
            losses = []
            if tau is not None and (best_tau is None or tau > best_tau):
                best_tau, best_epoch, best_state = tau, epoch, model.state_dict()
    if best_tau is None:
        best_state, best_epoch = model.state_dict(), n_epochs - 1
    model.load_state_dict(best_state)
    ckpt = Checkpoint(model, scaler, config_scaler, meta={
        "fold": fold.index, "seed": cfg.seed, "best_tau": best_tau, "best_epoch": best_epoch,
        "collection": str(kind), "train_ids": list(fold.train_ids), "valid_ids": list(fold.valid_ids)})
    emit({"event": "end", "fold": fold.index, "best_tau": best_tau, "best_epoch": best_epoch})
    return FoldResult(fold, ckpt, best_tau, best_epoch, history, frozenset(seen))


def _train_fold_task(args):
    return train_fold(*args)


def cross_validate(dataset, cfg, model_cfg, workers=1, log_files=None):
    """Train the first ``folds_trained`` folds of a ``k_folds`` plan."""
    folds = make_folds([g.graph_id for g in dataset.graphs], cfg.k_folds, cfg.seed)[:cfg.folds_trained]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_fold_task, [(dataset, f, cfg, model_cfg) for f in folds]))
    logs = log_files or [None] * len(folds)
    return [train_fold(dataset, f, cfg, model_cfg, fh) for f, fh in zip(folds, logs)]


def select_folds(results, folds_kept=4):
    """Ids of the ``folds_kept`` folds with the highest validation tau (ties -> lower id).

    ``results`` is a sequence of validation scores indexed by fold id, or of
    FoldResults.
    """
    scores = [(r.fold.index, r.best_tau) if isinstance(r, FoldResult) else (i, r)
              for i, r in enumerate(results)]
    if len(scores) < folds_kept:
        raise ValidationError(f"need at least {folds_kept} fold results, got {len(scores)}")
    ranked = sorted(scores, key=lambda s: (-(s[1] if s[1] is not None else -np.inf), s[0]))
    return [fold for fold, _ in ranked[:folds_kept]]
