import io
import json
import math

import numpy as np
import pytest

from tgraph import autodiff as ad
from tgraph.autodiff import Tensor
from tgraph.dataset import CollectionKind
from tgraph.errors import ValidationError
from tgraph.model import ModelConfig, TGraphModel, forward, make_batch
from tgraph.preprocess import PreprocessedDataset, fit_scaler, preprocess_graph
from tgraph.ranking import pairwise_hinge_loss
from tgraph.synthetic import synthesize
from tgraph.training import (
    AdamW, TrainConfig, clip_grad_norm, decays, lr_at, make_folds, select_folds, train_fold,
)


def test_make_folds_partition_and_determinism():
    ids = [f"g{i:02d}" for i in range(20)]
    folds = make_folds(ids, 20, seed=3)
    assert all(len(f.valid_ids) == 1 for f in folds)
    assert sorted(g for f in folds for g in f.valid_ids) == ids
    for f in folds:
        assert set(f.train_ids).isdisjoint(f.valid_ids)
        assert set(f.train_ids) | set(f.valid_ids) == set(ids)
    assert make_folds(ids, 20, seed=3) == folds
    assert make_folds(ids[::-1], 20, seed=3) == folds
    with pytest.raises(ValidationError):
        make_folds(ids[:4], 5, seed=0)


def test_lr_schedule_points():
    cfg = TrainConfig()
    total = 1000
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(50, total, cfg) == pytest.approx(1e-3)
    assert lr_at(total, total, cfg) == pytest.approx(1e-5)
    assert lr_at(25, total, cfg) == pytest.approx(5e-4)
    mid = 50 + (total - 50) / 2
    assert lr_at(mid, total, cfg) == pytest.approx(1e-5 + (1e-3 - 1e-5) / 2)
    values = [lr_at(s, total, cfg) for s in range(50, total + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_train_config_invariants():
    with pytest.raises(ValidationError):
        TrainConfig(warmup_frac=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(folds_kept=6, folds_trained=5)
    assert TrainConfig.for_collection(CollectionKind("tile")).epochs == 17.5
    assert TrainConfig.for_collection(CollectionKind("layout_default", "nlp")).epochs == 1000
    assert TrainConfig.for_collection(CollectionKind("layout_random", "xla")).epochs == 750
    cfg = TrainConfig()
    assert cfg.batch_size(CollectionKind("layout_random")) == 128
    assert cfg.batch_size(CollectionKind("layout_default")) == 64


def test_adamw_matches_reference():
    # minimise (w - 3)^2 + (b + 1)^2 with a weight and a bias
    params = {"w.weight": Tensor(np.array([0.5]), requires_grad=True),
              "w.bias": Tensor(np.array([0.2]), requires_grad=True)}
    opt = AdamW(params, weight_decay=0.1)
    w, b = 0.5, 0.2
    mw = vw = mb = vb = 0.0
    for t in range(1, 11):
        lr = 0.01 * t
        gw, gb = 2 * (w - 3), 2 * (b + 1)
        w *= 1 - lr * 0.1
        mw = 0.9 * mw + 0.1 * gw
        vw = 0.999 * vw + 0.001 * gw * gw
        w -= lr * (mw / (1 - 0.9 ** t)) / (math.sqrt(vw / (1 - 0.999 ** t)) + 1e-8)
        mb = 0.9 * mb + 0.1 * gb
        vb = 0.999 * vb + 0.001 * gb * gb
        b -= lr * (mb / (1 - 0.9 ** t)) / (math.sqrt(vb / (1 - 0.999 ** t)) + 1e-8)
        grads = {"w.weight": 2 * (params["w.weight"].data - 3), "w.bias": 2 * (params["w.bias"].data + 1)}
        opt.step(params, grads, lr)
        assert params["w.weight"].data[0] == pytest.approx(w, rel=1e-13)
        assert params["w.bias"].data[0] == pytest.approx(b, rel=1e-13)


def test_clip_to_unit_norm():
    rng = np.random.default_rng(0)
    grads = {"a": rng.standard_normal((4, 3)) * 100, "b": rng.standard_normal(5) * 100}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm > 1
    total = math.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
    assert abs(total - 1.0) < 1e-12
    small = {"a": np.full(3, 0.1)}
    assert clip_grad_norm(small, 1.0)[0]["a"] is small["a"]


def test_weight_decay_groups():
    model = TGraphModel(ModelConfig(n_opcodes=4, hidden_dim=16, se_reduction=2))
    exempt = sorted(n for n in model.params if not decays(n))
    assert exempt and all(n.endswith(".bias") or n.endswith("log_temperature") for n in exempt)
    assert decays("f_in.0.weight") and decays("layout_embedding") and decays("blocks.0.norm.weight")
    # decay leaves exempt parameters untouched when gradients are zero
    opt = AdamW(model.params, weight_decay=0.5)
    before = model.state_dict()
    opt.step(model.params, {n: np.zeros_like(p.data) for n, p in model.params.items()}, 0.1)
    for name, p in model.params.items():
        if decays(name):
            np.testing.assert_allclose(p.data, before[name] * 0.95)
        else:
            np.testing.assert_array_equal(p.data, before[name])


def test_select_folds():
    assert select_folds([0.5, 0.7, 0.6, 0.65, 0.62], 4) == [1, 3, 4, 2]
    assert select_folds([0.3] * 5, 4) == [0, 1, 2, 3]
    assert sorted(select_folds([0.1, 0.4, 0.2, 0.3], 4)) == [0, 1, 2, 3]
    with pytest.raises(ValidationError):
        select_folds([0.1, 0.2], 4)


@pytest.fixture(scope="module")
def tiny_dataset():
    records, _ = synthesize(seed=11, n_graphs=8, nodes_range=(6, 12), configs_per_graph=40)
    graphs = [preprocess_graph(r.graph, r.configs, r.kind) for r in records]
    manifest = {"kind": "layout:xla:random", "n_opcodes": 12}
    return PreprocessedDataset(None, manifest, graphs)


def test_loss_decreases_on_fixed_batch(tiny_dataset):
    pg = tiny_dataset.graphs[0]
    model = TGraphModel(ModelConfig(n_opcodes=12, hidden_dim=16, se_reduction=2), seed=0)
    batch = make_batch(pg, fit_scaler([pg.graph]), np.arange(32))
    opt = AdamW(model.params, weight_decay=1e-5)
    losses = []
    for _ in range(6):
        model.zero_grad()
        loss = pairwise_hinge_loss(pg.runtimes[:32], forward(batch, model))
        ad.backward(loss)
        losses.append(loss.item())
        grads, _ = clip_grad_norm({n: p.grad for n, p in model.params.items()}, 1.0)
        opt.step(model.params, grads, 1e-3)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def run_fold(ds, **overrides):
    cfg = TrainConfig(**{"epochs": 2, "configs_per_batch": 16, "k_folds": 4, "folds_trained": 4,
                         "seed": 5, **overrides})
    fold = make_folds([g.graph_id for g in ds.graphs], cfg.k_folds, cfg.seed)[1]
    log = io.StringIO()
    res = train_fold(ds, fold, cfg, ModelConfig(n_opcodes=12, hidden_dim=16, se_reduction=2), log)
    return fold, res, log.getvalue()


def test_train_fold_audit_log_and_determinism(tiny_dataset):
    fold, res, log = run_fold(tiny_dataset)
    assert res.seen_graph_ids.isdisjoint(fold.valid_ids)
    assert res.seen_graph_ids <= set(fold.train_ids)
    assert res.checkpoint.scaler.provenance == tuple(sorted(fold.train_ids))
    lines = [json.loads(x) for x in log.splitlines()]
    assert lines[0]["event"] == "start" and "active pairs" in lines[0]["loss_normalization"]
    epochs = [x for x in lines if "epoch" in x and "event" not in x]
    assert [e["epoch"] for e in epochs] == [0, 1]
    assert all({"step", "lr", "loss", "tau_val"} <= set(e) for e in epochs)
    assert res.best_tau == max(e["tau_val"] for e in epochs)

    from tgraph.model import checkpoint_bytes

    _, again, log2 = run_fold(tiny_dataset)
    assert checkpoint_bytes(again.checkpoint) == checkpoint_bytes(res.checkpoint)
    assert log2 == log


def test_fractional_epochs(tiny_dataset):
    _, res, log = run_fold(tiny_dataset, epochs=1.5)
    start = json.loads(log.splitlines()[0])
    assert start["total_steps"] == round(1.5 * start["train_graphs"])
    assert [h["epoch"] for h in res.history] == [0, 1]


def test_sampling_with_replacement_for_small_graphs(tiny_dataset):
    _, res, _ = run_fold(tiny_dataset, epochs=1, configs_per_batch=100)
    assert res.best_tau is not None
