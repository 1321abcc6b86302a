import numpy as np
import pytest

from tgraph.errors import ValidationError
from tgraph.inference import evaluate, fold_scores, rank, top_k, tta_permutations
from tgraph.model import Checkpoint, ModelConfig, TGraphModel, make_batch, predict
from tgraph.preprocess import fit_scaler
from tgraph.ranking import kendall_tau


def checkpoint(pg, seed=0, **cfg):
    model = TGraphModel(ModelConfig(n_opcodes=12, hidden_dim=16, se_reduction=2, **cfg), seed=seed)
    return Checkpoint(model, fit_scaler([pg.graph]))


def test_single_batch_tta_is_a_no_op(preprocessed_graph):
    pg = preprocessed_graph
    ckpt = checkpoint(pg)
    plain = predict(ckpt.model, make_batch(pg, ckpt.scaler))
    for perm in tta_permutations(pg.n_configs, 4, seed=1):
        assert np.array_equal(fold_scores(pg, ckpt, [perm]), plain)
    result = rank(pg, [ckpt], n_tta=10, seed=1)
    np.testing.assert_allclose(result.scores, plain, rtol=1e-14)


def test_one_checkpoint_one_round_equals_forward(preprocessed_graph):
    pg = preprocessed_graph
    ckpt = checkpoint(pg)
    plain = predict(ckpt.model, make_batch(pg, ckpt.scaler))
    assert np.array_equal(rank(pg, [ckpt], n_tta=1).scores, plain)


def test_constant_checkpoints_average(preprocessed_graph):
    ckpts = []
    for c in (1.0, 2.0, 3.0, 4.0):
        ckpt = checkpoint(preprocessed_graph, seed=int(c))
        ckpt.model.params["f_out.weight"].data[...] = 0.0
        ckpt.model.params["f_out.bias"].data[...] = c
        ckpts.append(ckpt)
    result = rank(preprocessed_graph, ckpts, n_tta=2)
    assert np.all(result.scores == 2.5)
    assert result.n_folds == 4


def test_ensemble_is_linear(preprocessed_graph):
    pg = preprocessed_graph
    ckpts = [checkpoint(pg, seed=s) for s in (1, 2)]
    base = rank(pg, ckpts, n_tta=3, batch=8, seed=4).scores
    for ckpt in ckpts:
        ckpt.model.params["f_out.weight"].data *= 3.0
        ckpt.model.params["f_out.bias"].data *= 3.0
    scaled = rank(pg, ckpts, n_tta=3, batch=8, seed=4)
    np.testing.assert_allclose(scaled.scores, 3.0 * base, rtol=1e-12)
    assert np.array_equal(scaled.order, top_k(base, pg.n_configs))


def test_multi_batch_result_depends_only_on_seed(preprocessed_graph):
    pg = preprocessed_graph
    ckpt = checkpoint(pg)
    a = rank(pg, [ckpt], n_tta=3, batch=5, seed=7)
    b = rank(pg, [ckpt], n_tta=3, batch=5, seed=7)
    c = rank(pg, [ckpt], n_tta=3, batch=5, seed=8)
    assert np.array_equal(a.scores, b.scores)
    assert not np.array_equal(a.scores, c.scores)
    assert a.tta_seed == 7 and a.n_tta == 3


def test_top_k():
    scores = np.array([0.3, -1.0, 0.3, 2.0, -1.0])
    assert top_k(scores, 1).tolist() == [1]
    assert top_k(scores, 10).tolist() == [1, 4, 0, 2, 3]
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.integers(0, 5, 12).astype(float)
        brute = sorted(range(12), key=lambda i: (s[i], i))
        assert top_k(s, 4).tolist() == brute[:4]
    with pytest.raises(ValidationError):
        top_k(scores, 0)


def test_mode_mismatch_rejected(preprocessed_graph):
    ckpt = checkpoint(preprocessed_graph, mode="tile")
    with pytest.raises(ValidationError):
        rank(preprocessed_graph, [ckpt])
    with pytest.raises(ValidationError):
        rank(preprocessed_graph, [])


def test_evaluate(preprocessed_graph):
    pg = preprocessed_graph
    scores = pg.runtimes.astype(float)
    out = evaluate([pg], {pg.graph_id: scores})
    assert out["metric"] == "kendall_tau" and out["mean"] == kendall_tau(pg.runtimes, scores)
    with pytest.raises(ValidationError):
        evaluate([pg], {pg.graph_id: scores[:-1]})
