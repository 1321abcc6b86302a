import os

# bitwise reproducibility checks assume single-threaded BLAS
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from tgraph.dataset import FEATURE_DIM, NUMERIC_DIM, CollectionKind, ComputationGraph, ConfigurationSet  # noqa: E402
from tgraph.preprocess import preprocess_graph  # noqa: E402
from tgraph.synthetic import synthesize  # noqa: E402

LAYOUT = CollectionKind("layout_random")


def make_graph(n_nodes, edges, configurable, opcodes=None, graph_id="g", seed=0):
    """A -1 padded graph with random numeric features."""
    rng = np.random.default_rng(seed)
    feat = np.zeros((n_nodes, FEATURE_DIM))
    feat[:, :NUMERIC_DIM] = rng.standard_normal((n_nodes, NUMERIC_DIM))
    feat[:, NUMERIC_DIM:] = -1
    feat[:, NUMERIC_DIM:NUMERIC_DIM + 2] = [1, 0]
    if opcodes is None:
        opcodes = rng.integers(0, 5, n_nodes)
    return ComputationGraph(graph_id, opcodes, feat, edges, configurable).validate()


def random_configs(rng, n_configs, n_cfg_nodes, runtimes=None):
    layouts = np.full((n_configs, n_cfg_nodes, 3, 6), -1, dtype=np.int64)
    for c in range(n_configs):
        for m in range(n_cfg_nodes):
            for k in range(3):
                rank = int(rng.integers(0, 5))
                layouts[c, m, k, :rank] = rng.permutation(rank)
    if runtimes is None:
        runtimes = rng.integers(1, 10_000, n_configs)
    return ConfigurationSet(runtimes, layouts=layouts)


@pytest.fixture
def small_synthetic():
    """Records and oracle tables of a tiny synthetic dataset."""
    return synthesize(seed=3, n_graphs=6, nodes_range=(6, 14), configs_per_graph=24)


@pytest.fixture
def preprocessed_graph(small_synthetic):
    rec = small_synthetic[0][0]
    return preprocess_graph(rec.graph, rec.configs, rec.kind)
