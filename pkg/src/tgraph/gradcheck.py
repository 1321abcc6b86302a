"""Central finite-difference checks for the autodiff engine and model blocks.

The error of a check is normwise: ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)`` over all inputs, so that tiny gradient entries do not turn
round-off into large relative errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-4
OP_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return self.error < self.tol


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    diff = max(float(np.max(np.abs(a - n), initial=0.0)) for a, n in zip(analytic, numeric))
    scale = max(max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
                for a, n in zip(analytic, numeric))
    return diff / scale if scale > 0 else diff


def check(fn, arrays, step=STEP, seed=0):
    """Compare autodiff and finite-difference gradients of ``fn(*tensors)``.

    The output is projected onto a fixed random direction to give a scalar,
    which exercises every output element.  Returns the normwise error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    ad.backward(ad.sum(ad.mul(out, Tensor(proj))))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar():
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    numeric = [numeric_grad(scalar, a, step) for a in arrays]
    return relative_error(analytic, numeric)


def check_params(fn, params, inputs=(), step=STEP, seed=0):
    """Like :func:`check` for a function of named parameter tensors plus extra inputs."""
    names = sorted(params)
    return check(lambda *ts: fn(dict(zip(names, ts[:len(names)])), *ts[len(names):]),
                 [params[n].data for n in names] + list(inputs), step, seed)


def op_cases(rng):
    """``(name, fn, input arrays)`` for every differentiable operation."""
    def r(*shape):
        return rng.standard_normal(shape)

    def away(*shape):  # values bounded away from the relu kink
        x = r(*shape)
        return np.where(np.abs(x) < 0.2, 0.2 * np.sign(x) + x, x)

    idx = np.array([2, 0, 4, 2, 1])
    seg = np.array([0, 2, 2, 1, 0, 3])
    emb = np.array([[0, 3, 1], [2, 2, 4]])
    return [
        ("add", ad.add, [r(6, 5, 4), r(5, 4)]),
        ("sub", ad.sub, [r(6, 5, 4), r(6, 1, 4)]),
        ("neg", ad.neg, [r(6, 5)]),
        ("mul", ad.mul, [r(6, 5, 4), r(4)]),
        ("exp", ad.exp, [r(6, 5)]),
        ("matmul_2d", ad.matmul, [r(6, 5), r(5, 4)]),
        ("matmul_3d", ad.matmul, [r(6, 5, 4), r(4, 3)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=-1), [r(6, 5, 2), r(6, 5, 3)]),
        ("reshape", lambda a: ad.reshape(a, (5, 24)), [r(6, 5, 4)]),
        ("expand", lambda a: ad.expand(a, (6, 5, 4)), [r(5, 4)]),
        ("gather_rows", lambda a: ad.gather_rows(a, idx, axis=1), [r(6, 5, 4)]),
        ("segment_sum", lambda a: ad.segment_sum(a, seg, 4, axis=0), [r(6, 5, 4)]),
        ("sum", lambda a: ad.sum(a, axis=1), [r(6, 5, 4)]),
        ("mean", lambda a: ad.mean(a, axis=1, keepdims=True), [r(6, 5, 4)]),
        ("l2_normalize", lambda a: ad.l2_normalize(a, axis=-1), [r(6, 5, 4)]),
        ("instance_norm", lambda x, w, b: ad.instance_norm(x, w, b, axis=1), [r(6, 5, 4), r(4), r(4)]),
        ("gelu", ad.gelu, [r(6, 5, 4)]),
        ("relu", ad.relu, [away(6, 5, 4)]),
        ("sigmoid", ad.sigmoid, [r(6, 5, 4)]),
        ("softmax", lambda a, t: ad.softmax(a, axis=0, temperature=ad.exp(t)), [r(6, 5, 4), r(1) * 0.3]),
        ("embedding_lookup", lambda t: ad.embedding_lookup(t, emb), [r(5, 4)]),
    ]


def block_case(seed=0):
    """A small model and input for checking one whole convolution block."""
    from .model import ModelConfig, TGraphModel

    cfg = ModelConfig(n_opcodes=3, hidden_dim=4, se_reduction=2)
    model = TGraphModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.startswith("blocks.0."):
            p.data[...] = rng.standard_normal(p.data.shape) * 0.5
    eps = rng.standard_normal((3, 5, cfg.hidden_dim))
    edges = np.array([[0, 1], [1, 2], [3, 2], [3, 4]])
    return model, eps, edges


def run_suite(seed=0):
    """Check every op (tolerance 1e-5) and one conv_block (tolerance 1e-4)."""
    from .model import conv_block

    rng = np.random.default_rng(seed)
    results = [CheckResult(name, check(fn, arrays, seed=seed), OP_TOL) for name, fn, arrays in op_cases(rng)]
    model, eps, edges = block_case(seed)
    block = {n: p for n, p in model.params.items() if n.startswith("blocks.0.")}

    def run(params, x):
        saved = {n: model.params[n] for n in params}
        model.params.update(params)
        try:
            return conv_block(x, edges, model, 0)
        finally:
            model.params.update(saved)

    results.append(CheckResult("conv_block", check_params(run, block, [eps], seed=seed), BLOCK_TOL))
    return results
