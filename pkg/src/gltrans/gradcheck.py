"""Finite-difference verification of analytic gradients.

Analytic gradients come from the float32 tape. The central-difference
oracle (step 1e-3) re-evaluates the same forward code in float64, so its
rounding noise stays far below the thresholds being tested.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, default_dtype, no_grad

STEP = 1e-3
OP_TOL = 1e-3
MODEL_TOL = 1e-2
FLOOR = 1e-4


@dataclass
class GradRow:
    name: str
    max_rel_err: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(FLOOR, np.abs(a) + np.abs(n))


@contextlib.contextmanager
def corrupt_gelu_gradient(scale: float = 1.5):
    """Negative control: scale GeLU's backward so checks must fail."""
    prev = T._gelu_grad_scale
    T._gelu_grad_scale = scale
    try:
        yield
    finally:
        T._gelu_grad_scale = prev


# -- per-op checks -----------------------------------------------------------


def _bn_train(x, g, b):
    c = x.shape[-1]
    return T.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)


OP_CASES: dict[str, tuple[Callable, list[tuple]]] = {
    "matmul": (lambda a, b: a @ b, [(4, 5), (5, 3)]),
    "add_broadcast": (lambda a, b: a + b, [(4, 5), (5,)]),
    "mul": (lambda a, b: a * b, [(4, 5), (4, 5)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    "gelu": (T.gelu, [(6, 8)]),
    "sigmoid": (T.sigmoid, [(6, 8)]),
    "softplus": (T.softplus, [(6, 8)]),
    "softmax": (lambda x: T.softmax(x, axis=-1), [(4, 6)]),
    "log_softmax": (lambda x: T.log_softmax(x, axis=-1), [(4, 6)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, 1e-6), [(4, 8), (8,), (8,)]),
    "batch_norm": (_bn_train, [(6, 4), (4,), (4,)]),
    "conv2d_3x3": (lambda x, k: T.conv2d(x, k), [(4, 3, 2), (3, 3, 2, 2)]),
    "conv2d_1x1": (lambda x, k: T.conv2d(x, k), [(2, 4, 3, 2), (1, 1, 2, 3)]),
    "getitem_gather": (lambda x: x[np.array([0, 2, 2, 1])] * 2.0, [(3, 5)]),
    "concat_reshape": (lambda a, b: T.concat([a, b], axis=0).reshape(2, 10).transpose(1, 0), [(2, 5), (2, 5)]),
    "sum_mean": (lambda x: x.sum(axis=0, keepdims=True) * x.mean(axis=1), [(4, 4)]),
}


def check_op(name: str, fn: Callable, shapes: list[tuple], seed: int = 0) -> GradRow:
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    with no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weight = rng.standard_normal(out_shape)

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    (fn(*inputs) * Tensor(weight)).sum().backward()

    errs = []
    with default_dtype(np.float64), no_grad():
        base = [a.astype(np.float64) for a in arrays]
        w = Tensor(weight)

        def f(vals):
            return (fn(*[Tensor(v) for v in vals]) * w).sum().item()

        for i, arr in enumerate(base):
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + STEP
                up = f(base)
                arr[idx] = old - STEP
                down = f(base)
                arr[idx] = old
                numeric[idx] = (up - down) / (2 * STEP)
            errs.append(rel_error(inputs[i].grad, numeric).max())
    return GradRow(f"op:{name}", float(max(errs)), OP_TOL, sum(a.size for a in arrays))


def check_ops(seed: int = 0) -> list[GradRow]:
    return [check_op(name, fn, shapes, seed) for name, (fn, shapes) in OP_CASES.items()]


# -- whole-model check -------------------------------------------------------


def check_model(estimator, coords: int = 10, seed: int = 0) -> list[GradRow]:
    """Gradient of the full training loss w.r.t. every parameter tensor.

    ``coords`` random coordinates per tensor (all of them when smaller).
    Uses a 2-identity x 2-image batch so the triplet term is defined.

    Zero-initialized tensors (class token, embedding tables, biases) are
    redrawn first: at the all-zero class token LayerNorm sits on its eps
    floor, where the curvature scale equals the difference step.
    """
    from .objectives import total_loss

    rng = np.random.default_rng(seed)
    est = estimator
    est.init_model(n_classes=2)
    model = est.model_
    cfg = model.bcfg
    images = rng.uniform(0, 1, size=(4, cfg.image_h, cfg.image_w, cfg.channels)).astype(np.float32)
    labels = np.array([0, 0, 1, 1])
    cams = np.arange(4) % cfg.num_cameras
    model.train()

    named = list(model.named_parameters()) + [(p.name, p) for p in est.classifiers_.values()]
    for _, p in named:
        if not p.data.any():
            p.data = rng.normal(0.0, 0.1, p.shape).astype(p.data.dtype)
    buffers = {n: t for n, t in model.named_tensors() if not t.requires_grad}
    saved = {n: t.data.copy() for n, t in buffers.items()}

    def loss_value():
        out = model(images, cams)
        return total_loss(out.taps, labels, est.classifiers_).total

    loss_value().backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in named}

    originals = {name: p.data for name, p in named}
    rows = []
    try:
        for name, p in named:
            p.data = originals[name].astype(np.float64)
        for n, t in buffers.items():
            t.data = saved[n].astype(np.float64)
        with default_dtype(np.float64), no_grad():
            for name, p in named:
                flat = p.data.reshape(-1)
                picks = np.arange(flat.size) if flat.size <= coords else rng.choice(flat.size, coords, replace=False)
                numeric = np.empty(len(picks))
                for j, k in enumerate(picks):
                    old = flat[k]
                    flat[k] = old + STEP
                    up = loss_value().item()
                    flat[k] = old - STEP
                    down = loss_value().item()
                    flat[k] = old
                    numeric[j] = (up - down) / (2 * STEP)
                err = rel_error(analytic[name].reshape(-1)[picks], numeric)
                rows.append(GradRow(f"param:{name}", float(err.max()), MODEL_TOL, len(picks)))
    finally:
        for name, p in named:
            p.data = originals[name]
            p.grad = None
        for n, t in buffers.items():
            t.data = saved[n]
    return rows


def run_suite(estimator, coords: int = 10, seed: int = 0) -> tuple[list[GradRow], float]:
    start = time.perf_counter()
    rows = check_ops(seed) + check_model(estimator, coords, seed)
    return rows, time.perf_counter() - start


def format_table(rows: list[GradRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'tensor':<{width}}  {'max_rel_err':>11}  {'tol':>6}  {'n':>4}  status"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.max_rel_err:11.3e}  {r.tol:6.0e}  {r.checked:4d}  "
            f"{'ok' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
