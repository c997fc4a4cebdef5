"""Central-difference verification of every registered backward rule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ops import OP_KINDS
from .tensor import Tensor, apply, backward

KINK_MARGIN = 1e-3


@dataclass
class CheckReport:
    op_kind: str
    max_rel_err: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.op_kind:<20} max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def _away_from(rng, shape, kinks, lo=-3.0, hi=3.0):
    x = rng.uniform(lo, hi, size=shape)
    for _ in range(100):
        bad = np.zeros(shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < KINK_MARGIN
        if not bad.any():
            return x
        x[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    raise RuntimeError("kink-avoiding sampler did not converge")


# Each case returns (input arrays, which inputs are differentiable, attrs factory).
# The attrs factory is called per evaluation so stateful attrs (BN running
# buffers, dropout RNG) are fresh and identical every time.
def _case(op_kind: str, shape_spec, rng):
    s = shape_spec or {}
    n = rng.normal
    if op_kind == "conv2d":
        xs = s.get("x", (2, 4, 6, 6))
        groups = s.get("groups", 2)
        o = s.get("out", 4)
        k = s.get("k", 3)
        w = (o, xs[1] // groups, k, k)
        return [n(size=xs), n(size=w), n(size=o)], [True] * 3, \
            lambda: dict(stride=s.get("stride", 2), padding=s.get("padding", 1), groups=groups)
    if op_kind == "linear":
        w = s.get("w", (3, 4))
        x = s.get("x", (5, w[1]))
        return [n(size=x), n(size=w), n(size=w[0])], [True] * 3, dict
    if op_kind == "batch_norm_2d":
        xs = s.get("x", (3, 2, 3, 4))
        c = xs[1]
        training = s.get("training", True)
        return [n(size=xs), n(size=c), n(size=c)], [True] * 3, lambda: dict(
            running_mean=np.zeros(c), running_var=np.ones(c), training=training)
    if op_kind == "layer_norm":
        xs = s.get("x", (3, 6))
        return [n(size=xs), n(size=xs[-1:]), n(size=xs[-1:])], [True] * 3, dict
    if op_kind == "relu":
        return [_away_from(rng, s.get("x", (8,)), [0.0])], [True], dict
    if op_kind == "relu6":
        return [_away_from(rng, s.get("x", (8,)), [0.0, 6.0], -2.0, 8.0)], [True], dict
    if op_kind in ("sigmoid", "global_avg_pool_2d"):
        default = (8,) if op_kind == "sigmoid" else (2, 3, 4, 5)
        return [n(size=s.get("x", default))], [True], dict
    if op_kind == "softmax":
        return [n(size=s.get("x", (3, 5)))], [True], lambda: dict(axis=s.get("axis", -1))
    if op_kind in ("add", "matmul"):
        if op_kind == "add":
            a, b = s.get("a", (3, 4)), s.get("b", (4,))
        else:
            a, b = s.get("a", (2, 3, 4)), s.get("b", (4, 5))
        return [n(size=a), n(size=b)], [True, True], dict
    if op_kind == "scale":
        return [n(size=s.get("x", (6,)))], [True], lambda: dict(factor=s.get("factor", -2.5))
    if op_kind == "concat":
        return [n(size=s.get("a", (2, 3))), n(size=s.get("b", (2, 4)))], [True, True], \
            lambda: dict(axis=s.get("axis", 1))
    if op_kind == "reshape":
        return [n(size=s.get("x", (2, 6)))], [True], lambda: dict(shape=s.get("shape", (3, 4)))
    if op_kind == "slice":
        return [n(size=s.get("x", (4, 5)))], [True], \
            lambda: dict(index=s.get("index", (slice(1, 3), slice(0, 5, 2))))
    if op_kind == "mean":
        return [n(size=s.get("x", (3, 4)))], [True], lambda: dict(axis=s.get("axis", 1))
    if op_kind == "transpose":
        return [n(size=s.get("x", (2, 3, 4)))], [True], lambda: dict(axes=s.get("axes", (2, 0, 1)))
    if op_kind == "dropout":
        seed = int(rng.integers(1 << 31))
        return [n(size=s.get("x", (4, 5)))], [True], lambda: dict(
            p=s.get("p", 0.3), training=True, rng=np.random.default_rng(seed))
    if op_kind == "bce_with_logits":
        x = s.get("x", (3, 2))
        targets = rng.uniform(0, 1, size=x)
        return [n(size=x) * 3], [True], lambda: dict(targets=targets)
    raise KeyError(f"no grad_check case for op kind {op_kind!r}")


def check_function(fn: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
                   differentiable=None, h: float = 1e-5) -> float:
    """Max relative error of reverse-mode vs central differences for ``fn``.

    ``fn`` maps a list of tensors to a scalar tensor. Relative error is taken
    per input as max|analytic - numeric| / max(max|analytic|, max|numeric|).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    differentiable = differentiable or [True] * len(arrays)
    leaves = [Tensor(a.copy(), requires_grad=d) for a, d in zip(arrays, differentiable)]
    loss = fn(leaves)
    backward(loss)
    worst = 0.0
    for k, (a, d) in enumerate(zip(arrays, differentiable)):
        if not d:
            continue
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = fn([Tensor(b) for b in arrays]).item()
            flat[idx] = orig - h
            fm = fn([Tensor(b) for b in arrays]).item()
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (fp - fm) / (2 * h)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max())
        if denom == 0.0:
            continue
        worst = max(worst, float(np.abs(analytic - numeric).max() / denom))
    return worst


def grad_check(op_kind: str, shape_spec: dict | None = None, tolerance: float = 1e-4,
               seed: int = 0) -> CheckReport:
    """Compare the registered backward rule of ``op_kind`` against central differences.

    The op output is contracted with a fixed random projection so every output
    element contributes to the scalar being differentiated.
    """
    rng = np.random.default_rng(seed)
    arrays, diff, make_attrs = _case(op_kind, shape_spec, rng)
    proj_rng = np.random.default_rng(seed + 1)
    projection = {}

    def fn(ts):
        out = apply(op_kind, ts, **make_attrs())
        if "r" not in projection:
            projection["r"] = proj_rng.normal(size=out.shape)
        weights = Tensor(projection["r"])
        return apply("reshape", [_inner(out, weights)], shape=())

    err = check_function(fn, arrays, diff)
    return CheckReport(op_kind, err, tolerance, sum(a.size for a in arrays))


def _inner(a: Tensor, w: Tensor) -> Tensor:
    # sum(a * w) as a 1×n @ n×1 product, using only registered ops
    flat_a = apply("reshape", [a], shape=(1, a.data.size))
    flat_w = apply("reshape", [w], shape=(a.data.size, 1))
    return apply("matmul", [flat_a, flat_w])


def grad_check_suite(tolerance: float = 1e-4, seed: int = 0) -> list[CheckReport]:
    reports = [grad_check(k, None, tolerance, seed) for k in OP_KINDS]
    # eval-mode batch norm is a separate backward branch
    reports.append(grad_check("batch_norm_2d", {"training": False}, tolerance, seed))
    reports[-1].op_kind = "batch_norm_2d[eval]"
    # depthwise / pointwise conv paths
    depthwise = grad_check("conv2d", {"x": (2, 3, 5, 5), "groups": 3, "out": 3, "stride": 1}, tolerance, seed)
    depthwise.op_kind = "conv2d[depthwise]"
    pointwise = grad_check("conv2d", {"x": (2, 4, 3, 3), "groups": 1, "out": 5, "k": 1,
                                      "stride": 1, "padding": 0}, tolerance, seed)
    pointwise.op_kind = "conv2d[pointwise]"
    reports += [depthwise, pointwise]
    return reports
