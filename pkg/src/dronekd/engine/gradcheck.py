"""Finite-difference verification of every registered differentiable op.

Each registered op has a small fixture that builds a scalar loss through it.
Analytic gradients from the reverse pass are compared against central
differences computed in float64 (float32 rounding would eat most of the
tolerance budget). Fixtures whose op has non-differentiable points (relu,
abs, max-like ops) resample inputs that land near a kink and report how often
they did.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


def numeric_gradient(fn, inputs: list[T.Tensor], index: int, eps: float) -> np.ndarray:
    """Central-difference d(fn)/d(inputs[index]), elementwise."""
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(*inputs).item()
        flat[i] = orig - eps
        lo = fn(*inputs).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def gradcheck(fn, inputs: list[T.Tensor], eps: float = 1e-3) -> float:
    """Max relative error between analytic and numeric gradients."""
    for x in inputs:
        x.zero_grad()
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numeric_gradient(fn, inputs, i, eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


def _x(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _away_from(arr: np.ndarray, points, delta: float) -> bool:
    return all(np.all(np.abs(arr - p) > delta) for p in points)


# Each entry: name -> (build(rng) -> (fn, inputs), kink_check(inputs) -> bool).
# kink_check returns True when the sample is safe to difference through.
_FIXTURES = {}


def _register(name, build, kink_check=None):
    _FIXTURES[name] = (build, kink_check)


_register("add", lambda rng: (lambda a, b: (a + b).sum(), [_x(rng, 3, 4), _x(rng, 3, 4)]))
_register("sub", lambda rng: (lambda a, b: (a - b).sum(), [_x(rng, 3, 4), _x(rng, 3, 4)]))
_register("mul", lambda rng: (lambda a, b: (a * b).sum(), [_x(rng, 3, 4), _x(rng, 1, 4)]))
_register(
    "div",
    lambda rng: (
        lambda a, b: (a / b).sum(),
        [_x(rng, 3, 4), T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=np.float64)],
    ),
)
_register("neg", lambda rng: (lambda a: (-a).sum(), [_x(rng, 5)]))
_register(
    "power",
    lambda rng: (
        lambda a: (a ** 3).sum(),
        [T.Tensor(rng.uniform(0.5, 1.5, (4,)), requires_grad=True, dtype=np.float64)],
    ),
)
_register("exp", lambda rng: (lambda a: T.exp(a).sum(), [_x(rng, 3, 3)]))
_register(
    "log",
    lambda rng: (
        lambda a: T.log(a).sum(),
        [T.Tensor(rng.uniform(0.5, 3.0, (6,)), requires_grad=True, dtype=np.float64)],
    ),
)
_register(
    "sqrt",
    lambda rng: (
        lambda a: T.sqrt(a).sum(),
        [T.Tensor(rng.uniform(0.5, 3.0, (6,)), requires_grad=True, dtype=np.float64)],
    ),
)
_register(
    "abs",
    lambda rng: (lambda a: T.abs_(a).sum(), [_x(rng, 8)]),
    lambda inputs: _away_from(inputs[0].data, [0.0], 1e-2),
)
_register(
    "relu",
    lambda rng: (lambda a: T.relu(a).sum(), [_x(rng, 8)]),
    lambda inputs: _away_from(inputs[0].data, [0.0], 1e-2),
)
_register("sigmoid", lambda rng: (lambda a: T.sigmoid(a).sum(), [_x(rng, 8)]))
_register("softplus", lambda rng: (lambda a: T.softplus(a).sum(), [_x(rng, 8)]))
_register(
    "maximum",
    lambda rng: (lambda a, b: T.maximum(a, b).sum(), [_x(rng, 8), _x(rng, 8)]),
    lambda inputs: _away_from(inputs[0].data - inputs[1].data, [0.0], 1e-2),
)
_register(
    "minimum",
    lambda rng: (lambda a, b: T.minimum(a, b).sum(), [_x(rng, 8), _x(rng, 8)]),
    lambda inputs: _away_from(inputs[0].data - inputs[1].data, [0.0], 1e-2),
)
_register(
    "where",
    lambda rng: (
        (lambda m: lambda a, b: T.where(m, a, b).sum())(rng.random((3, 4)) > 0.5),
        [_x(rng, 3, 4), _x(rng, 3, 4)],
    ),
)
_register("sum", lambda rng: (lambda a: T.sum_(a, axis=1).sum(), [_x(rng, 3, 4)]))
_register("mean", lambda rng: (lambda a: T.mean(a, axis=0).sum(), [_x(rng, 3, 4)]))
_register("reshape", lambda rng: (lambda a: (T.reshape(a, (6, 2)) ** 2).sum(), [_x(rng, 3, 4)]))
_register(
    "transpose",
    lambda rng: (lambda a: (T.transpose(a, (1, 0, 2)) ** 2).sum(), [_x(rng, 2, 3, 4)]),
)
_register(
    "concat",
    lambda rng: (lambda a, b: (T.concat([a, b], axis=1) ** 2).sum(), [_x(rng, 2, 3), _x(rng, 2, 2)]),
)
_register(
    "narrow",
    lambda rng: (lambda a: (T.narrow(a, 1, 1, 2) ** 2).sum(), [_x(rng, 3, 4)]),
)
_register(
    "take",
    lambda rng: (lambda a: (T.take(a, np.array([0, 2, 2]), axis=0) ** 2).sum(), [_x(rng, 4, 3)]),
)
_register(
    "gather",
    lambda rng: (
        (lambda idx: lambda a: (T.gather(a, idx, axis=-1) ** 2).sum())(
            rng.integers(0, 4, size=(3, 2))
        ),
        [_x(rng, 3, 4)],
    ),
)
_register("matmul", lambda rng: (lambda a, b: (a @ b).sum(), [_x(rng, 3, 4), _x(rng, 4, 2)]))
_register(
    "softmax",
    lambda rng: (lambda a: (T.softmax(a, axis=-1) ** 2).sum(), [_x(rng, 3, 5)]),
)
_register(
    "log_softmax",
    lambda rng: (lambda a: (T.log_softmax(a, axis=-1) ** 2).sum(), [_x(rng, 3, 5)]),
)
_register(
    "conv2d",
    lambda rng: (
        lambda x, w, b: (T.conv2d(x, w, b, stride=2, padding=1) ** 2).sum(),
        [_x(rng, 2, 3, 5, 5), _x(rng, 4, 3, 3, 3), _x(rng, 4)],
    ),
)
_register(
    "max_pool2d",
    lambda rng: (lambda x: (T.max_pool2d(x, 2) ** 2).sum(), [_x(rng, 1, 2, 4, 4)]),
    lambda inputs: _pool_tie_free(inputs[0].data, 2),
)
_register(
    "avg_pool2d",
    lambda rng: (lambda x: (T.avg_pool2d(x, 2) ** 2).sum(), [_x(rng, 1, 2, 4, 4)]),
)
_register(
    "upsample2x",
    lambda rng: (lambda x: (T.upsample2x(x) ** 2).sum(), [_x(rng, 1, 2, 3, 3)]),
)
_register(
    "channel_shuffle",
    lambda rng: (lambda x: (T.channel_shuffle(x, 2) ** 2).sum(), [_x(rng, 1, 6, 2, 2)]),
)


def _pool_tie_free(x: np.ndarray, k: int) -> bool:
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // k, w // k, k * k
    )
    srt = np.sort(win, axis=-1)
    return bool(np.all(srt[..., -1] - srt[..., -2] > 1e-2))


def registered_ops() -> list[str]:
    return sorted(_FIXTURES)


@dataclass
class GradCheckReport:
    epsilon: float
    seeds: int
    max_rel_err: dict[str, float] = field(default_factory=dict)
    resampled: dict[str, int] = field(default_factory=dict)

    def worst(self) -> float:
        return max(self.max_rel_err.values())

    def __str__(self) -> str:
        lines = [f"gradient check (eps={self.epsilon}, {self.seeds} seeds)"]
        for op in sorted(self.max_rel_err):
            note = f"  [resampled {self.resampled[op]}x]" if self.resampled.get(op) else ""
            lines.append(f"  {op:16s} max rel err {self.max_rel_err[op]:.3e}{note}")
        return "\n".join(lines)


def check_gradients(epsilon: float = 1e-3, seeds: int = 20, ops=None) -> GradCheckReport:
    """Run every op fixture over ``seeds`` random draws; report worst error."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    report = GradCheckReport(epsilon=epsilon, seeds=seeds)
    names = ops if ops is not None else registered_ops()
    for name in names:
        build, kink_check = _FIXTURES[name]
        worst = 0.0
        resampled = 0
        for seed in range(seeds):
            rng = np.random.default_rng((hash(name) & 0xFFFF, seed))
            fn, inputs = build(rng)
            while kink_check is not None and not kink_check(inputs):
                resampled += 1
                fn, inputs = build(rng)
            worst = max(worst, gradcheck(fn, inputs, epsilon))
        report.max_rel_err[name] = worst
        report.resampled[name] = resampled
    return report
