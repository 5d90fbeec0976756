"""Central finite-difference checks of the analytic gradients.

Every check builds a small float64 graph, reduces it to a scalar through
a fixed random projection and compares the autodiff gradient of each input
against ``(f(x+h) - f(x-h)) / 2h``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise relative error.

    The denominator is floored at 1e-3 of the largest gradient magnitude so
    entries that are zero up to round-off do not dominate.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    step: float = STEP,
) -> float:
    """Return the worst relative error over all inputs of ``fn``.

    ``fn`` maps Tensors to a Tensor; the output is contracted with a random
    weight so that every output element contributes.
    """
    for arr in inputs:
        if arr.dtype != np.float64:
            raise TypeError("gradient checks run in float64 only")
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(arrays):
        nonlocal probe
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return (out * Tensor(probe)).sum(), ts

    loss, ts = scalar([a.copy() for a in inputs])
    loss.backward()
    worst = 0.0
    for i, arr in enumerate(inputs):
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = numeric.reshape(-1)
        for j in range(arr.size):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            with T.no_grad():
                fp = scalar(plus)[0].item()
                fm = scalar(minus)[0].item()
            flat[j] = (fp - fm) / (2 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class GradcheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _rand(rng, *shape, lo=None):
    a = rng.standard_normal(shape)
    if lo is not None:
        # keep values away from kinks
        a = np.sign(a) * (np.abs(a) + lo)
    return a


def _op_checks() -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(1234)
    checks: dict[str, Callable[[], float]] = {}

    x = _rand(rng, 2, 2, 5, 5, 5)
    w = _rand(rng, 3, 2, 3, 3, 3) * 0.3
    b = _rand(rng, 3)
    checks["conv3d"] = lambda: check_gradients(lambda x, w, b: T.conv3d(x, w, b, 1, 1), [x, w, b])
    checks["conv3d_stride2"] = lambda: check_gradients(
        lambda x, w: T.conv3d(x, w, None, 2, 1), [_rand(rng, 1, 2, 6, 6, 6), w]
    )
    checks["conv3d_1x1"] = lambda: check_gradients(
        lambda x, w, b: T.conv3d(x, w, b), [x, _rand(rng, 3, 2, 1, 1, 1), b]
    )
    checks["upsample"] = lambda: check_gradients(T.upsample, [_rand(rng, 1, 2, 3, 4, 2)])
    checks["avg_pool"] = lambda: check_gradients(T.avg_pool2x, [_rand(rng, 1, 2, 4, 4, 2)])
    checks["instance_norm"] = lambda: check_gradients(
        T.instance_norm, [_rand(rng, 2, 3, 3, 3, 3), 1 + 0.2 * _rand(rng, 3), _rand(rng, 3)]
    )
    checks["group_norm"] = lambda: check_gradients(
        lambda x, g, b: T.group_norm(x, 2, g, b), [_rand(rng, 2, 4, 3, 3, 2), 1 + 0.2 * _rand(rng, 4), _rand(rng, 4)]
    )
    checks["relu"] = lambda: check_gradients(T.relu, [_rand(rng, 3, 4, lo=0.01)])
    checks["leaky_relu"] = lambda: check_gradients(lambda x: T.leaky_relu(x, 1e-2), [_rand(rng, 3, 4, lo=0.01)])
    checks["sigmoid"] = lambda: check_gradients(T.sigmoid, [_rand(rng, 3, 4) * 3])
    a = _rand(rng, 3, 4)
    checks["elementwise_max"] = lambda: check_gradients(
        T.elementwise_max, [a, a + np.sign(_rand(rng, 3, 4)) * (0.05 + rng.random((3, 4)))]
    )
    checks["add"] = lambda: check_gradients(lambda p, q: p + q, [_rand(rng, 2, 3), _rand(rng, 2, 3)])
    checks["mul_div"] = lambda: check_gradients(
        lambda p, q: p * q / (q * q + 1.0), [_rand(rng, 2, 3), _rand(rng, 2, 3)]
    )
    checks["log"] = lambda: check_gradients(T.log, [0.5 + rng.random((2, 3))])
    checks["concat"] = lambda: check_gradients(
        lambda p, q: T.concat([p, q], axis=1), [_rand(rng, 1, 2, 2, 2, 2), _rand(rng, 1, 3, 2, 2, 2)]
    )
    checks["sum_axis"] = lambda: check_gradients(lambda p: p.sum(axis=(0, 2)), [_rand(rng, 2, 3, 4)])
    checks["index"] = lambda: check_gradients(lambda p: p[:, 1:3], [_rand(rng, 2, 4, 3)])
    return checks


def check_module_gradients(fn: Callable[[Tensor], Tensor], params: Sequence[Tensor], x: np.ndarray,
                           seed: int = 0, step: float = STEP) -> float:
    """Like :func:`check_gradients` for a parameterized callable.

    Parameters are perturbed in place; ``fn`` closes over them.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks run in float64 only")
    probe = None
    rng = np.random.default_rng(seed)

    def scalar(arr):
        nonlocal probe
        xt = Tensor(arr, requires_grad=True)
        out = fn(xt)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return (out * Tensor(probe)).sum(), xt

    for p in params:
        p.grad = None
    loss, xt = scalar(x.copy())
    loss.backward()
    targets = [(x, xt.grad)] + [(p.data, p.grad) for p in params]
    worst = 0.0
    for arr, analytic in targets:
        analytic = analytic if analytic is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(arr.size):
            orig = flat[j]
            with T.no_grad():
                flat[j] = orig + step
                fp = scalar(x)[0].item()
                flat[j] = orig - step
                fm = scalar(x)[0].item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _block_checks() -> dict[str, Callable[[], float]]:
    from . import losses, nn

    checks: dict[str, Callable[[], float]] = {}

    def module_check(make, x_shape, seed):
        def run():
            rng = np.random.default_rng(seed)
            module = make(rng)
            x = rng.standard_normal(x_shape)
            return check_module_gradients(module, module.parameters(), x, seed=seed)

        return run

    f64 = np.float64
    checks["unet_block"] = module_check(
        lambda rng: nn.UNetLevel(2, 4, "instance", ("leaky_relu", 1e-2), 2, rng, f64), (1, 2, 4, 4, 4), 11
    )
    checks["res_unet_block"] = module_check(
        lambda rng: nn.ResidualBlock(4, ("group", 2), ("relu",), rng, f64), (1, 4, 3, 3, 3), 12
    )
    checks["cascade_fusion_block"] = module_check(
        lambda rng: nn.FusedEncoderLevel(4, 1, 2, rng, f64), (1, 4, 3, 3, 3), 13
    )

    def loss_check():
        rng = np.random.default_rng(14)
        targets = (rng.random((1, 3, 4, 4, 4)) > 0.5).astype(f64)
        return check_gradients(
            lambda z: losses.combined_loss(T.sigmoid(z), targets).total,
            [rng.standard_normal((1, 3, 4, 4, 4))],
        )

    checks["combined_loss"] = loss_check
    return checks


def gradcheck_suite() -> dict[str, Callable[[], float]]:
    return {**_op_checks(), **_block_checks()}


def run_suite(names: Sequence[str] | None = None) -> list[GradcheckResult]:
    suite = gradcheck_suite()
    results = []
    for name, check in suite.items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        err = check()
        results.append(GradcheckResult(name, err, time.perf_counter() - t0))
    return results
