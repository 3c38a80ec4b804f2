"""Finite-difference verification of every differentiable primitive and of
the composite training loss on a reduced-width model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .model import LossWeights, ModelConfig, UdtModel, compute_loss
from .tensor import SeededRng, Tensor, grad_check, l2_sq, mse

__all__ = ["GradCheckResult", "run_grad_checks", "THRESHOLDS"]

THRESHOLDS = {"double": 1e-6, "single": 1e-3}


@dataclass
class GradCheckResult:
    precision: str
    threshold: float
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.threshold for e in self.errors.values())


def _projector(rng, shape, dtype):
    """Random fixed weights turning a tensor-valued map into a scalar one."""
    r = Tensor(rng.standard_normal(shape).astype(dtype))
    return lambda y: (y * r).sum()


def _swap(obj, attr):
    """f(t) evaluator that temporarily replaces ``obj.attr`` with ``t``."""
    def run(fn):
        def f(t):
            old = getattr(obj, attr)
            setattr(obj, attr, t)
            try:
                return fn()
            finally:
                setattr(obj, attr, old)
        return f
    return run


def _coords(rng, size, n):
    return range(size) if size <= n else rng.choice(size, n, replace=False)


def layer_checks(dtype, rng, eps, tamper=False) -> dict[str, float]:
    B, C, O, T, K = 2, 3, 4, 7, 5
    dt = np.dtype(dtype).type
    mk = lambda *s: Tensor(rng.standard_normal(s).astype(dt))  # noqa: E731
    x, w, b = mk(B, C, T), mk(O, C, K), mk(O)
    y, wt, bt = mk(B, O, T), mk(O, C, K), mk(C)
    gamma, beta = Tensor((1 + 0.5 * rng.standard_normal(C)).astype(dt)), mk(C)
    rm, rv = rng.standard_normal(C).astype(dt), rng.uniform(0.5, 2.0, C).astype(dt)
    p_out = _projector(rng, (B, O, T), dt)
    p_in = _projector(rng, (B, C, T), dt)
    mask = ((rng.random((B, C, T)) >= 0.3) / 0.7).astype(dt)
    target = mk(B, C, T)

    def soft(t):
        out = L.softplus(t)
        if tamper:
            # negative control: corrupt the recorded gradient rule
            bw = out._backward
            out._backward = lambda g: tuple(1.1 * v for v in bw(g))
        return p_in(out)

    checks = {
        "softplus": (soft, x),
        "conv1d.input": (lambda t: p_out(L.conv1d(t, w, b, 2)), x),
        "conv1d.weight": (lambda t: p_out(L.conv1d(x, t, b, 2)), w),
        "conv1d.bias": (lambda t: p_out(L.conv1d(x, w, t, 2)), b),
        "tconv1d.input": (lambda t: p_in(L.conv_transpose1d(t, wt, bt, 2)), y),
        "tconv1d.weight": (lambda t: p_in(L.conv_transpose1d(y, t, bt, 2)), wt),
        "tconv1d.bias": (lambda t: p_in(L.conv_transpose1d(y, wt, t, 2)), bt),
        "batchnorm.train.input": (lambda t: p_in(L.batch_norm(t, gamma, beta)[0]), x),
        "batchnorm.train.gamma": (lambda t: p_in(L.batch_norm(x, t, beta)[0]), gamma),
        "batchnorm.train.beta": (lambda t: p_in(L.batch_norm(x, gamma, t)[0]), beta),
        "batchnorm.infer.input": (lambda t: p_in(L.batch_norm(t, gamma, beta, rm, rv, False)[0]), x),
        "batchnorm.infer.gamma": (lambda t: p_in(L.batch_norm(x, t, beta, rm, rv, False)[0]), gamma),
        "dropout.fixed_mask": (lambda t: p_in(L.dropout(t, 0.3, None, True, mask)), x),
        "mse": (lambda t: mse(t, target), x),
        "l2_sq": (lambda t: l2_sq(t), x),
    }
    return {name: grad_check(f, t, eps, richardson=True) for name, (f, t) in checks.items()}


def composite_checks(dtype, rng, eps=1e-3, n_coords=6, seed=11) -> dict[str, float]:
    """Composite loss on a 64-channel / 64-bin model, T=16, batch 2.

    Training mode (batch statistics, dropout, latent noise); masks and noise
    are reproduced on every evaluation by re-seeding the loss rng. Uses
    Richardson-extrapolated differences: the loss is O(10) while some bias
    gradients are O(1e-5), so a plain central difference cannot resolve them
    to 1e-6 at any step size.
    """
    cfg = ModelConfig(n_bins=64, width=64, dtype=np.dtype(dtype).name)
    model = UdtModel(cfg, seed=seed).train()
    dt = cfg.np_dtype
    M = rng.uniform(0.0, 1.5, (2, 64, 16)).astype(dt)
    C = rng.uniform(0.0, 1.5, (2, 64, 16)).astype(dt)
    weights = LossWeights(1.0, 1.0, 1e-3)

    def loss():
        return compute_loss(model, M, C, weights, SeededRng(seed)).total_tensor

    errors = {}
    for bname, block in model.named_blocks().items():
        owners = [(block.conv, "weight"), (block.conv, "bias")]
        if block.bn is not None:
            owners += [(block.bn, "gamma"), (block.bn, "beta")]
        for obj, attr in owners:
            f = _swap(obj, attr)(loss)
            p = getattr(obj, attr)
            name = f"loss.{bname}.{'conv' if obj is block.conv else 'bn'}.{attr}"
            errors[name] = grad_check(f, p, eps, _coords(rng, p.size, n_coords), richardson=True)

    def by_input(which):
        def f(t):
            a, c = (t, Tensor(C)) if which == "M" else (Tensor(M), t)
            return compute_loss(model, a, c, weights, SeededRng(seed)).total_tensor
        return f

    for which, arr in (("M", M), ("C", C)):
        errors[f"loss.input.{which}"] = grad_check(by_input(which), Tensor(arr), eps,
                                                   _coords(rng, arr.size, n_coords), richardson=True)
    return errors


def run_grad_checks(precision: str = "double", seed: int = 0, tamper: bool = False) -> GradCheckResult:
    """Run layer and composite checks at the given precision.

    ``precision="double"`` checks float64 kernels; ``"single"`` checks
    float32 kernels (the finite-difference oracle is float64 either way).
    """
    if precision not in THRESHOLDS:
        raise ValueError(f"precision must be one of {sorted(THRESHOLDS)}")
    dtype = np.float64 if precision == "double" else np.float32
    # Richardson-extrapolated differences tolerate a large step, which keeps
    # roundoff well below the double-precision threshold
    eps = 1e-3
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    res = GradCheckResult(precision, THRESHOLDS[precision])
    res.errors.update(layer_checks(dtype, rng, eps, tamper))
    res.errors.update(composite_checks(dtype, rng))
    res.seconds = time.perf_counter() - start
    return res
