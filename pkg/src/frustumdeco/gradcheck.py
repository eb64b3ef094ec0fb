"""Central finite-difference checks for the autodiff primitives and the full loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .frustum import FrustumBatch
from .seen_net import SeenConfig, SeenModel

H = 1e-5
TOLERANCE = 1e-4
# Denominator floor so that gradients which are exactly zero compare against
# finite-difference round-off (~1e-11) instead of dividing by zero.
FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), FLOOR))


def numeric_grad(f: Callable[[], float], x: np.ndarray, coords=None, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (perturbed in place)."""
    coords = list(np.ndindex(x.shape)) if coords is None else coords
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = x[c]
        x[c] = orig + h
        fp = f()
        x[c] = orig - h
        fm = f()
        x[c] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def _primitive_case(name: str, rng: np.random.Generator):
    """Inputs and a graph builder for one primitive."""
    r = rng.integers(3, 7)
    c = rng.integers(2, 5)
    if name == "matmul":
        k = rng.integers(2, 6)
        xs = [rng.normal(size=(r, k)), rng.normal(size=(k, c))]
        return xs, lambda a, b: ad.matmul(a, b), None
    if name == "add_bias":
        xs = [rng.normal(size=(r, c)), rng.normal(size=(1, c))]
        return xs, lambda a, b: ad.add_bias(a, b), None
    if name == "add":
        xs = [rng.normal(size=(r, c)), rng.normal(size=(r, c))]
        return xs, lambda a, b: ad.add(a, b), None
    if name == "relu":
        return [rng.normal(size=(r, c))], lambda a: ad.relu(a), None
    if name == "segment_max":
        m = int(rng.integers(2, 6))
        return [rng.normal(size=(r * m, c))], lambda a: ad.segment_max(a, m), None
    if name == "repeat_rows":
        m = int(rng.integers(2, 6))
        return [rng.normal(size=(r, c))], lambda a: ad.repeat_rows(a, m), None
    if name == "concat":
        xs = [rng.normal(size=(r, int(rng.integers(1, 4)))) for _ in range(3)]
        return xs, lambda *ps: ad.concat(ps), None
    if name == "softmax_cross_entropy":
        k = int(rng.integers(2, 5))
        labels = rng.integers(0, k, size=r)
        return [rng.normal(size=(r, k))], lambda a: ad.softmax_cross_entropy(a, labels), None
    raise KeyError(name)


def check_primitive(name: str, rng: np.random.Generator) -> float:
    """Relative error of the analytic vs numeric gradient of ``sum(op(x) * W)``."""
    xs, build, _ = _primitive_case(name, rng)
    leaves = [ad.Var(x) for x in xs]
    out = build(*leaves)
    weight = rng.normal(size=out.shape)
    out.backward(seed=weight)

    def f():
        return float((build(*[ad.Var(x) for x in xs]).value * weight).sum())

    worst = 0.0
    for x, leaf in zip(xs, leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        worst = max(worst, rel_error(analytic.ravel(), numeric_grad(f, x)))
    return worst


def make_check_batch(rng: np.random.Generator, B: int = 2, m: int = 8, d_in: int = 4, n_cls: int = 3) -> FrustumBatch:
    pts = np.zeros((B, m, d_in + 3), dtype=np.float32)
    pts[:, :, :3] = rng.normal(0.0, 8.0, size=(B, m, 3))
    pts[:, :, 3:d_in] = rng.uniform(0.0, 1.0, size=(B, m, d_in - 3))
    pts[:, :, d_in] = rng.integers(0, 2, size=(B, m))
    cls = rng.integers(0, n_cls, size=B)
    pts[:, :, d_in + 1] = cls[:, None]
    pts[:, :, d_in + 2] = np.arange(B)[:, None]
    one_hot = np.eye(n_cls, dtype=np.float32)[cls]
    return FrustumBatch(pts, one_hot, np.arange(B), np.full(B, m))


def near_kink(f: Callable[[], float], x: np.ndarray, c, h: float = H) -> bool:
    """True when a non-differentiable point (ReLU or max switch) lies within ``h``.

    Central differences at ``h`` and ``h / 10`` agree to O(h^2) on smooth
    stretches; a kink inside the stencil makes them disagree at O(1) relative.
    """
    coarse, fine = numeric_grad(f, x, [c], h)[0], numeric_grad(f, x, [c], h / 10)[0]
    return abs(coarse - fine) > 1e-8 + 1e-6 * abs(coarse)


def check_model_loss(rng: np.random.Generator, variant: str = "D", coords_per_tensor: int = 4,
                     B: int = 2, m: int = 8, stats: dict | None = None) -> dict[str, float]:
    """Per-tensor relative error for the summed seg + auxiliary loss on a random model.

    Coordinates whose finite-difference stencil straddles a kink are redrawn;
    ``stats`` (if given) accumulates ``checked`` and ``skipped`` counts.
    """
    cfg = SeenConfig(variant=variant)
    model = SeenModel(cfg, {k: v + rng.normal(0, 0.05, size=v.shape)
                            for k, v in SeenModel.init(cfg, seed=int(rng.integers(1 << 31))).params.items()})
    batch = make_check_batch(rng, B, m, cfg.d_in, cfg.n_cls)
    P = model.leaves()
    total, _ = model.loss(batch, P)
    total.backward()

    def f():
        return float(model.loss(batch)[0].value[0, 0])

    stats = {} if stats is None else stats
    errors = {}
    for name, arr in model.params.items():
        coords = []
        for i in rng.permutation(arr.size):
            c = np.unravel_index(i, arr.shape)
            if near_kink(f, arr, c):
                stats["skipped"] = stats.get("skipped", 0) + 1
                continue
            coords.append(c)
            if len(coords) == min(coords_per_tensor, arr.size):
                break
        stats["checked"] = stats.get("checked", 0) + len(coords)
        analytic = np.array([P[name].grad[c] for c in coords])
        errors[name] = rel_error(analytic, numeric_grad(f, arr, coords))
    return errors
