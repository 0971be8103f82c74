"""Central-difference verification of tape gradients."""

from __future__ import annotations

from contextlib import nullcontext
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward, frozen_relu_patterns, no_grad, reset_tape


class NondeterminismError(RuntimeError):
    pass


def _scalar(f: Callable[[], Tensor], replay) -> float:
    if replay is not None and replay.masks:
        replay.rewind()
    with no_grad():
        return float(f().data)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | Mapping[str, Tensor],
    h: float = 1e-3,
    max_coords: int | None = 8,
    seed: int = 0,
    per_group: bool = False,
    freeze_relu: bool = True,
):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and must read the current values of
    ``params`` (they are perturbed in place and restored). For every
    parameter up to ``max_coords`` coordinates are sampled (all of them
    when ``None``). The error of a coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.

    With ``freeze_relu`` the ReLU on/off patterns of the unperturbed
    evaluation are reused for every perturbed one, so a step that would
    carry a pre-activation across zero does not pollute the difference.

    Returns the overall maximum error, or a ``{name: max error}`` dict
    when ``per_group`` is set.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("step h must lie in (0, 1e-2]")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    with frozen_relu_patterns() if freeze_relu else nullcontext() as replay:
        return _check(f, named, h, max_coords, seed, per_group, replay)


def _check(f, named, h, max_coords, seed, per_group, replay):
    f0 = _scalar(f, replay)
    if _scalar(f, replay) != f0:
        raise NondeterminismError("f returned different values for identical inputs")

    reset_tape()
    for _, p in named:
        p.zero_grad()
    if replay is not None:
        replay.rewind()
    loss = f()
    if loss.ndim != 0:
        raise ValueError("f must return a scalar tensor")
    backward(loss)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in named:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            fp = _scalar(f, replay)
            flat[c] = old - h
            fm = _scalar(f, replay)
            flat[c] = old
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[c]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        errors[name] = worst
    if per_group:
        return errors
    return max(errors.values(), default=0.0)
