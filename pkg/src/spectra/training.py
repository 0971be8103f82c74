"""Adam optimisation loop, training logs and repeated-run averaging."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GroundTruth, HsiCube, SampleSplit, batch_iter, stratified_split
from .model import CMTNet, ModelConfig, combined_loss, predict, with_case
from .tensor import NonFiniteError, Tensor, backward, reset_tape


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    repeats: int = 10
    ablation_case: int = 5
    train_fraction: float = 0.005

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: dict | None = None,
) -> None:
    """One bias-corrected Adam update, in place, visiting names in sorted order.

    ``params`` maps names to :class:`Tensor` (whose ``.grad`` is used)
    or to plain arrays, in which case ``grads`` must supply the
    gradients under the same names.
    """
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name in sorted(params):
        p = params[name]
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def add(self, epoch: int, loss: float, train_acc: float, seconds: float) -> None:
        self.epochs.append(
            {"epoch": epoch, "loss": loss, "train_acc": train_acc, "seconds": seconds}
        )

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.epochs)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.epochs.append(json.loads(line))
        return log


def train(
    model: CMTNet,
    cube: HsiCube,
    gt: GroundTruth,
    split: SampleSplit,
    cfg: TrainConfig,
    progress=None,
) -> TrainLog:
    """Fixed-schedule Adam training; deterministic for a given ``cfg.seed``.

    ``progress``, if given, is called with each finished epoch record.
    """
    params = model.trainable()
    state = AdamState()
    log = TrainLog()
    s = model.config.patch_size
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        batches = batch_iter(split, cube, gt, cfg.batch_size, (cfg.seed, epoch), s)
        for b, (xb, yb) in enumerate(batches):
            model.zero_grad()
            reset_tape()
            try:
                out = model.forward(Tensor(xb), "train")
                loss = combined_loss(out, yb)
                backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
            adam_step(params, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            for name, p in params.items():
                if not np.isfinite(p.data).all():
                    raise TrainingDiverged(f"epoch {epoch + 1}, batch {b}: parameter {name} went non-finite")
            loss_sum += float(loss.data) * len(yb)
            correct += int((predict(out) == yb).sum())
            seen += len(yb)
        log.add(epoch + 1, loss_sum / seen, correct / seen, time.perf_counter() - t0)
        if progress is not None:
            progress(log.epochs[-1])
    return log


def repeat_runs(
    cube: HsiCube,
    gt: GroundTruth,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    k: int | None = None,
    eval_batch: int = 100,
) -> dict:
    """Train and evaluate ``k`` runs with seeds ``cfg.seed + i``.

    The seed drives both the sample split and the initialisation.
    Returns per-run metrics plus the mean and (population) std of OA, AA
    and kappa.
    """
    from .evaluation import evaluate

    k = cfg.repeats if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    model_cfg = with_case(model_cfg, cfg.ablation_case)
    runs = []
    for i in range(k):
        seed = cfg.seed + i
        split = stratified_split(gt, cfg.train_fraction, seed)
        model = CMTNet(model_cfg, seed=seed)
        run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
        train(model, cube, gt, split, run_cfg)
        report, _ = evaluate(model, cube, gt, split, eval_batch)
        runs.append({"seed": seed, "oa": report.oa, "aa": report.aa, "kappa": report.kappa})
    summary = {"runs": runs}
    for key in ("oa", "aa", "kappa"):
        vals = np.array([r[key] for r in runs])
        summary[f"{key}_mean"] = float(vals.mean())
        summary[f"{key}_std"] = float(vals.std())
    return summary
