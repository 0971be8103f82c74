"""Flat run configuration: model + training + paths, as typed ``key = value`` text."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .kvtext import dump_kv, parse_kv
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    data: str = ""
    out: str = "runs/default"
    checkpoint: str = ""
    # model
    patch_size: int = 13
    ssfe_3d_filters: int = 8
    ssfe_3d_kernel: str = "7x3x3"
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 1
    mlp_hidden: int = 128
    case: int = 5
    zero_init_heads: bool = False
    # training
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    repeats: int = 10
    train_fraction: float = 0.005
    # evaluation
    eval_batch: int = 100
    normalize: bool = True

    def model_config(self, bands: int, classes: int, **overrides) -> ModelConfig:
        kw = dict(
            bands=bands,
            classes=classes,
            patch_size=self.patch_size,
            ssfe_3d_filters=self.ssfe_3d_filters,
            ssfe_3d_kernel=tuple(int(k) for k in self.ssfe_3d_kernel.split("x")),
            embed_dim=self.embed_dim,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            mlp_hidden=self.mlp_hidden,
            ablation_case=self.case,
            zero_init_heads=self.zero_init_heads,
        )
        kw.update(overrides)
        return ModelConfig(**kw)

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            repeats=self.repeats,
            ablation_case=self.case,
            train_fraction=self.train_fraction,
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def dumps(self) -> str:
        return dump_kv({k: _format(v) for k, v in asdict(self).items()})

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls().updated(parse_kv(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def updated(self, values: dict[str, str]) -> "RunConfig":
        """Copy with string-valued overrides applied and type-checked."""
        types = {f.name: f.type for f in fields(self)}
        current = asdict(self)
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            current[key] = _coerce(key, raw, types[key])
        new = RunConfig(**current)
        new.validate()
        return new

    def validate(self) -> None:
        try:
            self.model_config(bands=max(8, self.ssfe_3d_kernel_depth() + 1), classes=2)
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.eval_batch < 1:
            raise ConfigError("eval_batch must be >= 1")

    def ssfe_3d_kernel_depth(self) -> int:
        try:
            return int(self.ssfe_3d_kernel.split("x")[0])
        except ValueError as exc:
            raise ConfigError(f"bad ssfe_3d_kernel {self.ssfe_3d_kernel!r}") from exc


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw, typ: str):
    if not isinstance(raw, str):
        raw = _format(raw)
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
