"""
Hybrid convolution/Transformer hyperspectral patch classifier.

Pipeline for one batch of ``[B, d, s, s]`` patches:

1. spectral-spatial front end: 3-D conv -> BN -> ReLU, fold filters and
   spectral depth into channels, 2-D conv -> BN -> ReLU;
2. two parallel branches over the resulting ``[B, z, s, s]`` map:
   a pre-norm Transformer encoder over the ``s*s`` pixel tokens and a
   small residual CNN, each pooled to ``[B, z]``;
3. three linear heads (Transformer, CNN, concatenated fusion) whose
   cross-entropies are summed during training.

Ablation cases 1-5 switch the CNN branch, the two front-end stages and
the multi-head loss on and off.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .tensor import RunningStats, ShapeError, Tensor

HEADS = ("transformer", "cnn", "fused")


@dataclass(frozen=True)
class AblationFlags:
    cnn_branch: bool
    conv3d: bool
    conv2d: bool
    multi_output: bool


_ABLATION = {
    1: AblationFlags(False, False, False, False),
    2: AblationFlags(True, False, False, False),
    3: AblationFlags(True, True, False, False),
    4: AblationFlags(True, True, True, False),
    5: AblationFlags(True, True, True, True),
}


def ablation_config(case: int) -> AblationFlags:
    """Which modules ablation ``case`` (1..5) enables.

    1: Transformer on a per-pixel projection of the raw spectra.
    2: + CNN branch and fused head.  3: + 3-D conv stage.
    4: + 2-D conv stage (full front end), loss on the fused head only.
    5: full model, loss summed over all three heads.
    """
    if case not in _ABLATION:
        raise ValueError(f"ablation case must be 1..5, got {case}")
    return _ABLATION[case]


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    classes: int
    patch_size: int = 13
    ssfe_3d_filters: int = 8
    ssfe_3d_kernel: tuple = (7, 3, 3)
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 1
    mlp_hidden: int = 128
    ablation_case: int = 5
    zero_init_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ssfe_3d_kernel", tuple(int(k) for k in self.ssfe_3d_kernel))
        s = self.patch_size
        if s < 3 or s % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {s}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.bands < 1 or self.classes < 1:
            raise ValueError("bands and classes must be positive")
        if len(self.ssfe_3d_kernel) != 3 or any(k % 2 == 0 for k in self.ssfe_3d_kernel[1:]):
            raise ValueError("3-D kernel must be (spectral, odd h, odd w)")
        if self.encoder_layers < 1 or self.mlp_hidden < 1 or self.ssfe_3d_filters < 1:
            raise ValueError("layer counts and widths must be positive")
        flags = ablation_config(self.ablation_case)
        if flags.conv3d and self.bands < self.ssfe_3d_kernel[0]:
            raise ValueError(
                f"{self.bands} bands cannot feed a spectral kernel of {self.ssfe_3d_kernel[0]}"
            )

    @property
    def flags(self) -> AblationFlags:
        return ablation_config(self.ablation_case)

    @property
    def tokens(self) -> int:
        return self.patch_size**2

    @property
    def feature_channels(self) -> int:
        """Channels of the map handed to the two branches."""
        f = self.flags
        if f.conv2d:
            return self.embed_dim
        if f.conv3d:
            return self.ssfe_3d_filters * (self.bands - self.ssfe_3d_kernel[0] + 1)
        return self.bands

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = "x".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name == "ssfe_3d_kernel":
                kw[f.name] = tuple(int(k) for k in raw.split("x"))
            elif f.name == "zero_init_heads":
                kw[f.name] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class ModelOutput:
    logits_transformer: Tensor | None = None
    logits_cnn: Tensor | None = None
    logits_fused: Tensor | None = None
    supervised: tuple = ()

    def head(self, name: str) -> Tensor | None:
        return getattr(self, f"logits_{name}")

    def present(self) -> tuple:
        return tuple(h for h in HEADS if self.head(h) is not None)


class CMTNet:
    """Parameters, batch-norm running statistics and configuration of one model."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}
        self._build(np.random.default_rng(seed))

    # -- construction
    def _add(self, name, arr, trainable=True):
        self.params[name] = Tensor(arr, requires_grad=trainable, name=name)

    def _conv(self, rng, name, c_out, c_in, kernel):
        fan_in = c_in * int(np.prod(kernel))
        bound = math.sqrt(6.0 / fan_in)
        self._add(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in) + tuple(kernel)))
        self._add(f"{name}.bias", np.zeros(c_out))

    def _linear(self, rng, name, c_out, c_in, zero=False, trainable=True):
        bound = math.sqrt(6.0 / c_in)
        w = np.zeros((c_out, c_in)) if zero else rng.uniform(-bound, bound, (c_out, c_in))
        self._add(f"{name}.weight", w, trainable)
        self._add(f"{name}.bias", np.zeros(c_out), trainable)

    def _norm(self, name, c, running=True):
        self._add(f"{name}.gamma", np.ones(c))
        self._add(f"{name}.beta", np.zeros(c))
        if running:
            self.stats[name] = RunningStats.fresh(c)

    def _build(self, rng):
        cfg = self.config
        flags = cfg.flags
        z = cfg.embed_dim
        if flags.conv3d:
            k = cfg.ssfe_3d_kernel
            self._conv(rng, "ssfe.conv3d", cfg.ssfe_3d_filters, 1, k)
            self._norm("ssfe.bn3d", cfg.ssfe_3d_filters)
        if flags.conv2d:
            folded = cfg.ssfe_3d_filters * (cfg.bands - cfg.ssfe_3d_kernel[0] + 1)
            self._conv(rng, "ssfe.conv2d", z, folded, (3, 3))
            self._norm("ssfe.bn2d", z)
        c_feat = cfg.feature_channels

        self._linear(rng, "embed.proj", z, c_feat)
        self._add("embed.pos", rng.normal(0.0, 0.02, (cfg.tokens, z)))
        for i in range(cfg.encoder_layers):
            p = f"encoder.{i}"
            self._norm(f"{p}.ln1", z, running=False)
            for part in ("q", "k", "v", "o"):
                self._linear(rng, f"{p}.attn.{part}", z, z)
            self._norm(f"{p}.ln2", z, running=False)
            self._linear(rng, f"{p}.mlp.fc1", cfg.mlp_hidden, z)
            self._linear(rng, f"{p}.mlp.fc2", z, cfg.mlp_hidden)

        if flags.cnn_branch:
            self._conv(rng, "cnn.conv1", z, c_feat, (3, 3))
            self._norm("cnn.bn1", z)
            self._conv(rng, "cnn.conv2", z, z, (1, 1))
            self._norm("cnn.bn2", z)
            self._conv(rng, "cnn.conv3", z, z, (1, 1))
            if c_feat != z:
                self._conv(rng, "cnn.shortcut", z, c_feat, (1, 1))

        # without the multi-output loss the branch heads only report
        zero = cfg.zero_init_heads
        aux = flags.multi_output or not flags.cnn_branch
        self._linear(rng, "head.transformer", cfg.classes, z, zero, trainable=aux)
        if flags.cnn_branch:
            self._linear(rng, "head.cnn", cfg.classes, z, zero, trainable=aux)
            self._linear(rng, "head.fused", cfg.classes, 2 * z, zero)

    # -- convenience
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, patches, mode: str = "train") -> ModelOutput:
        return forward(patches, self, mode)

    __call__ = forward


# ---------------------------------------------------------------- stages


def _bn(x, model, name, mode):
    return T.batchnorm(
        x, model[f"{name}.gamma"], model[f"{name}.beta"], model.stats[name], mode=mode
    )


def ssfe_forward(patch: Tensor, model: CMTNet, mode: str = "train") -> Tensor:
    """Spectral-spatial front end: ``[B, d, s, s]`` -> ``[B, C, s, s]``.

    ``C`` is ``embed_dim`` when the 2-D stage is enabled, the folded 3-D
    channel count when only the 3-D stage is, and ``d`` otherwise.
    """
    cfg = model.config
    flags = cfg.flags
    B, d, s, s2 = patch.shape
    if d != cfg.bands or s != cfg.patch_size or s2 != s:
        raise ShapeError(f"patch {patch.shape} does not match bands={cfg.bands}, s={cfg.patch_size}")
    x = patch
    if flags.conv3d:
        if d < cfg.ssfe_3d_kernel[0]:
            raise ShapeError(f"{d} bands < spectral kernel {cfg.ssfe_3d_kernel[0]}")
        _, kh, kw = cfg.ssfe_3d_kernel
        x = T.reshape(x, (B, 1, d, s, s))
        x = T.conv3d(x, model["ssfe.conv3d.weight"], model["ssfe.conv3d.bias"], (0, kh // 2, kw // 2))
        x = T.relu(_bn(x, model, "ssfe.bn3d", mode))
        x = T.reshape(x, (B, x.shape[1] * x.shape[2], s, s))
    if flags.conv2d:
        x = T.conv2d(x, model["ssfe.conv2d.weight"], model["ssfe.conv2d.bias"], (1, 1))
        x = T.relu(_bn(x, model, "ssfe.bn2d", mode))
    return x


def tokenize(fmap: Tensor, model: CMTNet) -> Tensor:
    """Row-major pixel tokens, linearly projected, plus learned positions."""
    B, C, s, _ = fmap.shape
    if s * s != model["embed.pos"].shape[0]:
        raise ShapeError(f"{s}x{s} map vs {model['embed.pos'].shape[0]} positions")
    x = T.transpose(T.reshape(fmap, (B, C, s * s)), (0, 2, 1))
    x = T.linear(x, model["embed.proj.weight"], model["embed.proj.bias"])
    return T.add(x, model["embed.pos"])


def mhsa(tokens: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``[B, N, z]`` tokens."""
    B, N, z = tokens.shape
    if z % heads:
        raise ShapeError(f"width {z} not divisible by {heads} heads")
    dk = z // heads

    def split(t):
        return T.transpose(T.reshape(t, (B, N, heads, dk)), (0, 2, 1, 3))

    q = split(T.linear(tokens, wq, bq))
    k = split(T.linear(tokens, wk, bk))
    v = split(T.linear(tokens, wv, bv))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    att = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, N, z))
    return T.linear(ctx, wo, bo)


def mhsa_forward(tokens: Tensor, model: CMTNet, layer: int = 0) -> Tensor:
    p = f"encoder.{layer}.attn"
    w = [model[f"{p}.{part}.{kind}"] for part in "qkvo" for kind in ("weight", "bias")]
    return mhsa(tokens, *w, heads=model.config.heads)


def transformer_branch(tokens: Tensor, model: CMTNet, mode: str = "train") -> Tensor:
    """Pre-norm encoder layers, then the mean over tokens: ``[B, N, z]`` -> ``[B, z]``."""
    x = tokens
    for i in range(model.config.encoder_layers):
        p = f"encoder.{i}"
        h = T.layernorm(x, model[f"{p}.ln1.gamma"], model[f"{p}.ln1.beta"])
        x = T.add(x, mhsa_forward(h, model, i))
        h = T.layernorm(x, model[f"{p}.ln2.gamma"], model[f"{p}.ln2.beta"])
        h = T.relu(T.linear(h, model[f"{p}.mlp.fc1.weight"], model[f"{p}.mlp.fc1.bias"]))
        x = T.add(x, T.linear(h, model[f"{p}.mlp.fc2.weight"], model[f"{p}.mlp.fc2.bias"]))
    return T.mean(x, axis=1)


def cnn_branch(fmap: Tensor, model: CMTNet, mode: str = "train") -> Tensor:
    """3x3 conv/BN/ReLU, 1x1 conv/BN/ReLU, 1x1 conv, residual add, ReLU, global mean."""
    x = T.conv2d(fmap, model["cnn.conv1.weight"], model["cnn.conv1.bias"], (1, 1))
    x = T.relu(_bn(x, model, "cnn.bn1", mode))
    x = T.conv2d(x, model["cnn.conv2.weight"], model["cnn.conv2.bias"])
    x = T.relu(_bn(x, model, "cnn.bn2", mode))
    x = T.conv2d(x, model["cnn.conv3.weight"], model["cnn.conv3.bias"])
    skip = fmap
    if "cnn.shortcut.weight" in model.params:
        skip = T.conv2d(fmap, model["cnn.shortcut.weight"], model["cnn.shortcut.bias"])
    x = T.relu(T.add(x, skip))
    return T.mean(x, axis=(2, 3))


def forward(patches, model: CMTNet, mode: str = "train") -> ModelOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.ndim != 4:
        raise ShapeError(f"expected a [B, d, s, s] batch, got {x.shape}")
    flags = model.config.flags
    fmap = ssfe_forward(x, model, mode)
    feat_t = transformer_branch(tokenize(fmap, model), model, mode)
    out = ModelOutput()
    out.logits_transformer = T.linear(feat_t, model["head.transformer.weight"], model["head.transformer.bias"])
    if not flags.cnn_branch:
        out.supervised = ("transformer",)
        return out
    feat_c = cnn_branch(fmap, model, mode)
    out.logits_cnn = T.linear(feat_c, model["head.cnn.weight"], model["head.cnn.bias"])
    fused = T.concat([feat_t, feat_c], axis=1)
    out.logits_fused = T.linear(fused, model["head.fused.weight"], model["head.fused.bias"])
    out.supervised = HEADS if flags.multi_output else ("fused",)
    return out


def combined_loss(out: ModelOutput, labels) -> Tensor:
    """Unweighted sum of the cross-entropies of the supervised heads.

    When ``out.supervised`` is empty every present head is supervised.
    """
    heads = out.supervised or out.present()
    if not heads:
        raise ValueError("model output carries no logits")
    total = None
    for h in heads:
        logits = out.head(h)
        if logits is None:
            raise ValueError(f"head {h!r} is supervised but absent")
        ce = T.cross_entropy(logits, labels)
        total = ce if total is None else T.add(total, ce)
    return total


def predict(out: ModelOutput) -> np.ndarray:
    """Argmax class per sample: the fused head if present, else the sole head."""
    logits = out.logits_fused
    if logits is None:
        present = out.present()
        if not present:
            raise ValueError("model output carries no logits")
        logits = out.head(present[0])
    return np.argmax(logits.data, axis=1)  # first maximum wins ties


def with_case(config: ModelConfig, case: int) -> ModelConfig:
    return replace(config, ablation_case=case)
