"""Model zoo: 1-lead to 12-lead restoration net, conv-attention classifiers, and
the pairwise (feature, teacher-output) discriminator.

Widths per tier are chosen so the realized parameter counts land near the
published sizes (restoration 0.36M/1.43M/5.71M, students 0.26M/1.01M/1.60M,
teacher 50.5M). The layer layout itself is a stand-in.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

N_LEADS = 12

TIER_NAMES = ("micro", "tiny", "small", "base", "teacher")


@dataclass(frozen=True)
class ClassifierTier:
    name: str
    conv_widths: tuple[int, int, int]
    d_model: int
    n_heads: int
    kernel: int = 7
    ff_mult: int = 2
    n_attn_blocks: int = 2
    target_param_count: int | None = None
    strides: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        if len(self.strides) != 3 or min(self.strides) < 1:
            raise ValueError(f"strides must be three positive ints, got {self.strides}")

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.strides))


@dataclass(frozen=True)
class RestorationTier:
    name: str
    base_width: int
    kernel: int = 7
    target_param_count: int | None = None


# C=6 is assumed when quoting realized counts; the head adds (d_model + 1) * C.
CLASSIFIER_TIERS: dict[str, ClassifierTier] = {
    "micro": ClassifierTier("micro", (8, 16, 32), 64, 4, kernel=5, ff_mult=1),
    "tiny": ClassifierTier("tiny", (32, 64, 96), 96, 4, kernel=5, ff_mult=2, target_param_count=260_000),
    "small": ClassifierTier("small", (48, 96, 160), 160, 8, kernel=11, ff_mult=2, target_param_count=1_010_000),
    "base": ClassifierTier("base", (64, 128, 192), 192, 8, kernel=11, ff_mult=2, target_param_count=1_600_000),
    "teacher": ClassifierTier("teacher", (256, 512, 1024), 1024, 16, kernel=13, ff_mult=4, target_param_count=50_500_000),
}

RESTORATION_TIERS: dict[str, RestorationTier] = {
    "micro": RestorationTier("micro", 4, kernel=5),
    "tiny": RestorationTier("tiny", 8, kernel=7, target_param_count=360_000),
    "small": RestorationTier("small", 16, kernel=7, target_param_count=1_430_000),
    "base": RestorationTier("base", 32, kernel=7, target_param_count=5_710_000),
}

TIER_TOLERANCE = 0.15


def param_count(model: nn.Module) -> int:
    """Number of learnable scalars in ``model``, frozen or not (buffers excluded)."""
    return sum(p.numel() for p in model.parameters())


def _conv_bn_relu(c_in: int, c_out: int, kernel: int, stride: int = 1) -> list[nn.Module]:
    return [
        nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=kernel // 2),
        nn.BatchNorm1d(c_out),
        nn.ReLU(inplace=False),
    ]


class DoubleConv(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__(*_conv_bn_relu(c_in, c_out, kernel), *_conv_bn_relu(c_out, c_out, kernel))


class RestorationNet(nn.Module):
    """Four-stage 1-D encoder/decoder with skip concatenation.

    Maps ``[N, 1, L]`` to ``[N, 12, L]``. Inputs whose length is not a multiple
    of 16 are padded symmetrically and cropped back on output. The input lead
    is also routed straight to the output through a 1x1 projection so the
    copy task is trivially representable.
    """

    n_stages = 4

    def __init__(self, tier: RestorationTier, in_leads: int = 1, out_leads: int = N_LEADS):
        super().__init__()
        self.tier = tier
        w, k = tier.base_width, tier.kernel
        widths = [w * 2**i for i in range(self.n_stages + 1)]
        self.inc = DoubleConv(in_leads, widths[0], k)
        self.down = nn.ModuleList(
            DoubleConv(widths[i], widths[i + 1], k) for i in range(self.n_stages)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose1d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(self.n_stages))
        )
        self.dec = nn.ModuleList(
            DoubleConv(2 * widths[i], widths[i], k) for i in reversed(range(self.n_stages))
        )
        self.out = nn.Conv1d(widths[0], out_leads, 1)
        self.bypass = nn.Conv1d(in_leads, out_leads, 1)

    @property
    def downsample_factor(self) -> int:
        return 2**self.n_stages

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[-1]
        factor = self.downsample_factor
        pad = (-length) % factor
        left = pad // 2
        if pad:
            x = F.pad(x, (left, pad - left), mode="replicate")
        skips = [self.inc(x)]
        h = skips[0]
        for down in self.down:
            h = down(F.max_pool1d(h, 2))
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = up(h)
            h = dec(torch.cat([h, skips.pop()], dim=1))
        y = self.out(h) + self.bypass(x)
        if pad:
            y = y[..., left:left + length]
        return y


class AttentionBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        a = self.norm1(h)
        h = h + self.attn(a, a, a, need_weights=False)[0]
        return h + self.ff(self.norm2(h))


class FeatureExtractor(nn.Module):
    """Conv stem (three strided blocks, 64x by default) followed by self-attention and mean pooling."""

    def __init__(self, tier: ClassifierTier, in_leads: int = N_LEADS):
        super().__init__()
        k = tier.kernel
        c1, c2, c3 = tier.conv_widths
        blocks = []
        c_prev = in_leads
        for c, stride in zip((c1, c2, c3), tier.strides):
            blocks.append(nn.Sequential(*_conv_bn_relu(c_prev, c, k, stride=stride), *_conv_bn_relu(c, c, k)))
            c_prev = c
        self.conv = nn.Sequential(*blocks)
        self.proj = nn.Identity() if c3 == tier.d_model else nn.Conv1d(c3, tier.d_model, 1)
        self.attn = nn.Sequential(
            *(AttentionBlock(tier.d_model, tier.n_heads, tier.ff_mult) for _ in range(tier.n_attn_blocks))
        )
        self.out_features = tier.d_model

    @property
    def last_conv_block(self) -> nn.Module:
        return self.conv[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.proj(self.conv(x))
        h = self.attn(h.transpose(1, 2))
        return h.mean(dim=1)


class Classifier(nn.Module):
    """Feature extractor plus linear head; ``forward`` returns ``(features, logits)``."""

    def __init__(self, tier: ClassifierTier, n_classes: int, in_leads: int = N_LEADS):
        super().__init__()
        self.tier = tier
        self.n_classes = n_classes
        self.features = FeatureExtractor(tier, in_leads)
        self.head = nn.Linear(self.features.out_features, n_classes)

    @property
    def feature_dim(self) -> int:
        return self.features.out_features

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.features(x)
        return z, self.head(z)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[1]


class Discriminator(nn.Module):
    """Scores (student feature, teacher output) pairs with a 2-layer MLP."""

    def __init__(self, feature_dim: int, n_classes: int, hidden: int = 128, zero_init: bool = False):
        super().__init__()
        if feature_dim <= 0 or n_classes <= 0:
            raise ValueError("feature_dim and n_classes must be positive")
        self.net = nn.Sequential(
            nn.Linear(feature_dim + n_classes, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, z: torch.Tensor, o: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([z, o], dim=-1)).squeeze(-1)


def build_restoration(tier: str | RestorationTier) -> RestorationNet:
    if isinstance(tier, str):
        if tier not in RESTORATION_TIERS:
            raise ValueError(f"unknown restoration tier {tier!r}; choose from {sorted(RESTORATION_TIERS)}")
        tier = RESTORATION_TIERS[tier]
    return RestorationNet(tier)


def build_classifier(tier: str | ClassifierTier, n_classes: int, in_leads: int = N_LEADS,
                     strides: tuple[int, int, int] | None = None) -> Classifier:
    """``strides`` replaces the tier's stem strides; parameter counts do not depend on them."""
    if isinstance(tier, str):
        if tier not in CLASSIFIER_TIERS:
            raise ValueError(f"unknown classifier tier {tier!r}; choose from {sorted(CLASSIFIER_TIERS)}")
        tier = CLASSIFIER_TIERS[tier]
    if strides is not None:
        tier = replace(tier, strides=tuple(strides))
    if n_classes <= 0:
        raise ValueError("n_classes must be positive")
    return Classifier(tier, n_classes, in_leads)


def build_discriminator(feature_dim: int, n_classes: int, hidden: int = 128, zero_init: bool = False) -> Discriminator:
    return Discriminator(feature_dim, n_classes, hidden=hidden, zero_init=zero_init)


def within_tier_tolerance(count: int, target: int, tol: float = TIER_TOLERANCE) -> bool:
    return abs(count - target) <= tol * target


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "liteheart-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    tier: str
    hparams: dict
    state_dict: dict
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _model_descriptor(model: nn.Module) -> tuple[str, str, dict]:
    if isinstance(model, RestorationNet):
        return "restoration", model.tier.name, asdict(model.tier)
    if isinstance(model, Classifier):
        hp = asdict(model.tier)
        hp["n_classes"] = model.n_classes
        hp["in_leads"] = model.features.conv[0][0].in_channels
        return "classifier", model.tier.name, hp
    if isinstance(model, Discriminator):
        first, last = model.net[0], model.net[-1]
        n_in = first.in_features
        return "discriminator", "-", {"in_features": n_in, "hidden": first.out_features, "out": last.out_features}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> None:
    kind, tier, hparams = _model_descriptor(model)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "tier": tier,
        "hparams": hparams,
        "state_dict": model.state_dict(),
        "rng_state": {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, **overrides) -> tuple[nn.Module, dict]:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`.

    Discriminator checkpoints need ``feature_dim`` and ``n_classes`` only if
    the stored hparams are ambiguous; they are recovered from ``in_features``
    otherwise by the caller.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    kind, hp = payload["kind"], dict(payload["hparams"])
    if kind == "restoration":
        model: nn.Module = RestorationNet(RestorationTier(**hp))
    elif kind == "classifier":
        n_classes = hp.pop("n_classes")
        in_leads = hp.pop("in_leads")
        hp["conv_widths"] = tuple(hp["conv_widths"])
        hp["strides"] = tuple(hp.get("strides", (4, 4, 4)))
        model = Classifier(ClassifierTier(**hp), n_classes, in_leads)
    elif kind == "discriminator":
        n_classes = overrides.get("n_classes")
        if n_classes is None:
            raise ValueError("n_classes is required to rebuild a discriminator")
        model = Discriminator(hp["in_features"] - n_classes, n_classes, hidden=hp["hidden"])
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    model.load_state_dict(payload["state_dict"])
    return model, payload
