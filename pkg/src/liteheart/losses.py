"""Distillation objectives: temperature-scaled sigmoid KD, multi-label BCE with
soft targets, region mixing with shared masks, and the pair-discrimination
loss that lower-bounds feature/teacher-output mutual information."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

N_LEADS = 12


@dataclass
class KDConfig:
    tau: float = 4.0
    alpha_shape: float = 1.0
    loss_alpha: float = 1.0
    loss_beta: float = 0.5
    region_mix: bool = True
    semi_supervised: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.alpha_shape <= 0:
            raise ValueError("tau and alpha_shape must be positive")
        if self.loss_alpha < 0 or self.loss_beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    L_Y: float = 0.0
    L_K_labeled: float = 0.0
    L_K_unlabeled: float = 0.0
    L_D_labeled: float = 0.0
    L_D_unlabeled: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# -- elementwise losses -----------------------------------------------------------


def kd_loss(p_s: torch.Tensor, p_t: torch.Tensor, tau: float) -> torch.Tensor:
    """Sigmoid (per-class binary) distillation loss scaled by tau**2.

    The teacher logits are detached. Log-sigmoid is used for both branches, so
    saturated logits stay finite without clamping.
    """
    if p_s.shape != p_t.shape:
        raise ValueError(f"shape mismatch {tuple(p_s.shape)} vs {tuple(p_t.shape)}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = torch.sigmoid(p_t.detach() / tau)
    s = p_s / tau
    per = (1 - q) * F.logsigmoid(-s) + q * F.logsigmoid(s)
    return -(tau**2) * per.mean()


def bce_multilabel(p_s: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if p_s.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p_s.shape)} vs {tuple(y.shape)}")
    y = y.to(p_s.dtype)
    per = (1 - y) * F.logsigmoid(-p_s) + y * F.logsigmoid(p_s)
    return -per.mean()


def negative_pairing(n: int) -> torch.Tensor:
    """Index of the unpaired teacher output for each sample: n -> n+1 mod N."""
    return torch.roll(torch.arange(n), -1)


def discriminator_loss(z_s: torch.Tensor, o_t: torch.Tensor, D: Callable) -> torch.Tensor:
    n = z_s.shape[0]
    if n < 2:
        raise ValueError("discriminator loss needs at least 2 samples for a negative pair")
    o = o_t.detach()
    pos = D(z_s, o)
    neg = D(z_s, o[negative_pairing(n)])
    return -(F.logsigmoid(pos) + F.logsigmoid(-neg)).mean()


# -- region mixing ----------------------------------------------------------------


def _round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


@dataclass
class RegionBox:
    lam: float
    r_x: int
    r_y: int
    r_w: int
    r_h: int
    length: int
    n_leads: int = N_LEADS

    @property
    def x_span(self) -> tuple[int, int]:
        return self.r_x, min(self.r_x + self.r_w, self.length)

    @property
    def y_span(self) -> tuple[int, int]:
        return self.r_y, min(self.r_y + self.r_h, self.n_leads)

    @property
    def nominal_area(self) -> int:
        return self.r_w * self.r_h

    @property
    def area(self) -> int:
        (x0, x1), (y0, y1) = self.x_span, self.y_span
        return max(x1 - x0, 0) * max(y1 - y0, 0)

    @property
    def weight(self) -> float:
        """Fraction of the signal taken from the partner; equals the mask's zero fraction."""
        return self.area / (self.n_leads * self.length)

    @property
    def mask(self) -> np.ndarray:
        m = np.ones((self.n_leads, self.length), dtype=np.float32)
        (x0, x1), (y0, y1) = self.x_span, self.y_span
        m[y0:y1, x0:x1] = 0.0
        return m


def sample_region_box(
    length: int,
    alpha_shape: float,
    rng: np.random.Generator,
    *,
    lam: float | None = None,
    r_x: int | None = None,
    r_y: int | None = None,
    n_leads: int = N_LEADS,
) -> RegionBox:
    """Draw an exchange box; any of ``lam``, ``r_x``, ``r_y`` may be pinned."""
    if length <= 0:
        raise ValueError("length must be positive")
    # draw in fixed order so pinning one value leaves the others' stream unchanged
    lam_draw = rng.beta(alpha_shape, alpha_shape)
    x_draw = int(rng.integers(0, length + 1))
    y_draw = int(rng.integers(0, n_leads + 1))
    lam = float(lam_draw if lam is None else lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    r_x = x_draw if r_x is None else int(r_x)
    r_y = y_draw if r_y is None else int(r_y)
    side = math.sqrt(1.0 - lam)
    return RegionBox(lam, r_x, r_y, _round_half_away(length * side), _round_half_away(n_leads * side), length, n_leads)


def region_mix(x_i, x_j, box_or_mask):
    """Signal from ``x_i`` outside the box and from ``x_j`` inside it.

    Accepts numpy arrays or tensors; ``box_or_mask`` is a RegionBox or a
    binary mask broadcastable to the inputs (1 keeps ``x_i``).
    """
    if tuple(x_i.shape) != tuple(x_j.shape):
        raise ValueError(f"shape mismatch {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    mask = box_or_mask.mask if isinstance(box_or_mask, RegionBox) else box_or_mask
    if isinstance(x_i, torch.Tensor):
        keep = torch.as_tensor(mask, device=x_i.device) > 0.5
        return torch.where(keep, x_i, x_j)
    return np.where(np.asarray(mask) > 0.5, x_i, x_j)


def mix_labels(y_i, y_j, box: RegionBox, length: int | None = None):
    if length is not None and length != box.length:
        raise ValueError("box was sampled for a different signal length")
    w = box.weight
    return (1 - w) * y_i + w * y_j


@dataclass
class MixPlan:
    """Partner permutation, per-sample masks and label weights for one batch."""

    perm: torch.Tensor
    mask: torch.Tensor
    weight: torch.Tensor
    boxes: list

    def mix(self, x: torch.Tensor) -> torch.Tensor:
        return torch.where(self.mask.to(torch.bool), x, x[self.perm])

    def mix_labels(self, y: torch.Tensor) -> torch.Tensor:
        w = self.weight.to(y.dtype)[:, None]
        return (1 - w) * y + w * y[self.perm]


def plan_mix(n: int, length: int, alpha_shape: float, rng: np.random.Generator,
             lam: float | None = None, n_leads: int = N_LEADS) -> MixPlan:
    perm = torch.as_tensor(rng.permutation(n), dtype=torch.long)
    boxes = [sample_region_box(length, alpha_shape, rng, lam=lam, n_leads=n_leads) for _ in range(n)]
    mask = torch.as_tensor(np.stack([b.mask for b in boxes])) if n else torch.ones(0, n_leads, length)
    weight = torch.tensor([b.weight for b in boxes], dtype=torch.float64)
    return MixPlan(perm, mask, weight, boxes)


# -- batch objectives ----------------------------------------------------------------


@dataclass
class Terms:
    """Unweighted loss terms for one batch (tensors, still attached to the graph)."""

    sup: torch.Tensor | None
    kd: torch.Tensor
    disc: torch.Tensor

    def weighted(self, cfg: KDConfig) -> torch.Tensor:
        total = cfg.loss_alpha * self.kd + cfg.loss_beta * self.disc
        return total if self.sup is None else self.sup + total


def combined_objective(p_s, z_s, p_t, y, D, cfg: KDConfig) -> torch.Tensor:
    """L_Y + alpha L_K + beta L_D from already computed logits and features."""
    return compute_terms(p_s, z_s, p_t, y, D, cfg).weighted(cfg)


def compute_terms(p_s, z_s, p_t, y, D, cfg: KDConfig) -> Terms:
    zero = p_s.sum() * 0
    sup = None if y is None else bce_multilabel(p_s, y)
    kd = kd_loss(p_s, p_t, cfg.tau) if cfg.loss_alpha > 0 else zero
    disc = discriminator_loss(z_s, p_t, D) if cfg.loss_beta > 0 and D is not None else zero
    return Terms(sup, kd, disc)


@dataclass
class Models:
    """The pieces a distillation step touches.

    ``restoration`` may be ``None`` when batches carry precomputed restored
    signals; it is only used to fill in ``batch['restored']`` if missing.
    """

    student: torch.nn.Module
    teacher: torch.nn.Module | None
    discriminator: torch.nn.Module | None
    restoration: torch.nn.Module | None = None
    lead_index: int = 0


def _restored(batch: dict, models: Models) -> torch.Tensor:
    if batch.get("restored") is not None:
        return batch["restored"]
    if models.restoration is None:
        raise ValueError("batch has no restored signals and no restoration model was given")
    x = batch["x"]
    lead = x[:, models.lead_index:models.lead_index + 1]
    with torch.no_grad():
        return models.restoration(lead)


def _teacher_logits(teacher: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return teacher(x)[1]


def batch_terms(batch: dict, models: Models, cfg: KDConfig, rng: np.random.Generator | None,
                labeled: bool, lam: float | None = None) -> Terms:
    """Mix the real and restored batch with one shared plan and evaluate all terms.

    ``batch`` holds ``x`` [N,12,L] real signals, optionally ``restored``
    [N,12,L] and, for labeled batches, ``y`` [N,C].
    """
    x = batch["x"]
    r = _restored(batch, models)
    y = batch.get("y") if labeled else None
    if cfg.region_mix:
        if rng is None:
            raise ValueError("region mixing needs an rng")
        plan = plan_mix(x.shape[0], x.shape[-1], cfg.alpha_shape, rng, lam=lam, n_leads=x.shape[1])
        x, r = plan.mix(x), plan.mix(r)
        if y is not None:
            y = plan.mix_labels(y)
    need_teacher = cfg.loss_alpha > 0 or cfg.loss_beta > 0
    p_t = _teacher_logits(models.teacher, x) if need_teacher else None
    z_s, p_s = models.student(r)
    if p_t is None:
        p_t = torch.zeros_like(p_s)
    return compute_terms(p_s, z_s, p_t, y, models.discriminator, cfg)


def labeled_objective(batch: dict, models: Models, cfg: KDConfig, rng=None, lam=None) -> tuple[torch.Tensor, LossReport]:
    terms = batch_terms(batch, models, cfg, rng, labeled=True, lam=lam)
    total = terms.weighted(cfg)
    report = LossReport(
        L_Y=terms.sup.item(), L_K_labeled=terms.kd.item(), L_D_labeled=terms.disc.item(), total=total.item()
    )
    return total, report


def unlabeled_objective(batch: dict | None, models: Models, cfg: KDConfig, rng=None, lam=None) -> tuple[torch.Tensor, LossReport]:
    if batch is None or batch["x"].shape[0] == 0:
        zero = torch.zeros((), dtype=torch.get_default_dtype())
        return zero, LossReport()
    terms = batch_terms(batch, models, cfg, rng, labeled=False, lam=lam)
    total = terms.weighted(cfg)
    report = LossReport(L_K_unlabeled=terms.kd.item(), L_D_unlabeled=terms.disc.item(), total=total.item())
    return total, report


def total_objective(labeled_batch: dict, unlabeled_batch: dict | None, models: Models, cfg: KDConfig,
                    rng=None, lam=None) -> tuple[torch.Tensor, LossReport]:
    """Labeled plus unlabeled objective; the unlabeled part is skipped when not semi-supervised."""
    lab, rep_l = labeled_objective(labeled_batch, models, cfg, rng, lam)
    if not cfg.semi_supervised:
        unlabeled_batch = None
    unl, rep_u = unlabeled_objective(unlabeled_batch, models, cfg, rng, lam)
    total = lab + unl
    report = LossReport(
        L_Y=rep_l.L_Y,
        L_K_labeled=rep_l.L_K_labeled,
        L_K_unlabeled=rep_u.L_K_unlabeled,
        L_D_labeled=rep_l.L_D_labeled,
        L_D_unlabeled=rep_u.L_D_unlabeled,
        total=total.item(),
    )
    return total, report


def vanilla_total(batch: dict, models: Models, cfg: KDConfig) -> torch.Tensor:
    """Supervised BCE plus plain distillation on the unmixed labeled batch."""
    r = _restored(batch, models)
    _, p_s = models.student(r)
    loss = bce_multilabel(p_s, batch["y"])
    if cfg.loss_alpha > 0:
        loss = loss + cfg.loss_alpha * kd_loss(p_s, _teacher_logits(models.teacher, batch["x"]), cfg.tau)
    return loss
