"""Optimization loops: restoration/teacher (pre)training and fine-tuning, the
semi-supervised distillation loop, and early stopping shared by all of them."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import KDConfig, LossReport, Models, bce_multilabel, total_objective
from .models import Classifier, Discriminator, RestorationNet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate must be >= 0, batch_size >= 1 and max_epochs >= 0")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 1e-3, "batch_size": 1024, **kw})

    @classmethod
    def downstream(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 2e-3, "batch_size": 128, **kw})


@dataclass
class TensorSet:
    """In-memory split: real signals, optional labels, optional restored signals."""

    x: torch.Tensor
    y: torch.Tensor | None = None
    restored: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "TensorSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]
        return TensorSet(self.x[idx], pick(self.y), pick(self.restored))

    def batch(self, idx) -> dict:
        sub = self.subset(idx)
        return {"x": sub.x, "y": sub.y, "restored": sub.restored}

    def to(self, dtype) -> "TensorSet":
        conv = lambda t: None if t is None else t.to(dtype)
        return TensorSet(conv(self.x), conv(self.y), conv(self.restored))

    @classmethod
    def from_records(cls, records, labeled: bool = True, dtype=torch.float32) -> "TensorSet":
        from .signal_core import stack_labels, stack_signals

        x = torch.as_tensor(stack_signals(records)).to(dtype)
        y = None
        if labeled and records and records[0].labels is not None:
            y = torch.as_tensor(stack_labels(records)).to(dtype)
        return cls(x, y)


@dataclass
class RunLog:
    seed: int
    config_hash: str
    val_history: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    wall_clock: float = 0.0

    @property
    def best_value(self) -> float:
        return self.val_history[self.best_epoch - 1] if self.best_epoch else float("nan")

    def write(self, run_dir) -> None:
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "steps.jsonl", "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(d / "epochs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_objective", "is_best"])
            for i, v in enumerate(self.val_history, 1):
                w.writerow([i, repr(float(v)), int(i == self.best_epoch)])
        # wall-clock time lives apart from the summary so reruns stay byte-identical
        summary = {k: v for k, v in asdict(self).items() if k not in ("steps", "val_history", "wall_clock")}
        (d / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (d / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}) + "\n")


def config_hash(*cfgs) -> str:
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in cfgs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def state_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def iter_batches(n: int, batch_size: int, gen: torch.Generator, shuffle: bool = True, min_size: int = 2) -> Iterator[torch.Tensor]:
    """Shuffled index batches; a trailing batch smaller than ``min_size`` is dropped."""
    order = torch.randperm(n, generator=gen) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < min_size and start > 0:
            break
        yield idx


class CyclicSampler:
    """Endless stream of fixed-size index batches, reshuffled after each pass."""

    def __init__(self, n: int, batch_size: int, gen: torch.Generator):
        self.n, self.batch_size, self.gen = n, min(batch_size, n), gen
        self._order = torch.empty(0, dtype=torch.long)
        self._pos = 0

    def next(self) -> torch.Tensor:
        parts, need = [], self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = torch.randperm(self.n, generator=self.gen)
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            parts.append(take)
        return torch.cat(parts)

    def state(self) -> dict:
        return {"order": self._order.clone(), "pos": self._pos}

    def load(self, st: dict) -> None:
        self._order, self._pos = st["order"], st["pos"]


@torch.no_grad()
def batched_apply(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    if x.shape[0] == 0:
        return x
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])


def make_optimizer(modules: Iterable[nn.Module], cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _clip(optimizer: torch.optim.Optimizer, max_norm: float) -> None:
    if max_norm and max_norm > 0:
        params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
        if params:
            torch.nn.utils.clip_grad_norm_(params, max_norm)


def fit(
    trainables: list[nn.Module],
    run_epoch: Callable[[torch.optim.Optimizer], list[dict]],
    validate: Callable[[], float],
    cfg: TrainConfig,
    run_log: RunLog | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    checkpoint: Path | None = None,
    rng_state: Callable[[], dict] | None = None,
    load_rng_state: Callable[[dict], None] | None = None,
) -> RunLog:
    """Train until the validation objective has not decreased for ``patience`` epochs.

    On return the trainables hold the weights from the best epoch. With
    ``checkpoint`` set, the loop state is saved there after every epoch and an
    existing file is resumed from.
    """
    run_log = run_log or RunLog(cfg.seed, config_hash(cfg))
    optimizer = optimizer or make_optimizer(trainables, cfg)
    best_val = math.inf
    best_state = [copy.deepcopy(m.state_dict()) for m in trainables]
    since_best = 0
    start_epoch = 1
    t0 = time.perf_counter()

    if checkpoint is not None and Path(checkpoint).exists():
        st = torch.load(checkpoint, map_location="cpu", weights_only=False)
        for m, sd in zip(trainables, st["models"]):
            m.load_state_dict(sd)
        optimizer.load_state_dict(st["optimizer"])
        best_state, best_val, since_best = st["best_state"], st["best_val"], st["since_best"]
        run_log.val_history, run_log.steps = st["val_history"], st["steps"]
        run_log.best_epoch = st["best_epoch"]
        start_epoch = st["epoch"] + 1
        torch.set_rng_state(st["torch_rng"])
        if load_rng_state is not None:
            load_rng_state(st["extra_rng"])
        log.info("resumed from %s at epoch %d", checkpoint, start_epoch)
        if since_best >= cfg.patience:
            start_epoch = cfg.max_epochs + 1
            run_log.stopped_early = True

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        for m in trainables:
            m.train()
        reports = run_epoch(optimizer)
        for i, rep in enumerate(reports):
            run_log.steps.append({"epoch": epoch, "step": i, **rep})
        for m in trainables:
            m.eval()
        val = float(validate())
        run_log.val_history.append(val)
        run_log.epochs_run = epoch
        if val < best_val:
            best_val, since_best, run_log.best_epoch = val, 0, epoch
            best_state = [copy.deepcopy(m.state_dict()) for m in trainables]
        else:
            since_best += 1
        log.debug("epoch %d val %.6f best %.6f (epoch %d)", epoch, val, best_val, run_log.best_epoch)
        if checkpoint is not None:
            torch.save(
                {
                    "models": [m.state_dict() for m in trainables],
                    "optimizer": optimizer.state_dict(),
                    "best_state": best_state,
                    "best_val": best_val,
                    "since_best": since_best,
                    "best_epoch": run_log.best_epoch,
                    "val_history": run_log.val_history,
                    "steps": run_log.steps,
                    "epoch": epoch,
                    "torch_rng": torch.get_rng_state(),
                    "extra_rng": rng_state() if rng_state else {},
                },
                checkpoint,
            )
        if since_best >= cfg.patience:
            run_log.stopped_early = True
            break

    run_log.epochs_run = len(run_log.val_history)
    for m, sd in zip(trainables, best_state):
        m.load_state_dict(sd)
        m.eval()
    run_log.wall_clock = time.perf_counter() - t0
    return run_log


def _gen(seed: int, stream: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed * 1000 + stream)
    return g


# -- restoration ------------------------------------------------------------------


def restoration_mse(model: RestorationNet, x: torch.Tensor, lead_index: int = 0, batch_size: int = 256) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            xb = x[i:i + batch_size]
            out = model(xb[:, lead_index:lead_index + 1])
            total += F.mse_loss(out, xb, reduction="sum").item()
            count += xb.numel()
    return total / max(count, 1)


def pretrain_restoration(
    train: TensorSet,
    val: TensorSet,
    cfg: TrainConfig,
    model: RestorationNet | str = "tiny",
    lead_index: int = 0,
    checkpoint: Path | None = None,
) -> tuple[RestorationNet, RunLog]:
    """Fit the 1-lead -> 12-lead net by MSE; returns the best-validation weights."""
    from .models import build_restoration

    set_determinism(cfg.seed)
    if isinstance(model, str):
        model = build_restoration(model)
    model = model.to(train.x.dtype)
    gen = _gen(cfg.seed, 1)

    def run_epoch(opt):
        out = []
        for idx in iter_batches(len(train), cfg.batch_size, gen):
            xb = train.x[idx]
            loss = F.mse_loss(model(xb[:, lead_index:lead_index + 1]), xb)
            opt.zero_grad()
            loss.backward()
            _clip(opt, cfg.grad_clip)
            opt.step()
            out.append({"mse": loss.item()})
        return out

    run = fit([model], run_epoch, lambda: restoration_mse(model, val.x, lead_index, cfg.eval_batch_size), cfg,
              checkpoint=checkpoint, rng_state=lambda: {"gen": gen.get_state()},
              load_rng_state=lambda s: gen.set_state(s["gen"]))
    return model, run


# -- classifiers ------------------------------------------------------------------


def classifier_bce(model: Classifier, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    model.eval()
    with torch.no_grad():
        logits = batched_apply(lambda b: model(b)[1], x, batch_size)
        return bce_multilabel(logits, y).item()


def train_classifier(
    model: Classifier,
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    val_x: torch.Tensor,
    val_y: torch.Tensor,
    cfg: TrainConfig,
    checkpoint: Path | None = None,
) -> tuple[Classifier, RunLog]:
    """Supervised multi-label training with BCE; early stop on validation BCE."""
    set_determinism(cfg.seed)
    model = model.to(train_x.dtype)
    gen = _gen(cfg.seed, 1)

    def run_epoch(opt):
        out = []
        for idx in iter_batches(train_x.shape[0], cfg.batch_size, gen):
            _, logits = model(train_x[idx])
            loss = bce_multilabel(logits, train_y[idx])
            opt.zero_grad()
            loss.backward()
            _clip(opt, cfg.grad_clip)
            opt.step()
            rep = LossReport(L_Y=loss.item(), total=loss.item())
            out.append(rep.to_dict())
        return out

    run = fit([model], run_epoch, lambda: classifier_bce(model, val_x, val_y, cfg.eval_batch_size), cfg,
              checkpoint=checkpoint, rng_state=lambda: {"gen": gen.get_state()},
              load_rng_state=lambda s: gen.set_state(s["gen"]))
    return model, run


def pretrain_teacher(train: TensorSet, val: TensorSet, cfg: TrainConfig, model: Classifier | str = "tiny",
                     n_classes: int | None = None, checkpoint: Path | None = None) -> tuple[Classifier, RunLog]:
    from .models import build_classifier

    if train.y is None:
        raise ValueError("teacher training needs labels")
    set_determinism(cfg.seed)
    if isinstance(model, str):
        model = build_classifier(model, n_classes or train.y.shape[1])
    return train_classifier(model, train.x, train.y, val.x, val.y, cfg, checkpoint)


def finetune(model: nn.Module, labeled: TensorSet, unlabeled: TensorSet | None, val: TensorSet,
             cfg: TrainConfig, lead_index: int = 0, checkpoint: Path | None = None) -> tuple[nn.Module, RunLog]:
    """Continue training a pretrained model on the downstream split.

    Restoration nets see labeled and unlabeled signals (labels unused);
    classifiers see only the labeled set.
    """
    if isinstance(model, RestorationNet):
        parts = [labeled.x] + ([unlabeled.x] if unlabeled is not None and len(unlabeled) else [])
        return pretrain_restoration(TensorSet(torch.cat(parts)), val, cfg, model, lead_index, checkpoint)
    if isinstance(model, Classifier):
        set_determinism(cfg.seed)
        return train_classifier(model, labeled.x, labeled.y, val.x, val.y, cfg, checkpoint)
    raise TypeError(f"cannot fine-tune {type(model).__name__}")


# -- student ---------------------------------------------------------------------


def restore_signals(restoration: RestorationNet, x: torch.Tensor, lead_index: int = 0, batch_size: int = 256) -> torch.Tensor:
    restoration.eval()
    return batched_apply(lambda b: restoration(b[:, lead_index:lead_index + 1]), x, batch_size)


def with_restored(ts: TensorSet, restoration: RestorationNet, lead_index: int = 0, batch_size: int = 256) -> TensorSet:
    return TensorSet(ts.x, ts.y, restore_signals(restoration, ts.x, lead_index, batch_size))


def student_val_bce(student: Classifier, val: TensorSet, batch_size: int = 256) -> float:
    if val.restored is None:
        raise ValueError("validation set needs restored signals")
    return classifier_bce(student, val.restored, val.y, batch_size)


def train_supervised_student(student: Classifier, labeled: TensorSet, val: TensorSet, cfg: TrainConfig,
                             checkpoint: Path | None = None) -> tuple[Classifier, RunLog]:
    """No-distillation baseline: BCE on restored inputs of the labeled set."""
    if labeled.restored is None:
        raise ValueError("labeled set needs restored signals")
    set_determinism(cfg.seed)
    return train_classifier(student, labeled.restored, labeled.y, val.restored, val.y, cfg, checkpoint)


def distill_step(models: Models, optimizer: torch.optim.Optimizer, lab_batch: dict, unl_batch: dict | None,
                 kd: KDConfig, rng: np.random.Generator, grad_clip: float = 1.0, lam: float | None = None) -> LossReport:
    """One joint update of student and discriminator on the combined objective."""
    total, report = total_objective(lab_batch, unl_batch, models, kd, rng, lam)
    optimizer.zero_grad()
    total.backward()
    _clip(optimizer, grad_clip)
    optimizer.step()
    return report


def distill(
    teacher: Classifier,
    restoration: RestorationNet | None,
    student: Classifier,
    discriminator: Discriminator | None,
    labeled: TensorSet,
    unlabeled: TensorSet | None,
    val: TensorSet,
    kd: KDConfig,
    cfg: TrainConfig,
    lead_index: int = 0,
    checkpoint: Path | None = None,
) -> tuple[Classifier, RunLog]:
    """Distill ``teacher`` into ``student`` (and train ``discriminator``) with early stopping.

    Each step draws one labeled batch and, when semi-supervised, one unlabeled
    batch. An epoch is one pass over the labeled set. Teacher and restoration
    are frozen. Splits without precomputed ``restored`` signals are restored
    once up front.
    """
    if len(labeled) == 0:
        raise ValueError("labeled set is empty")
    set_determinism(cfg.seed)
    freeze(teacher)
    if restoration is not None:
        freeze(restoration)
        labeled = labeled if labeled.restored is not None else with_restored(labeled, restoration, lead_index)
        val = val if val.restored is not None else with_restored(val, restoration, lead_index)
        if unlabeled is not None and len(unlabeled) and unlabeled.restored is None:
            unlabeled = with_restored(unlabeled, restoration, lead_index)
    if labeled.restored is None or val.restored is None:
        raise ValueError("restored signals or a restoration model are required")
    use_unlabeled = kd.semi_supervised and unlabeled is not None and len(unlabeled) > 0
    if kd.semi_supervised and not use_unlabeled:
        log.info("no unlabeled records; distilling on the labeled objective only")

    dtype = labeled.x.dtype
    student.to(dtype)
    if discriminator is not None:
        discriminator.to(dtype)
    models = Models(student, teacher, discriminator if kd.loss_beta > 0 else None, None, lead_index)
    trainables = [student] + ([discriminator] if discriminator is not None else [])
    gen_l, gen_u = _gen(cfg.seed, 1), _gen(cfg.seed, 2)
    mix_rng = np.random.default_rng(cfg.seed)
    sampler = CyclicSampler(len(unlabeled), cfg.batch_size, gen_u) if use_unlabeled else None

    def run_epoch(opt):
        out = []
        for idx in iter_batches(len(labeled), cfg.batch_size, gen_l):
            unl = unlabeled.batch(sampler.next()) if sampler is not None else None
            rep = distill_step(models, opt, labeled.batch(idx), unl, kd, mix_rng, cfg.grad_clip)
            out.append(rep.to_dict())
        return out

    def rng_state():
        st = {"gen_l": gen_l.get_state(), "gen_u": gen_u.get_state(), "mix": mix_rng.bit_generator.state}
        if sampler is not None:
            st["sampler"] = sampler.state()
        return st

    def load_rng_state(st):
        gen_l.set_state(st["gen_l"])
        gen_u.set_state(st["gen_u"])
        mix_rng.bit_generator.state = st["mix"]
        if sampler is not None:
            sampler.load(st["sampler"])

    run = fit(trainables, run_epoch, lambda: student_val_bce(student, val, cfg.eval_batch_size), cfg,
              run_log=RunLog(cfg.seed, config_hash(kd, cfg)), checkpoint=checkpoint,
              rng_state=rng_state, load_rng_state=load_rng_state)
    return student, run
