"""Inference systems (1-lead restoration + student, or 12-lead teacher) and
test-set evaluation."""

from __future__ import annotations

import torch
from torch import nn

from .metrics import MetricReport, compute_report
from .models import Classifier, RestorationNet
from .training import TensorSet, batched_apply


class CardiacSystem(nn.Module):
    """Logits from either a low-cost (restoration -> student) or high-cost (teacher) chain.

    Low-cost systems accept a 12-lead batch (the configured lead is picked) or
    a 1-lead batch directly.
    """

    def __init__(self, classifier: Classifier, restoration: RestorationNet | None = None, lead_index: int = 0):
        super().__init__()
        self.classifier = classifier
        self.restoration = restoration
        self.lead_index = lead_index

    @property
    def is_low_cost(self) -> bool:
        return self.restoration is not None

    def classifier_input(self, x: torch.Tensor) -> torch.Tensor:
        if self.restoration is None:
            return x
        if x.shape[1] != 1:
            x = x[:, self.lead_index:self.lead_index + 1]
        return self.restoration(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.classifier_input(x))[1]


@torch.no_grad()
def predict_scores(system: nn.Module, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    system.eval()
    return torch.sigmoid(batched_apply(system, x, batch_size))


def evaluate(system: CardiacSystem | Classifier, dataset: TensorSet, threshold: float = 0.5, beta: float = 2.0,
             use_restored: bool = False, batch_size: int = 256) -> MetricReport:
    """Score ``dataset`` and compute the full metric report.

    With ``use_restored`` a bare classifier is applied to the split's
    precomputed restored signals.
    """
    if dataset.y is None:
        raise ValueError("evaluation needs labels")
    if use_restored:
        if dataset.restored is None:
            raise ValueError("dataset has no restored signals")
        model = system.classifier if isinstance(system, CardiacSystem) else system
        scores = _scores(model, dataset.restored, batch_size)
    elif isinstance(system, Classifier):
        scores = _scores(system, dataset.x, batch_size)
    else:
        scores = predict_scores(system, dataset.x, batch_size)
    return compute_report(scores.double().numpy(), dataset.y.numpy(), threshold, beta)


@torch.no_grad()
def _scores(classifier: Classifier, x: torch.Tensor, batch_size: int) -> torch.Tensor:
    classifier.eval()
    return torch.sigmoid(batched_apply(lambda b: classifier(b)[1], x, batch_size))
