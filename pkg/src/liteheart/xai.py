"""1-D Grad-CAM on the last convolutional block of a classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .models import Classifier


@dataclass
class SaliencyMap:
    heatmap: np.ndarray
    target_class: int
    model_id: str = ""

    def expand(self, n_leads: int = 12) -> np.ndarray:
        """Broadcast the time map to every lead for overlay plots."""
        return np.repeat(self.heatmap, n_leads, axis=0) if self.heatmap.shape[0] == 1 else self.heatmap


def grad_cam(model: Classifier, x: torch.Tensor, target_class: int, model_id: str = "") -> SaliencyMap:
    """Gradient-weighted activation map for one input ``[leads, L]`` or ``[1, leads, L]``.

    Channel weights are the time-averaged gradients of the target logit with
    respect to the last conv block's output; the rectified weighted sum is
    linearly upsampled to ``L`` and scaled to a maximum of 1.
    """
    if not 0 <= target_class < model.n_classes:
        raise ValueError(f"target_class {target_class} out of range [0, {model.n_classes})")
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ValueError("grad_cam explains a single input")
    length = x.shape[-1]
    store: dict[str, torch.Tensor] = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        store["act"] = out

    handle = model.features.last_conv_block.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            x = x.detach().requires_grad_(False)
            logits = model(x)[1]
            model.zero_grad(set_to_none=True)
            logits[0, target_class].backward()
    finally:
        handle.remove()
        model.train(was_training)
    act = store["act"].detach()[0]
    grad = store["act"].grad.detach()[0]
    weights = grad.mean(dim=1)
    cam = torch.relu((weights[:, None] * act).sum(dim=0))
    cam = F.interpolate(cam[None, None], size=length, mode="linear", align_corners=False)[0]
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return SaliencyMap(cam.numpy().astype(np.float64), target_class, model_id)


def top_fraction_recall(heatmap: np.ndarray, window: tuple[int, int], fraction: float = 0.1) -> float:
    """Share of the window's samples that fall in the heatmap's top ``fraction`` of time points."""
    h = np.asarray(heatmap).reshape(-1, np.shape(heatmap)[-1]).max(axis=0)
    k = max(1, int(round(fraction * h.size)))
    top = np.argsort(-h, kind="stable")[:k]
    s, e = window
    if e <= s:
        raise ValueError("empty window")
    return float(((top >= s) & (top < e)).sum() / (e - s))


def localization_recall(model: Classifier, inputs: torch.Tensor, cases: list[tuple[int, int, tuple[int, int]]],
                        fraction: float = 0.1) -> list[float]:
    """Top-``fraction`` recall for each ``(row, class, window)`` case."""
    return [
        top_fraction_recall(grad_cam(model, inputs[row], cls).heatmap, window, fraction)
        for row, cls, window in cases
    ]
