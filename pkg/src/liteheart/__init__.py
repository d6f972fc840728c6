"""Single-lead ECG classification distilled from a 12-lead teacher."""

from .losses import KDConfig, LossReport, RegionBox
from .metrics import MetricReport, compute_report
from .models import build_classifier, build_discriminator, build_restoration, load_checkpoint, save_checkpoint
from .signal_core import SignalRecord, SplitSpec, SynthConfig, preprocess, split_dataset, synth_generate
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "KDConfig",
    "LossReport",
    "MetricReport",
    "RegionBox",
    "SignalRecord",
    "SplitSpec",
    "SynthConfig",
    "TrainConfig",
    "build_classifier",
    "build_discriminator",
    "build_restoration",
    "compute_report",
    "load_checkpoint",
    "preprocess",
    "save_checkpoint",
    "split_dataset",
    "synth_generate",
]
