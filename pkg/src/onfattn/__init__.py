"""Onsets-and-Frames piano transcription with local additive attention.

The package covers the whole pipeline: audio and MIDI I/O, the log-Mel front
end, the model family (full model, its ablations and two probes, each with
optional windowed attention), training, rule-based note decoding, the
frame/note/note-with-offset metrics with paired Wilcoxon tests, and an
experiment runner behind the ``onfattn`` command.
"""

from __future__ import annotations

from .config import DataConfig, InferenceConfig, ModelConfig, RunConfig, TrainConfig, load_run_config
from .evaluation import EvalReport, evaluate_recording, note_metrics, note_with_offset_metrics
from .inference import transcribe
from .model import build_model
from .training import load_checkpoint, train_run

__all__ = [
    "DataConfig",
    "EvalReport",
    "InferenceConfig",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "build_model",
    "evaluate_recording",
    "load_checkpoint",
    "load_run_config",
    "note_metrics",
    "note_with_offset_metrics",
    "train_run",
    "transcribe",
]

__version__ = "0.1.0"
