"""From posteriorgrams to binary rolls and note events."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import kernels, midi
from .config import ConfigError, InferenceConfig
from .constants import HOP_SECONDS, MIN_MIDI
from .dataio import NoteEvent, NoteSequence, notes_to_rolls
from .model import predict


@dataclass
class BinaryRoll:
    values: np.ndarray  # (T, 88) uint8 in {0, 1}
    hop_seconds: float = HOP_SECONDS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise ValueError("binary roll must be 2-D (T, pitches)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def threshold(posteriorgram: np.ndarray, tau: float, hop_seconds: float = HOP_SECONDS) -> BinaryRoll:
    """Binarize with ``value >= tau``."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {tau}")
    return BinaryRoll((np.asarray(posteriorgram) >= tau).astype(np.uint8), hop_seconds)


def _to_notes(pitch_idx, start, end, hop_seconds, n_frames) -> NoteSequence:
    notes = [
        NoteEvent(int(p) + MIN_MIDI, s * hop_seconds, e * hop_seconds)
        for p, s, e in zip(pitch_idx.tolist(), start.tolist(), end.tolist())
    ]
    return NoteSequence(notes, duration=n_frames * hop_seconds)


def rule_based_inference(
    onset_roll: BinaryRoll, frame_roll: BinaryRoll, cfg: InferenceConfig | None = None
) -> NoteSequence:
    """Emit a note only where a frame activation comes with an onset.

    A note opens at each rising edge of the onset roll and stays open while
    the frame roll is 1, closing at the first 0. A new onset edge on a
    sounding pitch closes the note and opens another. Notes shorter than
    ``min_note_frames`` (including onsets on inactive frames, which have
    length 0) are padded to that length with ``orphan_onsets="emit"`` and
    dropped with ``"discard"``. Under ``"emit"`` every onset edge therefore
    yields exactly one note.
    """
    cfg = (cfg or InferenceConfig()).validate()
    if onset_roll.values.shape != frame_roll.values.shape:
        raise ValueError(f"roll shapes differ: {onset_roll.values.shape} vs {frame_roll.values.shape}")
    if not np.isclose(onset_roll.hop_seconds, frame_roll.hop_seconds):
        raise ValueError("rolls use different hop sizes")
    p, s, e = kernels.decode_notes(
        onset_roll.values, frame_roll.values, cfg.min_note_frames, cfg.orphan_onsets == "emit"
    )
    return _to_notes(p, s, e, frame_roll.hop_seconds, frame_roll.n_frames)


def roll_to_notes(roll: BinaryRoll) -> NoteSequence:
    """One note per maximal run of active frames at each pitch."""
    p, s, e = kernels.roll_runs(roll.values)
    return _to_notes(p, s, e, roll.hop_seconds, roll.n_frames)


def notes_to_roll(notes: NoteSequence, n_frames: int, hop_seconds: float = HOP_SECONDS) -> BinaryRoll:
    """Frame roll of a note sequence, using the label quantization."""
    return BinaryRoll(notes_to_rolls(notes, n_frames, hop_seconds).frame_roll, hop_seconds)


def notes_to_midi(notes: NoteSequence, path) -> Path:
    """Write notes as a format-0 Standard MIDI File (0.5 ms tick grid)."""
    return midi.write_note_pairs(path, [(n.pitch, n.onset, n.offset, n.velocity) for n in notes])


@dataclass
class Transcription:
    notes: NoteSequence
    roll: BinaryRoll
    frame_posteriorgram: np.ndarray
    onset_posteriorgram: np.ndarray | None = None
    attention: np.ndarray | None = None


def transcribe(
    model: torch.nn.Module,
    spec: np.ndarray,
    cfg: InferenceConfig | None = None,
    use_inference: bool = True,
    external_onsets: np.ndarray | None = None,
) -> Transcription:
    """Run a model over one spectrogram and decode notes.

    With ``use_inference`` the rule-based decoder combines onset and frame
    rolls; the onset posteriorgram comes from ``external_onsets`` when given
    (e.g. a separately trained onset stack), otherwise from the model. Without
    it, notes are the runs of the thresholded frame posteriorgram.
    """
    cfg = (cfg or InferenceConfig()).validate()
    out = predict(model, spec)
    frame_post = out.y_frame_hat[0].cpu().numpy().astype(np.float64)
    onset_post = None
    if external_onsets is not None:
        onset_post = np.asarray(external_onsets, dtype=np.float64)
        if onset_post.shape != frame_post.shape:
            raise ValueError(f"external onsets shape {onset_post.shape} != {frame_post.shape}")
    elif out.y_onset_hat is not None:
        onset_post = out.y_onset_hat[0].cpu().numpy().astype(np.float64)
    attention = None if out.attention is None else out.attention.weights[0].cpu().numpy()

    frame_roll = threshold(frame_post, cfg.frame_threshold)
    if use_inference:
        if onset_post is None:
            raise ConfigError("rule-based inference needs onset predictions: this model has no onset stack")
        notes = rule_based_inference(threshold(onset_post, cfg.onset_threshold), frame_roll, cfg)
        roll = notes_to_roll(notes, frame_roll.n_frames)
    else:
        notes = roll_to_notes(frame_roll)
        roll = frame_roll
    return Transcription(notes, roll, frame_post, onset_post, attention)
