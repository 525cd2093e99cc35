"""Prepared recordings (spectrogram + labels + notes) and dataset splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .dataio import (
    AudioClip,
    LabelRolls,
    ManifestEntry,
    NoteSequence,
    load_audio,
    notes_to_rolls,
    parse_notes,
    read_manifest,
    write_manifest,
    write_wav,
)
from .frontend import LOG_EPS, mel_spectrogram
from .inference import notes_to_midi
from .synth import SynthParams, make_synthetic_dataset


@dataclass
class Piece:
    id: str
    spec: np.ndarray  # (T, n_bins) float32
    labels: LabelRolls
    notes: NoteSequence

    @property
    def n_frames(self) -> int:
        return self.spec.shape[0]


def prepare_piece(piece_id: str, clip: AudioClip, notes: NoteSequence, log_eps: float = LOG_EPS) -> Piece:
    spec = mel_spectrogram(clip, log_eps).values
    labels = notes_to_rolls(notes, spec.shape[0])
    return Piece(piece_id, spec, labels, notes)


def synth_params(cfg: DataConfig) -> SynthParams:
    return SynthParams(
        duration=tuple(cfg.duration),
        density=tuple(cfg.density),
        note_duration=tuple(cfg.note_duration),
        pitch_range=tuple(cfg.pitch_range),
    )


def synthetic_splits(cfg: DataConfig) -> dict[str, list[Piece]]:
    """Train/valid/test splits drawn from one seeded synthetic corpus."""
    n = cfg.n_train + cfg.n_valid + cfg.n_test
    pairs = make_synthetic_dataset(cfg.seed, n, synth_params(cfg))
    pieces = [prepare_piece(f"synth_{cfg.seed}_{i:04d}", clip, notes, cfg.log_eps) for i, (clip, notes) in enumerate(pairs)]
    a, b = cfg.n_train, cfg.n_train + cfg.n_valid
    return {"train": pieces[:a], "valid": pieces[a:b], "test": pieces[b:]}


def write_synthetic_corpus(cfg: DataConfig, out_dir) -> Path:
    """Render the synthetic corpus to WAV + MIDI files and a JSON manifest."""
    out_dir = Path(out_dir)
    n = cfg.n_train + cfg.n_valid + cfg.n_test
    pairs = make_synthetic_dataset(cfg.seed, n, synth_params(cfg))
    entries = []
    for i, (clip, notes) in enumerate(pairs):
        split = "train" if i < cfg.n_train else ("valid" if i < cfg.n_train + cfg.n_valid else "test")
        stem = f"synth_{cfg.seed}_{i:04d}"
        write_wav(out_dir / "audio" / f"{stem}.wav", clip)
        notes_to_midi(notes, out_dir / "midi" / f"{stem}.mid")
        entries.append(ManifestEntry(f"audio/{stem}.wav", f"midi/{stem}.mid", split, stem))
    return write_manifest(out_dir / "manifest.json", entries)


def manifest_splits(path, log_eps: float = LOG_EPS) -> dict[str, list[Piece]]:
    splits: dict[str, list[Piece]] = {"train": [], "valid": [], "test": []}
    for entry in read_manifest(path):
        clip = load_audio(entry.audio)
        notes = parse_notes(entry.annotation)
        splits[entry.split].append(prepare_piece(entry.id, clip, notes, log_eps))
    return splits


def load_splits(cfg: DataConfig) -> dict[str, list[Piece]]:
    if cfg.manifest:
        return manifest_splits(cfg.manifest, cfg.log_eps)
    return synthetic_splits(cfg)
