"""Audio and annotation ingestion, label rolls, and training windows."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import midi
from .arrays import load_arrays, save_arrays
from .constants import HOP_SECONDS, MAX_MIDI, MIN_MIDI, N_PITCHES, SAMPLE_RATE, WINDOW_FRAMES

logger = logging.getLogger(__name__)

# absorbs float error in onset/hop when times sit exactly on frame edges
_QUANT_EPS = 1e-9


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip expects mono samples, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: int = 64

    def __post_init__(self):
        if not self.offset > self.onset:
            raise ValueError(f"note offset {self.offset} must exceed onset {self.onset}")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if not MIN_MIDI <= self.pitch <= MAX_MIDI:
            raise ValueError(f"pitch {self.pitch} outside piano range")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass
class NoteSequence:
    """Notes sorted by (onset, pitch). ``duration`` covers every offset."""

    notes: list[NoteEvent] = field(default_factory=list)
    duration: float = 0.0

    def __post_init__(self):
        self.notes = sorted(self.notes, key=lambda n: (n.onset, n.pitch, n.offset))
        last = max((n.offset for n in self.notes), default=0.0)
        self.duration = max(float(self.duration), last)

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    @property
    def pitches(self) -> np.ndarray:
        return np.array([n.pitch for n in self.notes], dtype=np.int64)

    @property
    def onsets(self) -> np.ndarray:
        return np.array([n.onset for n in self.notes], dtype=np.float64)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([n.offset for n in self.notes], dtype=np.float64)


@dataclass
class LabelRolls:
    onset_roll: np.ndarray
    frame_roll: np.ndarray
    hop_seconds: float = HOP_SECONDS
    n_truncated: int = 0

    def __post_init__(self):
        if self.onset_roll.shape != self.frame_roll.shape:
            raise ValueError("onset and frame rolls must share a shape")

    @property
    def n_frames(self) -> int:
        return self.frame_roll.shape[0]

    def save(self, path) -> Path:
        header = {"kind": "label_rolls", "T": self.n_frames, "n_pitches": N_PITCHES, "hop_seconds": self.hop_seconds}
        return save_arrays(path, header, onset_roll=self.onset_roll, frame_roll=self.frame_roll)

    @classmethod
    def load(cls, path) -> "LabelRolls":
        header, arrays = load_arrays(path)
        if header.get("kind") != "label_rolls":
            raise ValueError(f"{path}: not a label-roll container")
        return cls(arrays["onset_roll"], arrays["frame_roll"], float(header["hop_seconds"]))


@dataclass
class TrainingWindow:
    spec_segment: np.ndarray  # (WINDOW_FRAMES, n_bins)
    onset_roll: np.ndarray  # (WINDOW_FRAMES, 88)
    frame_roll: np.ndarray
    n_valid: int
    start: int = 0


class AudioFormatError(ValueError):
    pass


def load_audio(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a PCM/float WAV file as a mono clip at ``target_rate``.

    Channels are averaged; other sample rates go through polyphase resampling.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError, EOFError) as exc:
        raise OSError(f"{path}: cannot read WAV audio ({exc})") from exc
    if data.size == 0:
        raise AudioFormatError(f"{path}: zero-length audio")
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != target_rate:
        ratio = Fraction(target_rate, rate)
        samples = resample_poly(samples, ratio.numerator, ratio.denominator)
    return AudioClip(samples, target_rate)


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy left-aligns 24-bit PCM into int32
        return data.astype(np.float64) / 2147483648.0
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float64)
    raise AudioFormatError(f"unsupported WAV sample type {data.dtype}")


def write_wav(path, clip: AudioClip) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
    return path


def parse_notes(path) -> NoteSequence:
    """Read piano notes from a Standard MIDI File (format 0 or 1).

    Pitches outside 21..108 are dropped and counted in a warning. Sustain
    pedal messages are ignored.
    """
    pairs, length, _ = midi.read_note_pairs(path)
    kept, dropped = [], 0
    for pitch, onset, offset, velocity in pairs:
        if not MIN_MIDI <= pitch <= MAX_MIDI:
            dropped += 1
            continue
        kept.append(NoteEvent(int(pitch), float(onset), float(offset), max(1, int(velocity))))
    if dropped:
        logger.warning("%s: dropped %d notes outside the piano range", path, dropped)
    return NoteSequence(kept, duration=length)


def frames_for_duration(seconds: float, hop_seconds: float = HOP_SECONDS) -> int:
    """Frame count of a centred STFT over ``seconds`` of audio at the default rate."""
    n_samples = int(round(seconds * SAMPLE_RATE))
    return 1 + n_samples // int(round(hop_seconds * SAMPLE_RATE))


def note_frame_span(onset: float, offset: float, hop_seconds: float = HOP_SECONDS) -> tuple[int, int]:
    """First frame and exclusive end frame covered by a note."""
    start = math.floor(onset / hop_seconds + _QUANT_EPS)
    end = math.ceil(offset / hop_seconds - _QUANT_EPS)
    return start, max(end, start + 1)


def notes_to_rolls(
    notes: NoteSequence,
    n_frames: int,
    hop_seconds: float = HOP_SECONDS,
    onset_frames: int = 2,
) -> LabelRolls:
    """Render notes as binary onset and frame rolls of shape ``(n_frames, 88)``.

    A note covers frames ``floor(onset/hop)`` up to (excluding)
    ``ceil(offset/hop)``. Its onset marks the first ``onset_frames`` of
    those frames, never past the note's own extent.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    onset_roll = np.zeros((n_frames, N_PITCHES), dtype=np.uint8)
    frame_roll = np.zeros((n_frames, N_PITCHES), dtype=np.uint8)
    truncated = 0
    for n in notes:
        p = n.pitch - MIN_MIDI
        start, end = note_frame_span(n.onset, n.offset, hop_seconds)
        if start >= n_frames:
            truncated += 1
            continue
        if end > n_frames:
            truncated += 1
            end = n_frames
        frame_roll[start:end, p] = 1
        onset_roll[start : min(start + onset_frames, end), p] = 1
    if truncated:
        logger.warning("notes_to_rolls: %d notes truncated at %d frames", truncated, n_frames)
    return LabelRolls(onset_roll, frame_roll, hop_seconds, truncated)


def segment_windows(spec: np.ndarray, labels: LabelRolls, length: int = WINDOW_FRAMES) -> list[TrainingWindow]:
    """Cut a spectrogram and its labels into fixed-length windows, zero-padding the last."""
    spec = np.asarray(spec)
    T = spec.shape[0]
    if labels.n_frames != T:
        raise ValueError(f"spectrogram has {T} frames but labels have {labels.n_frames}")
    windows = []
    for start in range(0, T, length):
        stop = min(start + length, T)
        n = stop - start
        s = np.zeros((length, spec.shape[1]), dtype=spec.dtype)
        on = np.zeros((length, N_PITCHES), dtype=labels.onset_roll.dtype)
        fr = np.zeros((length, N_PITCHES), dtype=labels.frame_roll.dtype)
        s[:n] = spec[start:stop]
        on[:n] = labels.onset_roll[start:stop]
        fr[:n] = labels.frame_roll[start:stop]
        windows.append(TrainingWindow(s, on, fr, n, start))
    return windows


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    audio: str
    annotation: str
    split: str
    id: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test", "valid"):
            raise ValueError(f"unknown split tag {self.split!r}")
        if not self.id:
            self.id = Path(self.audio).stem


def write_manifest(path, entries: list[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"id": e.id, "audio": e.audio, "annotation": e.annotation, "split": e.split} for e in entries]
    path.write_text(json.dumps(rows, indent=1))
    return path


def read_manifest(path) -> list[ManifestEntry]:
    """Read a JSON manifest, or a whitespace-separated text one (audio annotation split)."""
    path = Path(path)
    text = path.read_text()
    base = path.parent
    if path.suffix == ".json":
        rows = json.loads(text)
    else:
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            audio, annotation, split = line.split()[:3]
            rows.append({"audio": audio, "annotation": annotation, "split": split})
    entries = []
    for r in rows:
        audio = Path(r["audio"])
        ann = Path(r["annotation"])
        entries.append(
            ManifestEntry(
                audio=str(audio if audio.is_absolute() else base / audio),
                annotation=str(ann if ann.is_absolute() else base / ann),
                split=r["split"],
                id=r.get("id", ""),
            )
        )
    return entries
