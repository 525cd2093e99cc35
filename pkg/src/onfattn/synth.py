"""Deterministic synthetic piano-like dataset.

Each note is rendered as a sum of harmonics ``k = 1..8`` with amplitude
``1/k`` under an exponential decay (tau = 0.3 s). The tone starts exactly at
the annotated onset and is silenced by a short fade that ends exactly at the
annotated offset, so the annotations match the audio by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import HOP_SECONDS, SAMPLE_RATE
from .dataio import AudioClip, NoteEvent, NoteSequence


def midi_to_hz(pitch) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69.0) / 12.0)


@dataclass
class SynthParams:
    duration: tuple[float, float] = (16.0, 24.0)  # piece length, seconds
    density: tuple[float, float] = (1.5, 4.0)  # note onsets per second
    note_duration: tuple[float, float] = (0.15, 1.0)
    pitch_range: tuple[int, int] = (36, 96)
    velocity: tuple[int, int] = (50, 120)
    n_harmonics: int = 8
    decay_tau: float = 0.3
    attack: float = 0.002
    release: float = 0.010
    peak: float = 0.9
    # minimum silence between two notes of the same pitch
    same_pitch_gap: float = 3 * HOP_SECONDS

    def clamped(self) -> "SynthParams":
        lo, hi = sorted(max(0.5, float(v)) for v in self.duration)
        dlo, dhi = sorted(max(0.05, float(v)) for v in self.density)
        nlo, nhi = sorted(max(0.04, float(v)) for v in self.note_duration)
        plo, phi = sorted(int(np.clip(v, 21, 108)) for v in self.pitch_range)
        vlo, vhi = sorted(int(np.clip(v, 1, 127)) for v in self.velocity)
        return SynthParams(
            duration=(lo, hi),
            density=(dlo, dhi),
            note_duration=(nlo, nhi),
            pitch_range=(plo, phi),
            velocity=(vlo, vhi),
            n_harmonics=max(1, int(self.n_harmonics)),
            decay_tau=max(1e-3, float(self.decay_tau)),
            attack=max(0.0, float(self.attack)),
            release=max(1.0 / SAMPLE_RATE, float(self.release)),
            peak=float(np.clip(self.peak, 1e-3, 1.0)),
            same_pitch_gap=max(0.0, float(self.same_pitch_gap)),
        )


def render_tone(pitch: int, duration: float, params: SynthParams, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """One note as decaying harmonics, peak amplitude 1, exactly ``duration`` long."""
    n = max(1, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate
    f0 = float(midi_to_hz(pitch))
    tone = np.zeros(n)
    for k in range(1, params.n_harmonics + 1):
        if k * f0 >= sample_rate / 2:
            break
        tone += np.sin(2 * np.pi * k * f0 * t) / k
    env = np.exp(-t / params.decay_tau)
    if params.attack > 0:
        env *= np.minimum(1.0, t / params.attack)
    n_rel = min(n, max(1, int(round(params.release * sample_rate))))
    env[n - n_rel :] *= np.linspace(1.0, 0.0, n_rel + 1)[1:]
    tone *= env
    peak = np.abs(tone).max()
    return tone / peak if peak > 0 else tone


def render_notes(notes: NoteSequence, params: SynthParams | None = None, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Mix rendered notes into a clip ``notes.duration`` long, peak-normalized."""
    params = (params or SynthParams()).clamped()
    n_total = int(round(notes.duration * sample_rate)) + 1
    audio = np.zeros(n_total)
    for ev in notes:
        start = int(round(ev.onset * sample_rate))
        stop = int(round(ev.offset * sample_rate))
        tone = render_tone(ev.pitch, (stop - start) / sample_rate, params, sample_rate)
        seg = tone[: max(0, min(len(tone), n_total - start))]
        audio[start : start + len(seg)] += (ev.velocity / 127.0) * seg
    peak = np.abs(audio).max()
    if peak > 0:
        audio *= params.peak / peak
    return AudioClip(audio, sample_rate)


def random_notes(rng: np.random.Generator, params: SynthParams) -> NoteSequence:
    """Poisson-timed notes with uniform pitch and duration, no same-pitch overlap."""
    total = rng.uniform(*params.duration)
    rate = rng.uniform(*params.density)
    free_at: dict[int, float] = {}
    notes = []
    t = rng.exponential(1.0 / rate)
    while t < total - params.note_duration[0]:
        pitch = int(rng.integers(params.pitch_range[0], params.pitch_range[1] + 1))
        dur = rng.uniform(*params.note_duration)
        # onsets land on the sample grid so rendering is exact
        onset = round(t * SAMPLE_RATE) / SAMPLE_RATE
        offset = round(min(onset + dur, total) * SAMPLE_RATE) / SAMPLE_RATE
        if onset >= free_at.get(pitch, -1.0) and offset > onset:
            vel = int(rng.integers(params.velocity[0], params.velocity[1] + 1))
            notes.append(NoteEvent(pitch, onset, offset, vel))
            free_at[pitch] = offset + params.same_pitch_gap
        t += rng.exponential(1.0 / rate)
    return NoteSequence(notes, duration=total)


def make_synthetic_dataset(
    seed: int, n_pieces: int, params: SynthParams | None = None
) -> list[tuple[AudioClip, NoteSequence]]:
    """Generate ``n_pieces`` (audio, annotation) pairs; a pure function of its arguments."""
    if n_pieces < 1:
        raise ValueError("n_pieces must be >= 1")
    params = (params or SynthParams()).clamped()
    out = []
    for child in np.random.SeedSequence(seed).spawn(n_pieces):
        rng = np.random.default_rng(child)
        notes = random_notes(rng, params)
        out.append((render_notes(notes, params), notes))
    return out
