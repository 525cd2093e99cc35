from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from onfattn.config import ConfigError, InferenceConfig, ModelConfig
from onfattn.constants import HOP_SECONDS
from onfattn.inference import BinaryRoll, roll_to_notes, rule_based_inference, threshold, transcribe
from onfattn.model import build_model


def roll(values) -> BinaryRoll:
    return BinaryRoll(np.asarray(values, dtype=np.uint8))


def column(T, *active, P=88, pitch=0):
    v = np.zeros((T, P), np.uint8)
    v[list(active), pitch] = 1
    return v


def test_threshold_is_inclusive():
    post = np.array([[0.49, 0.5, 0.51]])
    assert threshold(post, 0.5).values.tolist() == [[0, 1, 1]]
    with pytest.raises(ConfigError):
        threshold(post, 1.0)


def test_note_spans_onset_to_first_inactive_frame():
    frames = column(10, 2, 3, 4, 5)
    onsets = column(10, 2)
    notes = rule_based_inference(roll(onsets), roll(frames))
    assert len(notes) == 1
    n = notes.notes[0]
    assert n.pitch == 21 and n.onset == pytest.approx(2 * HOP_SECONDS) and n.offset == pytest.approx(6 * HOP_SECONDS)


def test_frames_without_onsets_are_removed():
    frames = column(10, 0, 1, 2, 6, 7)
    onsets = column(10, 6)
    notes = rule_based_inference(roll(onsets), roll(frames))
    assert [round(n.onset / HOP_SECONDS) for n in notes] == [6]


def test_reonset_splits_a_sustained_note():
    frames = column(10, *range(1, 9))
    onsets = column(10, 1, 5)
    notes = rule_based_inference(roll(onsets), roll(frames))
    assert [(round(n.onset / HOP_SECONDS), round(n.offset / HOP_SECONDS)) for n in notes] == [(1, 5), (5, 9)]


def test_multi_frame_onset_counts_once():
    frames = column(10, *range(1, 6))
    onsets = column(10, 1, 2)
    assert len(rule_based_inference(roll(onsets), roll(frames))) == 1


def test_orphan_onset_policy():
    onsets = column(6, 3)
    frames = column(6)
    assert len(rule_based_inference(roll(onsets), roll(frames))) == 1
    cfg = InferenceConfig(orphan_onsets="discard")
    assert len(rule_based_inference(roll(onsets), roll(frames), cfg)) == 0


def test_short_notes_padded_or_dropped():
    frames = column(10, 1, 2, 5)
    onsets = column(10, 1, 5)
    spans = lambda cfg: [  # noqa: E731
        (round(n.onset / HOP_SECONDS), round(n.offset / HOP_SECONDS))
        for n in rule_based_inference(roll(onsets), roll(frames), cfg)
    ]
    assert spans(InferenceConfig(min_note_frames=2)) == [(1, 3), (5, 7)]
    assert spans(InferenceConfig(min_note_frames=2, orphan_onsets="discard")) == [(1, 3)]


@given(frames=arrays(np.uint8, st.tuples(st.integers(1, 30), st.integers(1, 88)), elements=st.integers(0, 1)))
def test_zero_onsets_give_zero_notes(frames):
    zero = np.zeros_like(frames)
    if frames.shape[1] != 88:
        return
    assert len(rule_based_inference(roll(zero), roll(frames))) == 0


def test_roll_shape_mismatch():
    with pytest.raises(ValueError):
        rule_based_inference(roll(np.zeros((3, 88))), roll(np.zeros((4, 88))))


def test_roll_to_notes_extracts_runs():
    frames = column(8, 0, 1, 4, 5, 6)
    notes = roll_to_notes(roll(frames))
    assert [(round(n.onset / HOP_SECONDS), round(n.offset / HOP_SECONDS)) for n in notes] == [(0, 2), (4, 7)]


def test_transcribe_modes_and_external_onsets():
    model = build_model(ModelConfig(variant="linear_probe", n_bins=16))
    spec = np.random.default_rng(0).random((20, 16))
    off = transcribe(model, spec, use_inference=False)
    assert off.roll.values.shape == (20, 88) and off.onset_posteriorgram is None
    with pytest.raises(ConfigError):
        transcribe(model, spec, use_inference=True)
    ext = np.zeros((20, 88))
    on = transcribe(model, spec, use_inference=True, external_onsets=ext)
    assert len(on.notes) == 0 and on.roll.values.sum() == 0
    with pytest.raises(ValueError):
        transcribe(model, spec, external_onsets=np.zeros((5, 88)))
