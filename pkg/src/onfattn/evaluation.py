"""Frame, note and note-with-offset scoring, paired tests, and attention-map export."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

from . import kernels, plotting
from .arrays import load_arrays, save_arrays
from .config import ConfigError
from .dataio import NoteSequence
from .inference import BinaryRoll

logger = logging.getLogger(__name__)

# onset/offset comparisons tolerate float noise from frame quantization
_TIME_EPS = 1e-9
FAMILIES = ("frame", "note", "note_offset")


@dataclass(frozen=True)
class MetricTriple:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, n_match: int, n_pred: int, n_true: int) -> "MetricTriple":
        if n_pred == 0 and n_true == 0:
            return cls(1.0, 1.0, 1.0)
        p = n_match / n_pred if n_pred else 0.0
        r = n_match / n_true if n_true else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


@dataclass(frozen=True)
class Tolerance:
    onset_tol: float = 0.05
    offset_tol_abs: float = 0.05
    offset_tol_ratio: float = 0.2

    def __post_init__(self):
        if min(self.onset_tol, self.offset_tol_abs, self.offset_tol_ratio) <= 0:
            raise ValueError("tolerances must be positive")


def frame_metrics(pred: BinaryRoll, truth: BinaryRoll) -> MetricTriple:
    p, t = np.asarray(pred.values, bool), np.asarray(truth.values, bool)
    if p.shape != t.shape:
        raise ValueError(f"roll shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    return MetricTriple.from_counts(tp, int(p.sum()), int(t.sum()))


def _candidate_edges(pred: NoteSequence, truth: NoteSequence, tol: Tolerance, with_offset: bool):
    """CSR adjacency from truth notes (left) to admissible predicted notes (right)."""
    tp, to, tf = truth.pitches, truth.onsets, truth.offsets
    pp, po, pf = pred.pitches, pred.onsets, pred.offsets
    ok = (tp[:, None] == pp[None, :]) & (np.abs(to[:, None] - po[None, :]) <= tol.onset_tol + _TIME_EPS)
    if with_offset:
        off_tol = np.maximum(tol.offset_tol_abs, tol.offset_tol_ratio * (tf - to))
        ok &= np.abs(tf[:, None] - pf[None, :]) <= off_tol[:, None] + _TIME_EPS
    rows, cols = np.nonzero(ok)
    indptr = np.zeros(len(truth) + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=len(truth)), out=indptr[1:])
    return indptr, cols.astype(np.int64)


def match_notes(pred: NoteSequence, truth: NoteSequence, tol: Tolerance | None = None, with_offset: bool = False):
    """Maximum one-to-one matching. Returns ``(truth_idx, pred_idx)`` arrays of matched pairs."""
    tol = tol or Tolerance()
    if len(pred) == 0 or len(truth) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    indptr, indices = _candidate_edges(pred, truth, tol, with_offset)
    m = kernels.bipartite_match(indptr, indices, len(pred))
    left = np.flatnonzero(m >= 0)
    return left, m[left]


def note_metrics(pred: NoteSequence, truth: NoteSequence, tol: Tolerance | None = None) -> MetricTriple:
    n = len(match_notes(pred, truth, tol)[0])
    return MetricTriple.from_counts(n, len(pred), len(truth))


def note_with_offset_metrics(pred: NoteSequence, truth: NoteSequence, tol: Tolerance | None = None) -> MetricTriple:
    n = len(match_notes(pred, truth, tol, with_offset=True)[0])
    return MetricTriple.from_counts(n, len(pred), len(truth))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    signed_sum: float  # W+ - W-
    p_value: float
    n: int  # nonzero differences
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def wilcoxon_signed_rank(a, b, exact_max: int = 25) -> WilcoxonResult:
    """Two-sided paired signed-rank test; zero differences are dropped and ties get average ranks.

    The exact null distribution (via sign-assignment counts over doubled
    ranks, so tied half-ranks stay integral) is used up to ``exact_max``
    nonzero pairs, the continuity-corrected normal approximation beyond.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 1.0, 0, "degenerate")
    if n < 5:
        raise ValueError(f"need at least 5 nonzero paired differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    total = n * (n + 1) / 2
    if n <= exact_max:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = kernels.signed_rank_counts(doubled)
        pmf = counts / counts.sum()
        w2 = int(round(2 * w_plus))
        lower = pmf[: w2 + 1].sum()
        upper = pmf[w2:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts**3 - tie_counts).sum() / 48
        z = max(0.0, abs(w_plus - total / 2) - 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * float(norm.sf(z)))
        method = "normal"
    return WilcoxonResult(min(w_plus, w_minus), w_plus - w_minus, float(p), n, method)


def paired_p_value(a, b) -> float:
    """p-value for table cells: NaN when the sample is too small to test."""
    try:
        return wilcoxon_signed_rank(a, b).p_value
    except ValueError:
        return float("nan")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    recording: str
    frame: MetricTriple
    note: MetricTriple
    note_offset: MetricTriple

    def flat(self) -> dict:
        out: dict = {"recording": self.recording}
        for fam in FAMILIES:
            for k, v in asdict(getattr(self, fam)).items():
                out[f"{fam}_{k}"] = v
        return out


def evaluate_recording(
    recording: str,
    pred_notes: NoteSequence | None,
    pred_roll: BinaryRoll | None,
    truth_notes: NoteSequence | None,
    truth_roll: BinaryRoll | None,
    tol: Tolerance | None = None,
) -> EvalRow:
    """Score one recording.

    ``pred_roll`` should be the roll the transcription produced: the note
    roll when rule-based inference is on, the thresholded frame
    posteriorgram when it is off (``inference.transcribe`` does this).
    """
    if pred_notes is None or pred_roll is None or truth_notes is None or truth_roll is None:
        raise ValueError("evaluate_recording needs note events and rolls for both prediction and truth")
    return EvalRow(
        recording,
        frame_metrics(pred_roll, truth_roll),
        note_metrics(pred_notes, truth_notes, tol),
        note_with_offset_metrics(pred_notes, truth_notes, tol),
    )


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def values(self, family: str, metric: str = "f1") -> np.ndarray:
        return np.array([getattr(getattr(r, family), metric) for r in self.rows], dtype=np.float64)

    def summary(self) -> dict[str, float]:
        """Unweighted mean and sample std over recordings for every metric."""
        out: dict[str, float] = {}
        for fam in FAMILIES:
            for metric in ("precision", "recall", "f1"):
                v = self.values(fam, metric)
                out[f"{fam}_{metric}"] = float(v.mean()) if v.size else float("nan")
                out[f"{fam}_{metric}_std"] = _std(v)
        return out

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"rows": [r.flat() for r in self.rows], "summary": self.summary()}
        path.write_text(json.dumps(payload, indent=1))
        return path

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        payload = json.loads(Path(path).read_text())
        rows = []
        for flat in payload["rows"]:
            triples = {
                fam: MetricTriple(flat[f"{fam}_precision"], flat[f"{fam}_recall"], flat[f"{fam}_f1"]) for fam in FAMILIES
            }
            rows.append(EvalRow(flat["recording"], **triples))
        return cls(rows)

    def to_csv(self, path) -> Path:
        """One row per recording followed by ``mean`` and ``std`` summary rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        flats = [r.flat() for r in self.rows]
        fields = ["recording"] + [f"{fam}_{m}" for fam in FAMILIES for m in ("precision", "recall", "f1")]
        summ = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(flats)
            w.writerow({"recording": "mean", **{k: summ[k] for k in fields[1:]}})
            w.writerow({"recording": "std", **{k: summ[k + "_std"] for k in fields[1:]}})
        return path


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def export_attention_maps(
    attention: np.ndarray | None, D: int, recording: str, out_dir, onset_frames=None, target: str = ""
) -> dict[str, Path | None]:
    """Save ``(T, 2D+1)`` weights as an array file and a heatmap with onset markers."""
    if attention is None:
        raise ConfigError("attention maps requested but the model runs without attention")
    w = np.asarray(attention, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != 2 * D + 1:
        raise ValueError(f"expected (T, {2 * D + 1}) weights, got {w.shape}")
    out_dir = Path(out_dir)
    arrays = {"weights": w}
    if onset_frames is not None:
        arrays["onset_frames"] = np.asarray(onset_frames, dtype=np.int64)
    npz = save_arrays(out_dir / f"{recording}_attention.npz", {"kind": "attention", "D": D, "target": target}, **arrays)
    png = plotting.attention_heatmap(w, D, out_dir / f"{recording}_attention.png", onset_frames, f"{recording} {target}")
    return {"array": npz, "image": png}


def load_attention_map(path) -> tuple[dict, np.ndarray]:
    header, arrays = load_arrays(path)
    if header.get("kind") != "attention":
        raise ValueError(f"{path} is not an attention map")
    return header, arrays["weights"]
