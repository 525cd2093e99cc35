"""Experiment cells, the ablation / window-sweep / attention-target studies, and their tables."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import (
    ConfigError,
    DataConfig,
    InferenceConfig,
    ModelConfig,
    PROBES,
    TrainConfig,
    config_hash,
    save_run_config,
    to_dict,
)
from .datasets import Piece, load_splits
from .evaluation import FAMILIES, EvalReport, evaluate_recording, export_attention_maps, paired_p_value
from .inference import BinaryRoll, transcribe
from .model import predict
from .training import load_checkpoint, train_run

logger = logging.getLogger(__name__)

MODES = ("inference", "frames")
DEFAULT_D_VALUES = (1, 5, 10, 15, 20, 25, 30)


@dataclass
class Cell:
    """One trained model scored under one or both decoding modes.

    ``modes`` holds ``"inference"`` (rule-based decoding) and/or ``"frames"``
    (runs of the thresholded frame posteriorgram); a cell with no modes is
    only trained when another cell needs its onsets. ``onset_from`` names
    another cell whose onset posteriorgrams drive the rule-based decoding,
    for models that have no onset stack of their own.
    """

    id: str
    model: ModelConfig
    train: TrainConfig
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    modes: tuple[str, ...] = ("inference",)
    onset_from: str | None = None
    export_attention: int = 0  # number of test recordings to export maps for


@dataclass
class ExperimentSpec:
    cells: list[Cell]
    data: DataConfig
    out_dir: Path
    baseline: str | None = None

    def validate(self) -> "ExperimentSpec":
        ids = [c.id for c in self.cells]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"cell ids must be unique: {ids}")
        if self.baseline is not None and self.baseline not in ids:
            raise ConfigError(f"baseline cell {self.baseline!r} is not in the experiment")
        by_id = {c.id: c for c in self.cells}
        for c in self.cells:
            c.model.validate()
            c.train.validate()
            c.inference.validate()
            bad = set(c.modes) - set(MODES)
            if bad:
                raise ConfigError(f"cell {c.id}: modes must be drawn from {MODES}")
            if c.onset_from is not None:
                src = by_id.get(c.onset_from)
                if src is None or not src.model.has_onset_stack:
                    raise ConfigError(f"cell {c.id}: onset source {c.onset_from!r} must be a cell with an onset stack")
        return self


def _row_key(cell_id: str, mode: str) -> str:
    return f"{cell_id}/{mode}"


class Runner:
    """Trains cells on demand (memoised by config hash) and scores them on the test split."""

    def __init__(self, data: DataConfig, out_dir, splits: dict[str, list[Piece]] | None = None):
        self.data = data
        self.out_dir = Path(out_dir)
        self.splits = splits if splits is not None else load_splits(data)
        self._models: dict[str, object] = {}
        self._onsets: dict[str, list[np.ndarray]] = {}

    def train_key(self, cell: Cell) -> str:
        return config_hash({"data": to_dict(self.data), "model": to_dict(cell.model), "train": to_dict(cell.train)})

    def model_for(self, cell: Cell):
        key = self.train_key(cell)
        if key in self._models:
            return self._models[key]
        run_dir = self.out_dir / "runs" / key
        final = run_dir / "final.pt"
        if final.exists():
            logger.info("cell %s: reusing %s", cell.id, final)
            model = load_checkpoint(final, expected=cell.model)[0].eval()
        else:
            logger.info("cell %s: training %d steps", cell.id, cell.train.max_steps)
            run_dir.mkdir(parents=True, exist_ok=True)
            save_run_config({"data": to_dict(self.data)}, run_dir / "data.yaml")
            model = train_run(
                self.splits["train"], cell.model, cell.train, run_dir, valid_pieces=self.splits["valid"]
            ).model
        self._models[key] = model
        return model

    def onset_posteriors(self, cell: Cell) -> list[np.ndarray]:
        key = self.train_key(cell)
        if key not in self._onsets:
            model = self.model_for(cell)
            self._onsets[key] = [
                predict(model, p.spec).y_onset_hat[0].cpu().numpy().astype(np.float64) for p in self.splits["test"]
            ]
        return self._onsets[key]

    def score(self, cell: Cell, mode: str, by_id: dict[str, Cell]) -> EvalReport:
        model = self.model_for(cell)
        external = self.onset_posteriors(by_id[cell.onset_from]) if cell.onset_from and mode == "inference" else None
        cell_dir = self.out_dir / "cells" / cell.id
        report = EvalReport()
        for i, piece in enumerate(self.splits["test"]):
            tr = transcribe(
                model, piece.spec, cell.inference, use_inference=(mode == "inference"),
                external_onsets=None if external is None else external[i],
            )
            truth_roll = BinaryRoll(piece.labels.frame_roll, piece.labels.hop_seconds)
            report.rows.append(evaluate_recording(piece.id, tr.notes, tr.roll, piece.notes, truth_roll))
            if i < cell.export_attention and mode == cell.modes[0]:
                onset_frames = np.flatnonzero(piece.labels.onset_roll.any(axis=1))
                export_attention_maps(
                    tr.attention, cell.model.window_D, piece.id, cell_dir / "attention", onset_frames,
                    cell.model.attention_target,
                )
        report.to_json(cell_dir / mode / "report.json")
        report.to_csv(cell_dir / mode / "report.csv")
        return report


def _summary_row(cell: Cell, mode: str, report: EvalReport) -> dict:
    row = {"cell": cell.id, "mode": mode, "status": "ok", "n": len(report.rows)}
    row.update(report.summary())
    return row


def _failed_row(cell: Cell, mode: str, err: Exception) -> dict:
    return {"cell": cell.id, "mode": mode, "status": "failed", "error": f"{type(err).__name__}: {err}"}


def run_experiment(spec: ExperimentSpec, runner: Runner | None = None) -> tuple[list[dict], dict[str, EvalReport]]:
    """Score every (cell, mode); failures are recorded and the remaining cells still run.

    Each ok row gets Wilcoxon p-values (``<family>_p``) on per-recording F1
    against the baseline cell's row with the same mode, when there is one.
    """
    spec.validate()
    runner = runner or Runner(spec.data, spec.out_dir)
    by_id = {c.id: c for c in spec.cells}
    rows: list[dict] = []
    reports: dict[str, EvalReport] = {}
    for cell in spec.cells:
        cell_dir = Path(spec.out_dir) / "cells" / cell.id
        save_run_config(
            {"data": to_dict(spec.data), "model": to_dict(cell.model), "train": to_dict(cell.train),
             "inference": to_dict(cell.inference), "modes": list(cell.modes), "onset_from": cell.onset_from},
            cell_dir / "config.yaml",
        )
        for mode in cell.modes:
            try:
                report = runner.score(cell, mode, by_id)
            except Exception as err:  # one bad cell must not sink the table
                logger.exception("cell %s (%s) failed", cell.id, mode)
                rows.append(_failed_row(cell, mode, err))
                continue
            reports[_row_key(cell.id, mode)] = report
            rows.append(_summary_row(cell, mode, report))
    add_p_values(rows, reports, spec.baseline)
    return rows, reports


def add_p_values(rows: list[dict], reports: dict[str, EvalReport], baseline: str | None) -> None:
    if baseline is None:
        return
    for row in rows:
        if row["status"] != "ok":
            continue
        base = reports.get(_row_key(baseline, row["mode"]))
        mine = reports[_row_key(row["cell"], row["mode"])]
        for fam in FAMILIES:
            row[f"{fam}_p"] = paired_p_value(mine.values(fam), base.values(fam)) if base is not None else math.nan


def write_table(rows: list[dict], columns: list[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})
    path.with_suffix(".json").write_text(json.dumps(rows, indent=1, default=float))
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def all_succeeded(rows: list[dict]) -> bool:
    return all(r.get("status") == "ok" for r in rows)


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

F1_COLUMNS = [c for fam in FAMILIES for c in (f"{fam}_f1", f"{fam}_f1_std")]
P_COLUMNS = [f"{fam}_p" for fam in FAMILIES]
ABLATION_COLUMNS = ["cell", "mode", "status", "n", *F1_COLUMNS, *P_COLUMNS, "error"]
PRF_COLUMNS = [f"{fam}_{m}" for fam in FAMILIES for m in ("precision", "recall", "f1")]
COMPARISON_COLUMNS = ["cell", "mode", "status", "n", *PRF_COLUMNS, *(c + "_std" for c in PRF_COLUMNS), *P_COLUMNS, "error"]


def run_ablation(spec: ExperimentSpec, runner: Runner | None = None) -> list[dict]:
    """Table-2-style study: F1 mean/std per (cell, mode) plus p-values vs the baseline."""
    rows, _ = run_experiment(spec, runner)
    write_table(rows, ABLATION_COLUMNS, Path(spec.out_dir) / "ablation.csv")
    return rows


def run_dsweep(
    base: Cell, d_values, data: DataConfig, out_dir, runner: Runner | None = None
) -> list[dict]:
    """Train ``base`` once without attention and once per window size ``D`` (attending to the spectrogram).

    Writes ``dsweep.csv`` (one row per D, with the baseline's F1 embedded as
    ``base_*`` columns) and ``dsweep.png`` rendered from that CSV.
    """
    d_values = [int(d) for d in d_values]
    if len(set(d_values)) != len(d_values):
        raise ConfigError(f"duplicate D values: {d_values}")
    if base.model.variant not in PROBES:
        raise ConfigError("the window sweep runs on a probe variant (linear_probe or conv_probe)")
    out_dir = Path(out_dir)
    baseline = replace(base, id="baseline", model=replace(base.model, attention_target="none"))
    cells = [baseline] + [
        replace(base, id=f"D{d}", model=replace(base.model, attention_target="spec", window_D=d)) for d in d_values
    ]
    spec = ExperimentSpec(cells, data, out_dir, baseline="baseline")
    rows, _ = run_experiment(spec, runner)
    base_rows = {r["mode"]: r for r in rows if r["cell"] == "baseline"}
    table = []
    for d, r in zip(d_values, [r for r in rows if r["cell"] != "baseline"]):
        row = {"D": d, **r}
        b = base_rows.get(r["mode"], {})
        for fam in FAMILIES:
            row[f"base_{fam}_f1"] = b.get(f"{fam}_f1", math.nan)
            row[f"base_{fam}_f1_std"] = b.get(f"{fam}_f1_std", math.nan)
        table.append(row)
    columns = ["D", *ABLATION_COLUMNS[:4], *F1_COLUMNS, *P_COLUMNS,
               *(f"base_{fam}_f1{s}" for fam in FAMILIES for s in ("", "_std")), "error"]
    csv_path = write_table(table, columns, out_dir / "dsweep.csv")
    replot_dsweep(csv_path, out_dir / "dsweep.png")
    return table


def replot_dsweep(csv_path, png_path) -> Path | None:
    """Render the sweep figure purely from the stored CSV."""
    rows = [r for r in read_table(csv_path) if r["status"] == "ok"]
    if not rows:
        return None
    return plotting.dsweep_figure(rows, png_path)


def run_attention_comparison(
    base: Cell, data: DataConfig, out_dir, targets=("spec", "onset", "feat"), runner: Runner | None = None,
    n_export: int = 2,
) -> list[dict]:
    """Attended-feature study on the full model: a no-attention baseline and one row per attended feature."""
    if base.model.variant != "full":
        raise ConfigError("the attention-target comparison runs on the full model")
    baseline = replace(base, id="baseline", model=replace(base.model, attention_target="none"), export_attention=0)
    cells = [baseline] + [
        replace(base, id=f"attn_{t}", model=replace(base.model, attention_target=t), export_attention=n_export)
        for t in targets
    ]
    spec = ExperimentSpec(cells, data, Path(out_dir), baseline="baseline")
    rows, _ = run_experiment(spec, runner)
    write_table(rows, COMPARISON_COLUMNS, Path(out_dir) / "attention_comparison.csv")
    return rows

