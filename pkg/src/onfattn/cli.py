"""Command-line entry point: ``onfattn <subcommand> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .arrays import load_arrays, save_arrays
from .config import ConfigError, PROBES, RunConfig, load_run_config, save_run_config
from .dataio import load_audio
from .datasets import load_splits, write_synthetic_corpus
from .evaluation import EvalReport, evaluate_recording, export_attention_maps
from .experiments import (
    DEFAULT_D_VALUES,
    Cell,
    ExperimentSpec,
    all_succeeded,
    run_ablation,
    run_attention_comparison,
    run_dsweep,
)
from .frontend import Spectrogram, mel_spectrogram
from .inference import BinaryRoll, notes_to_midi, transcribe
from .training import load_checkpoint, train_run

logger = logging.getLogger("onfattn")


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config, list(args.set or []) + list(args.overrides or []), preset=args.preset)
    if args.seed is not None:
        cfg.data.seed = cfg.model.seed = cfg.train.seed = args.seed
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _modes(text: str) -> tuple[str, ...]:
    return tuple(m for m in text.split(",") if m)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    manifest = write_synthetic_corpus(cfg.data, _out(args, "data"))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/train")
    save_run_config(cfg, out / "run_config.yaml")
    splits = load_splits(cfg.data)
    result = train_run(splits["train"], cfg.model, cfg.train, out, valid_pieces=splits["valid"])
    use_inference = cfg.model.has_onset_stack
    report = _evaluate(result.model, splits["test"], cfg, use_inference)
    metrics = {"steps": cfg.train.max_steps, "final_loss": result.losses[-1].total if result.losses else None,
               "mode": "inference" if use_inference else "frames", **report.summary()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(result.checkpoint)
    return 0


def _evaluate(model, pieces, cfg: RunConfig, use_inference: bool, export_dir=None, n_export=0) -> EvalReport:
    report = EvalReport()
    for i, piece in enumerate(pieces):
        tr = transcribe(model, piece.spec, cfg.inference, use_inference=use_inference)
        truth = BinaryRoll(piece.labels.frame_roll, piece.labels.hop_seconds)
        report.rows.append(evaluate_recording(piece.id, tr.notes, tr.roll, piece.notes, truth))
        if export_dir is not None and i < n_export:
            onsets = np.flatnonzero(piece.labels.onset_roll.any(axis=1))
            export_attention_maps(tr.attention, model.cfg.window_D, piece.id, export_dir, onsets, model.cfg.attention_target)
    return report


def _load_spec(path: Path, log_eps: float) -> np.ndarray:
    if path.suffix == ".npz":
        return Spectrogram.load(path).values
    return mel_spectrogram(load_audio(path), log_eps).values


def cmd_transcribe(args) -> int:
    cfg = _config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    spec = _load_spec(Path(args.input), cfg.data.log_eps)
    external = None
    if args.external_onsets:
        _, arrays = load_arrays(args.external_onsets)
        external = arrays["onset_posteriorgram"]
    tr = transcribe(model, spec, cfg.inference, use_inference=not args.no_inference, external_onsets=external)
    out = Path(args.out or Path(args.input).with_suffix(".mid"))
    notes_to_midi(tr.notes, out)
    if args.dump_posteriorgrams:
        arrays = {"frame_posteriorgram": tr.frame_posteriorgram}
        if tr.onset_posteriorgram is not None:
            arrays["onset_posteriorgram"] = tr.onset_posteriorgram
        save_arrays(args.dump_posteriorgrams, {"kind": "posteriorgrams"}, **arrays)
    print(f"{out}: {len(tr.notes)} notes")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/evaluate")
    model, model_cfg, _ = load_checkpoint(args.checkpoint)
    use_inference = not args.no_inference
    if use_inference and not model_cfg.has_onset_stack:
        raise ConfigError("this model has no onset stack; pass --no-inference")
    pieces = load_splits(cfg.data)[args.split]
    report = _evaluate(model, pieces, cfg, use_inference, out / "attention", args.export_attention)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    summary = report.summary()
    print(" ".join(f"{fam}_f1={summary[f'{fam}_f1'] * 100:.2f}" for fam in ("frame", "note", "note_offset")))
    return 0


def _ablation_cells(cfg: RunConfig, variants: list[str], attention: list[int | None], modes) -> tuple[list[Cell], str]:
    """Variant x attention matrix; models without an onset stack borrow one from a full-model cell."""
    cells: list[Cell] = []
    need_onsets = any(v not in ("full", "no_bilstm") for v in variants) and "inference" in modes
    source = None
    if need_onsets:
        source = "onset_source"
        full = replace(cfg.model, variant="full", attention_target="none")
        if not ("full" in variants and None in attention):
            cells.append(Cell(source, full, cfg.train, cfg.inference, modes=()))
        else:
            source = "full"
    for variant in variants:
        for D in attention:
            target = "none" if D is None else "spec"
            model = replace(cfg.model, variant=variant, attention_target=target, window_D=D if D is not None else cfg.model.window_D)
            cell_id = variant if D is None else f"{variant}_D{D}"
            onset_from = source if variant not in ("full", "no_bilstm") else None
            cells.append(Cell(cell_id, model, cfg.train, cfg.inference, modes, onset_from))
    scored = [c for c in cells if c.modes]
    return cells, scored[0].id


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/ablate")
    variants = [v for v in args.variants.split(",") if v]
    attention = [None] + [int(d) for d in args.attention_d.split(",") if d]
    cells, baseline = _ablation_cells(cfg, variants, attention, _modes(args.modes))
    spec = ExperimentSpec(cells, cfg.data, out, baseline=args.baseline or baseline)
    rows = run_ablation(spec)
    print(out / "ablation.csv")
    return 0 if all_succeeded(rows) else 1


def cmd_dsweep(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/dsweep")
    variant = args.variant or (cfg.model.variant if cfg.model.variant in PROBES else "linear_probe")
    base = Cell("base", replace(cfg.model, variant=variant), cfg.train, cfg.inference, _modes(args.modes))
    d_values = [int(d) for d in args.d_values.split(",")] if args.d_values else list(DEFAULT_D_VALUES)
    rows = run_dsweep(base, d_values, cfg.data, out)
    print(out / "dsweep.csv")
    return 0 if all_succeeded(rows) else 1


def cmd_attn_compare(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/attn_compare")
    base = Cell("base", replace(cfg.model, variant="full"), cfg.train, cfg.inference, _modes(args.modes))
    targets = [t for t in args.targets.split(",") if t]
    rows = run_attention_comparison(base, cfg.data, out, targets, n_export=args.export_attention)
    print(out / "attention_comparison.csv")
    return 0 if all_succeeded(rows) else 1


def cmd_spectrogram_dump(args) -> int:
    cfg = _config(args)
    spec = mel_spectrogram(load_audio(args.input), cfg.data.log_eps)
    out = spec.save(args.out or Path(args.input).with_suffix(".npz"))
    print(f"{out}: {spec.n_frames} frames x {spec.n_bins} bins")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config layered over the preset")
    common.add_argument("--preset", default="desk", choices=["desk", "reference"], help="base configuration (default: desk)")
    common.add_argument("--seed", type=int, help="sets data, model and training seeds")
    common.add_argument("--out", help="output directory (or file, for transcribe / spectrogram-dump)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted-path overrides, e.g. train.max_steps=500")

    parser = argparse.ArgumentParser(prog="onfattn", description="Onsets-and-Frames with local attention: train, transcribe, evaluate, study.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="render the synthetic corpus to WAV/MIDI + manifest")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", parents=[common], help="audio (or spectrogram .npz) to MIDI")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--no-inference", action="store_true", help="notes from frame runs instead of rule-based decoding")
    p.add_argument("--external-onsets", help="array file holding onset_posteriorgram (e.g. from --dump-posteriorgrams)")
    p.add_argument("--dump-posteriorgrams", help="write frame/onset posteriorgrams to this array file")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a data split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--no-inference", action="store_true")
    p.add_argument("--export-attention", type=int, default=0, metavar="N", help="export maps for the first N recordings")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="variant x attention x inference table")
    p.add_argument("--variants", default="linear_probe,conv_probe,no_onset_stack,no_bilstm,full")
    p.add_argument("--attention-d", default="5", help="comma-separated D values for attention cells ('' for none)")
    p.add_argument("--modes", default="frames,inference")
    p.add_argument("--baseline", help="cell id for the Wilcoxon tests (default: first scored cell)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dsweep", parents=[common], help="attention window sweep on a probe")
    p.add_argument("--variant", choices=list(PROBES))
    p.add_argument("--d-values", help=f"comma-separated (default {','.join(map(str, DEFAULT_D_VALUES))})")
    p.add_argument("--modes", default="frames")
    p.set_defaults(func=cmd_dsweep)

    p = sub.add_parser("attn-compare", parents=[common], help="attended-feature comparison on the full model")
    p.add_argument("--targets", default="spec,onset,feat")
    p.add_argument("--modes", default="inference")
    p.add_argument("--export-attention", type=int, default=2, metavar="N")
    p.set_defaults(func=cmd_attn_compare)

    p = sub.add_parser("spectrogram-dump", parents=[common], help="write the normalized log-mel spectrogram of a WAV")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_spectrogram_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        logger.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
