"""Optimization with the onset + frame binary cross-entropy objective."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ModelConfig, TrainConfig, config_hash, from_dict, save_run_config, to_dict
from .datasets import Piece
from .model import build_model, model_dtype

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossValue:
    total: float
    onset_term: float
    frame_term: float


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean elementwise binary cross entropy on probabilities clamped to ``[eps, 1-eps]``."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def compute_loss(model, spec, onset_target, frame_target, cfg: TrainConfig):
    """Return the differentiable total and its two components (omitted terms are 0)."""
    out = model(spec)
    zero = spec.new_zeros(())
    frame_term = bce_loss(out.y_frame_hat, frame_target, cfg.bce_eps) if cfg.frame_loss else zero
    if cfg.onset_loss and out.y_onset_hat is not None:
        onset_term = bce_loss(out.y_onset_hat, onset_target, cfg.bce_eps)
    else:
        onset_term = zero
    return onset_term + frame_term, onset_term, frame_term


def make_optimizer(model, cfg: TrainConfig, lr: float | None = None) -> torch.optim.Adam:
    lr = cfg.learning_rate if lr is None else lr
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def train_step(model, optimizer, batch: dict[str, torch.Tensor], cfg: TrainConfig, batch_id=None) -> LossValue:
    """One Adam update on ``batch`` (keys ``spec``, ``onset``, ``frame``); parameters change in place."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, onset_term, frame_term = compute_loss(model, batch["spec"], batch["onset"], batch["frame"], cfg)
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total.item()} on batch {batch_id}")
    total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossValue(float(total.item()), float(onset_term.item()), float(frame_term.item()))


class WindowSampler:
    """Uniform random training windows: a random piece, then a random start inside it."""

    def __init__(self, pieces: list[Piece], window: int, batch_size: int, seed: int):
        if not pieces:
            raise ConfigError("training split is empty")
        self.pieces = pieces
        self.window = window
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def next_batch(self, dtype=torch.float32) -> tuple[dict[str, torch.Tensor], list[tuple[int, int]]]:
        n_bins = self.pieces[0].spec.shape[1]
        spec = np.zeros((self.batch_size, self.window, n_bins), dtype=np.float64)
        onset = np.zeros((self.batch_size, self.window, 88), dtype=np.float64)
        frame = np.zeros_like(onset)
        ids = []
        for b in range(self.batch_size):
            i = int(self.rng.integers(len(self.pieces)))
            piece = self.pieces[i]
            start = int(self.rng.integers(max(1, piece.n_frames - self.window + 1)))
            stop = min(start + self.window, piece.n_frames)
            n = stop - start
            spec[b, :n] = piece.spec[start:stop]
            onset[b, :n] = piece.labels.onset_roll[start:stop]
            frame[b, :n] = piece.labels.frame_roll[start:stop]
            ids.append((i, start))
        batch = {
            "spec": torch.as_tensor(spec, dtype=dtype),
            "onset": torch.as_tensor(onset, dtype=dtype),
            "frame": torch.as_tensor(frame, dtype=dtype),
        }
        return batch, ids

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, model_cfg: ModelConfig, optimizer=None, step: int = 0, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": to_dict(model_cfg),
        "config_hash": config_hash(model_cfg),
        "state_dict": model.state_dict(),
        "step": step,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Rebuild a model from a checkpoint. Returns ``(model, model_cfg, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    cfg = from_dict(ModelConfig, payload["model_config"])
    if config_hash(cfg) != payload["config_hash"]:
        raise ValueError(f"{path}: config echo does not match its stored hash")
    if expected is not None and config_hash(expected) != payload["config_hash"]:
        raise ValueError(f"{path}: checkpoint was trained with a different model config")
    model = build_model(cfg)
    own = model.state_dict()
    for name, tensor in payload["state_dict"].items():
        if name not in own:
            raise ValueError(f"{path}: unexpected parameter {name}")
        if own[name].shape != tensor.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(own[name].shape)}")
    missing = set(own) - set(payload["state_dict"])
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    model.load_state_dict(payload["state_dict"])
    return model, cfg, payload


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list[LossValue]
    run_dir: Path | None = None
    checkpoint: Path | None = None
    val_losses: list[tuple[int, float]] = field(default_factory=list)


def _mean_loss(model, pieces: list[Piece], cfg: TrainConfig) -> float:
    model.eval()
    dtype = model_dtype(model)
    vals = []
    with torch.no_grad():
        for piece in pieces:
            spec = torch.as_tensor(piece.spec[None], dtype=dtype)
            onset = torch.as_tensor(piece.labels.onset_roll[None], dtype=dtype)
            frame = torch.as_tensor(piece.labels.frame_roll[None], dtype=dtype)
            vals.append(compute_loss(model, spec, onset, frame, cfg)[0].item())
    model.train()
    return float(np.mean(vals)) if vals else float("nan")


def train_run(
    train_pieces: list[Piece],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    run_dir=None,
    valid_pieces: list[Piece] | None = None,
    resume_from=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train for ``train_cfg.max_steps`` steps on uniformly sampled windows.

    With ``run_dir`` the run writes ``config.yaml``, ``loss.csv`` (one row per
    step), ``val_loss.csv``, periodic ``checkpoints/step_*.pt`` and a final
    ``final.pt`` tagged with the model-config hash. ``resume_from`` continues
    a checkpoint written by this function, restoring optimizer and sampler
    state so the continuation matches an uninterrupted run. ``stop_after``
    ends the loop early (used to simulate interruption).
    """
    model_cfg.validate()
    train_cfg.validate()
    if not train_pieces:
        raise ConfigError("training split is empty")
    model = build_model(model_cfg)
    dtype = model_dtype(model)
    optimizer = make_optimizer(model, train_cfg, train_cfg.learning_rate_for(model_cfg.variant))
    sampler = WindowSampler(train_pieces, train_cfg.window_frames, train_cfg.batch_size, train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    start_step = 0
    if resume_from is not None:
        loaded, _, payload = load_checkpoint(resume_from, expected=model_cfg)
        model.load_state_dict(loaded.state_dict())
        optimizer.load_state_dict(payload["optimizer"])
        sampler.set_state(payload["extra"]["sampler_state"])
        torch.set_rng_state(payload["extra"]["torch_rng"])
        start_step = payload["step"]

    run_dir = Path(run_dir) if run_dir is not None else None
    loss_writer = loss_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_run_config({"model": to_dict(model_cfg), "train": to_dict(train_cfg)}, run_dir / "config.yaml")
        new = resume_from is None or not (run_dir / "loss.csv").exists()
        loss_file = open(run_dir / "loss.csv", "w" if new else "a", newline="")
        loss_writer = csv.writer(loss_file)
        if new:
            loss_writer.writerow(["step", "total", "onset", "frame"])

    def snapshot(step: int, path: Path):
        extra = {"sampler_state": sampler.state(), "torch_rng": torch.get_rng_state(), "train_config": to_dict(train_cfg)}
        return save_checkpoint(path, model, model_cfg, optimizer, step, extra)

    losses: list[LossValue] = []
    val_losses: list[tuple[int, float]] = []
    end_step = train_cfg.max_steps if stop_after is None else min(train_cfg.max_steps, stop_after)
    try:
        for step in range(start_step, end_step):
            batch, ids = sampler.next_batch(dtype)
            try:
                loss = train_step(model, optimizer, batch, train_cfg, batch_id=ids)
            except TrainingDiverged:
                if run_dir is not None:
                    np.savez(run_dir / f"diverged_step{step}.npz", **{k: v.numpy() for k, v in batch.items()})
                    (run_dir / f"diverged_step{step}.json").write_text(json.dumps({"step": step, "batch": ids}))
                raise
            losses.append(loss)
            if loss_writer is not None:
                loss_writer.writerow([step + 1, loss.total, loss.onset_term, loss.frame_term])
            done = step + 1
            if valid_pieces and train_cfg.validate_every and done % train_cfg.validate_every == 0:
                v = _mean_loss(model, valid_pieces, train_cfg)
                val_losses.append((done, v))
                logger.info("step %d train %.4f valid %.4f", done, loss.total, v)
                if run_dir is not None:
                    with open(run_dir / "val_loss.csv", "a") as fh:
                        fh.write(f"{done},{v}\n")
            if run_dir is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
                snapshot(done, run_dir / "checkpoints" / f"step_{done:07d}.pt")
    finally:
        if loss_file is not None:
            loss_file.close()

    checkpoint = None
    if run_dir is not None:
        checkpoint = snapshot(end_step, run_dir / "final.pt")
        (run_dir / "final.json").write_text(
            json.dumps({"config_hash": config_hash(model_cfg), "steps": end_step, "checkpoint": "final.pt"}, indent=1)
        )
    model.eval()
    return TrainResult(model, losses, run_dir, checkpoint, val_losses)
