from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from onfattn.config import ConfigError, ModelConfig, TrainConfig
from onfattn.datasets import Piece
from onfattn.model import build_model
from onfattn.training import (
    LossValue,
    TrainingDiverged,
    WindowSampler,
    bce_loss,
    compute_loss,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train_run,
    train_step,
)

SMALL = dict(conv_channels=(2, 2, 4), model_size=8, n_feat=6, attn_size=4)


def small_model_cfg(**kw) -> ModelConfig:
    return ModelConfig(**{**SMALL, **kw})


def quick(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, batch_size=2, max_steps=6, window_frames=24, checkpoint_every=3, validate_every=3)
    return TrainConfig(**{**base, **kw})


def bce_oracle(pred, target, eps=1e-7):
    total = 0.0
    for p, y in zip(pred, target):
        p = min(max(p, eps), 1 - eps)
        total -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return total / len(pred)


def test_bce_at_one_half_is_ln2():
    loss = bce_loss(torch.full((4, 88), 0.5, dtype=torch.float64), torch.randint(0, 2, (4, 88)).double())
    assert abs(loss.item() - math.log(2)) < 1e-9


def test_bce_perfect_prediction_is_near_zero():
    y = (torch.rand(3, 10, 88) < 0.2).double()
    assert bce_loss(y.clone(), y).item() <= 1e-6


def test_bce_matches_scalar_oracle(rng):
    pred = rng.random(200)
    pred[:5] = [0.0, 1.0, 1e-9, 1 - 1e-12, 0.5]
    target = (rng.random(200) < 0.5).astype(float)
    got = bce_loss(torch.tensor(pred), torch.tensor(target)).item()
    assert abs(got - bce_oracle(pred.tolist(), target.tolist())) < 1e-12
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(3), torch.zeros(4))


def batch_from(piece: Piece, T: int, dtype=torch.float32):
    return {
        "spec": torch.tensor(piece.spec[None, :T], dtype=dtype),
        "onset": torch.as_tensor(piece.labels.onset_roll[None, :T], dtype=dtype),
        "frame": torch.as_tensor(piece.labels.frame_roll[None, :T], dtype=dtype),
    }


def test_loss_terms_sum_and_probes_have_no_onset_term(tiny_splits):
    batch = batch_from(tiny_splits["train"][0], 20)
    model = build_model(small_model_cfg())
    total, on, fr = compute_loss(model, batch["spec"], batch["onset"], batch["frame"], TrainConfig())
    assert torch.equal(total, on + fr) and on > 0
    probe = build_model(small_model_cfg(variant="linear_probe"))
    _, on, _ = compute_loss(probe, batch["spec"], batch["onset"], batch["frame"], TrainConfig())
    assert on.item() == 0.0


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_splits):
    model = build_model(small_model_cfg())
    before = [p.detach().clone() for p in model.parameters()]
    cfg = TrainConfig(learning_rate=0.0)
    loss = train_step(model, make_optimizer(model, cfg), batch_from(tiny_splits["train"][0], 20), cfg)
    assert isinstance(loss, LossValue) and abs(loss.total - loss.onset_term - loss.frame_term) < 1e-6
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_overfits_a_single_window(tiny_splits):
    torch.manual_seed(0)
    model = build_model(small_model_cfg(variant="linear_probe", seed=0))
    cfg = TrainConfig(learning_rate=3e-2)
    opt = make_optimizer(model, cfg)
    batch = batch_from(tiny_splits["train"][0], 32)
    losses = [train_step(model, opt, batch, cfg).total for _ in range(500)]
    assert min(losses) < 0.05


def test_nan_input_aborts_with_batch_identity(tiny_splits):
    model = build_model(small_model_cfg())
    cfg = TrainConfig()
    batch = batch_from(tiny_splits["train"][0], 10)
    batch["spec"][0, 3, 5] = float("nan")
    with pytest.raises(TrainingDiverged, match="batch 42"):
        train_step(model, make_optimizer(model, cfg), batch, cfg, batch_id=42)


def test_nan_during_run_dumps_offending_batch(tiny_splits, tmp_path):
    bad = [Piece(p.id, p.spec.copy(), p.labels, p.notes) for p in tiny_splits["train"]]
    for p in bad:
        p.spec[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train_run(bad, small_model_cfg(), quick(), run_dir=tmp_path)
    assert (tmp_path / "diverged_step0.npz").exists() and (tmp_path / "diverged_step0.json").exists()


def test_empty_training_split_is_a_config_error():
    with pytest.raises(ConfigError):
        train_run([], small_model_cfg(), quick())
    with pytest.raises(ConfigError):
        WindowSampler([], 10, 2, 0)


def test_sampler_state_round_trip(tiny_splits):
    a = WindowSampler(tiny_splits["train"], 16, 3, seed=5)
    a.next_batch()
    state = a.state()
    first, ids = a.next_batch()
    b = WindowSampler(tiny_splits["train"], 16, 3, seed=99)
    b.set_state(state)
    again, ids_b = b.next_batch()
    assert ids == ids_b and torch.equal(first["spec"], again["spec"])


def test_windows_shorter_than_piece_are_zero_padded(tiny_splits):
    n = tiny_splits["train"][0].n_frames
    batch, _ = WindowSampler(tiny_splits["train"][:1], n + 7, 1, 0).next_batch()
    assert batch["spec"].shape[1] == n + 7 and batch["spec"][0, n:].abs().sum() == 0


def test_runs_are_deterministic(tiny_splits):
    a = train_run(tiny_splits["train"], small_model_cfg(), quick())
    b = train_run(tiny_splits["train"], small_model_cfg(), quick())
    assert [x.total for x in a.losses] == [x.total for x in b.losses]
    assert all(torch.equal(p, q) for p, q in zip(a.model.parameters(), b.model.parameters()))


def test_resume_matches_uninterrupted_run(tiny_splits, tmp_path):
    full = train_run(tiny_splits["train"], small_model_cfg(), quick(), run_dir=tmp_path / "full")
    train_run(tiny_splits["train"], small_model_cfg(), quick(), run_dir=tmp_path / "cut", stop_after=3)
    resumed = train_run(
        tiny_splits["train"],
        small_model_cfg(),
        quick(),
        run_dir=tmp_path / "cut",
        resume_from=tmp_path / "cut" / "checkpoints" / "step_0000003.pt",
    )
    assert [x.total for x in resumed.losses] == [x.total for x in full.losses[3:]]
    assert all(torch.equal(p, q) for p, q in zip(full.model.parameters(), resumed.model.parameters()))
    rows = (tmp_path / "cut" / "loss.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 6


def test_run_directory_contents(tiny_splits, tmp_path):
    res = train_run(tiny_splits["train"], small_model_cfg(), quick(), run_dir=tmp_path, valid_pieces=tiny_splits["valid"])
    rows = (tmp_path / "loss.csv").read_text().strip().splitlines()
    assert rows[0] == "step,total,onset,frame" and len(rows) == 7
    assert [s for s, _ in res.val_losses] == [3, 6]
    assert (tmp_path / "config.yaml").exists() and (tmp_path / "final.json").exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_0000003.pt", "step_0000006.pt"]


def test_checkpoint_round_trip_is_bit_identical(tmp_path, tiny_splits):
    cfg = small_model_cfg(attention_target="feat", window_D=2)
    model = build_model(cfg)
    path = save_checkpoint(tmp_path / "m.pt", model, cfg, step=11)
    back, back_cfg, payload = load_checkpoint(path, expected=cfg)
    assert back_cfg == cfg and payload["step"] == 11
    x = torch.as_tensor(tiny_splits["test"][0].spec[None, :40])
    model.eval(), back.eval()
    assert torch.equal(model(x).y_frame_hat, back(x).y_frame_hat)


def test_checkpoint_rejects_mismatches(tmp_path):
    cfg = small_model_cfg()
    path = save_checkpoint(tmp_path / "m.pt", build_model(cfg), cfg)
    with pytest.raises(ValueError, match="different model config"):
        load_checkpoint(path, expected=small_model_cfg(model_size=10))
    payload = torch.load(path, weights_only=False)
    payload["state_dict"]["classifier.weight"] = torch.zeros(3, 3)
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="shape mismatch"):
        load_checkpoint(tmp_path / "bad.pt")
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "old.pt")
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "old.pt")


def test_probe_learning_rate_override():
    cfg = TrainConfig(learning_rate=1e-3, learning_rate_probe=3e-2)
    assert cfg.learning_rate_for("linear_probe") == 3e-2
    assert cfg.learning_rate_for("conv_probe") == 3e-2
    assert cfg.learning_rate_for("full") == 1e-3
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate_probe=-1).validate()
