"""Onsets-and-Frames stacks, local additive attention, and capacity-limited probes.

All modules take spectrogram batches shaped ``(B, T, n_bins)`` (a 2-D
``(T, n_bins)`` input is treated as a batch of one) and preserve ``T``:
convolutions pad in time and pool only along frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .constants import N_PITCHES

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class AttentionMap:
    weights: torch.Tensor  # (B, T, 2D+1); column j is timestep t - D + j
    D: int
    target: str


@dataclass
class StackOutputs:
    y_frame_hat: torch.Tensor
    hidden: torch.Tensor
    y_onset_hat: torch.Tensor | None = None
    y_feat_hat: torch.Tensor | None = None
    attention: AttentionMap | None = None


def window_mask(T: int, D: int, device=None) -> torch.Tensor:
    """``(T, 2D+1)`` boolean mask; False where ``t - D + j`` falls outside ``[0, T)``."""
    t = torch.arange(T, device=device)[:, None]
    j = torch.arange(2 * D + 1, device=device)[None, :]
    pos = t - D + j
    return (pos >= 0) & (pos < T)


class LocalAttention(nn.Module):
    """Windowed additive attention.

    Scores ``e_tj = v . tanh(W_h h_t + b + W_s s_{t-D+j})`` over the
    ``2D+1`` neighbours of ``t``; out-of-range neighbours are masked before
    the softmax. The context is the weight-averaged window of ``s``.
    """

    def __init__(self, query_dim: int, value_dim: int, attn_size: int, window_D: int):
        super().__init__()
        if window_D < 0:
            raise ConfigError("window_D must be >= 0")
        self.window_D = int(window_D)
        self.query_proj = nn.Linear(query_dim, attn_size)
        self.key_proj = nn.Linear(value_dim, attn_size, bias=False)
        self.score = nn.Linear(attn_size, 1, bias=False)

    def forward(self, query: torch.Tensor, values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, _ = values.shape
        D = self.window_D
        q = self.query_proj(query)
        k = F.pad(self.key_proj(values), (0, 0, D, D))
        s = F.pad(values, (0, 0, D, D))
        # loop over offsets: the unfolded value window would not fit in memory for large D
        scores = torch.stack(
            [self.score(torch.tanh(q + k[:, j : j + T])).squeeze(-1) for j in range(2 * D + 1)],
            dim=-1,
        )
        scores = scores.masked_fill(~window_mask(T, D, values.device), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        context = weights[..., 0:1] * s[:, 0:T]
        for j in range(1, 2 * D + 1):
            context = context + weights[..., j : j + 1] * s[:, j : j + T]
        return context, weights

    def step(self, h_t: torch.Tensor, window: torch.Tensor, valid: torch.Tensor | None = None):
        """Attend one query vector to one ``(2D+1, value_dim)`` window."""
        e = self.score(torch.tanh(self.query_proj(h_t)[None, :] + self.key_proj(window))).squeeze(-1)
        if valid is not None:
            e = e.masked_fill(~valid, float("-inf"))
        a = torch.softmax(e, dim=0)
        return a, a @ window


class BiLSTM(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.rnn = nn.LSTM(input_size, hidden_size, batch_first=True, bidirectional=True)

    def forward(self, x):
        return self.rnn(x)[0]


class ConvStack(nn.Module):
    """Three conv blocks (3x3 conv, batch norm, ReLU; frequency-only pooling) and a projection."""

    def __init__(self, n_bins: int, channels: tuple[int, int, int], out_features: int):
        super().__init__()
        c1, c2, c3 = channels
        self.blocks = nn.Sequential(
            nn.Conv2d(1, c1, 3, padding=1),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.BatchNorm2d(c2),
            nn.ReLU(),
            nn.MaxPool2d((1, 2)),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.BatchNorm2d(c3),
            nn.ReLU(),
            nn.MaxPool2d((1, 2)),
        )
        self.fc = nn.Linear(c3 * (n_bins // 4), out_features)

    def forward(self, x):
        B, T, _ = x.shape
        y = self.blocks(x.unsqueeze(1))  # (B, C, T, F')
        y = y.transpose(1, 2).reshape(B, T, -1)
        return self.fc(y)


class OnsetsAndFrames(nn.Module):
    """Full model and its no-onset-stack / no-biLSTM ablations, with optional attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.scaled_channels()
        m = cfg.model_size
        recurrent = cfg.variant != "no_bilstm"
        if cfg.has_onset_stack:
            self.onset_conv = ConvStack(cfg.n_bins, channels, m)
            self.onset_rnn = BiLSTM(m, m // 2) if recurrent else nn.Identity()
            self.onset_fc = nn.Linear(m, N_PITCHES)
        self.feat_conv = ConvStack(cfg.n_bins, channels, m)
        self.feat_fc = nn.Linear(m, cfg.n_feat)

        frame_in = cfg.n_feat + (N_PITCHES if cfg.has_onset_stack else 0)
        # recurrence keeps the width, so removing it changes only the LSTM parameters
        self.frame_rnn = BiLSTM(frame_in, frame_in // 2) if recurrent else nn.Identity()
        value_dim = {"none": 0, "spec": cfg.n_bins, "onset": N_PITCHES, "feat": cfg.n_feat}[cfg.attention_target]
        self.classifier = nn.Linear(frame_in + value_dim, N_PITCHES)
        if cfg.uses_attention:
            self.attention = LocalAttention(frame_in, value_dim, cfg.attn_size, cfg.window_D)

    def onset_stack(self, spec):
        internal = self.onset_rnn(self.onset_conv(spec))
        return torch.sigmoid(self.onset_fc(internal)), internal

    def feat_stack(self, spec):
        return self.feat_fc(self.feat_conv(spec))

    def frame_stack(self, concat, values=None):
        """Frame stack on ``onset (+) feat``.

        Returns ``(y_frame_hat, h, attention)``; ``values`` is the attended
        sequence and is required when the config enables attention.
        """
        h = self.frame_rnn(concat)
        attn = None
        z = h
        if self.cfg.uses_attention:
            if values is None:
                raise ConfigError("attention is enabled but no attended sequence was given")
            context, weights = self.attention(h, values)
            z = torch.cat([h, context], dim=-1)
            attn = AttentionMap(weights, self.cfg.window_D, self.cfg.attention_target)
        return torch.sigmoid(self.classifier(z)), h, attn

    def forward(self, spec) -> StackOutputs:
        spec = _batched(spec)
        feat = self.feat_stack(spec)
        onset = None
        if self.cfg.has_onset_stack:
            onset, _ = self.onset_stack(spec)
            onset_in = onset.detach() if self.cfg.stop_gradient else onset
            concat = torch.cat([onset_in, feat], dim=-1)
        else:
            onset_in = None
            concat = feat
        values = {"none": None, "spec": spec, "onset": onset_in, "feat": feat}[self.cfg.attention_target]
        frame, h, attn = self.frame_stack(concat, values)
        return StackOutputs(frame, h, onset, feat, attn)


class LinearProbe(nn.Module):
    """Single linear layer on one spectrogram frame, or on its attention-weighted window."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.classifier = nn.Linear(cfg.n_bins, N_PITCHES)
        if cfg.uses_attention:
            # the current frame is the query: there is no recurrent state
            self.attention = LocalAttention(cfg.n_bins, cfg.n_bins, cfg.attn_size, cfg.window_D)

    def forward(self, spec) -> StackOutputs:
        spec = _batched(spec)
        attn = None
        x = spec
        if self.cfg.uses_attention:
            x, weights = self.attention(spec, spec)
            attn = AttentionMap(weights, self.cfg.window_D, "spec")
        return StackOutputs(torch.sigmoid(self.classifier(x)), spec, attention=attn)

    def forward_window(self, window: torch.Tensor) -> torch.Tensor:
        """Prediction for the centre frame of one ``(2D+1, n_bins)`` window."""
        if not self.cfg.uses_attention:
            return torch.sigmoid(self.classifier(window[window.shape[0] // 2]))
        centre = window[self.cfg.window_D]
        _, context = self.attention.step(centre, window)
        return torch.sigmoid(self.classifier(context))


class ConvProbe(nn.Module):
    """One 1x3 (time x frequency) convolution and a classifier; time-local by construction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.probe_channels
        self.conv = nn.Conv2d(1, c, kernel_size=(1, 3), padding=(0, 1))
        extra = cfg.n_bins if cfg.uses_attention else 0
        self.classifier = nn.Linear(c * cfg.n_bins + extra, N_PITCHES)
        if cfg.uses_attention:
            self.attention = LocalAttention(cfg.n_bins, cfg.n_bins, cfg.attn_size, cfg.window_D)

    def forward(self, spec) -> StackOutputs:
        spec = _batched(spec)
        B, T, _ = spec.shape
        h = F.relu(self.conv(spec.unsqueeze(1))).transpose(1, 2).reshape(B, T, -1)
        attn = None
        z = h
        if self.cfg.uses_attention:
            context, weights = self.attention(spec, spec)
            z = torch.cat([h, context], dim=-1)
            attn = AttentionMap(weights, self.cfg.window_D, "spec")
        return StackOutputs(torch.sigmoid(self.classifier(z)), h, attention=attn)


def _batched(spec: torch.Tensor) -> torch.Tensor:
    if spec.dim() == 2:
        spec = spec.unsqueeze(0)
    if spec.dim() != 3:
        raise ValueError(f"expected (B, T, bins) input, got shape {tuple(spec.shape)}")
    return spec


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Uniform fan-in init in registration order; LSTM forget-gate bias 1, other biases 0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                nn.init.uniform_(module.weight, -bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.LSTM):
                H = module.hidden_size
                for name, p in module.named_parameters():
                    if name.startswith("weight"):
                        bound = 1.0 / math.sqrt(p.shape[1])
                        nn.init.uniform_(p, -bound, bound, generator=gen)
                    else:
                        p.zero_()
                        if name.startswith("bias_ih"):
                            p[H : 2 * H] = 1.0  # gate order i, f, g, o
    return model


def init_output_biases(model: nn.Module, onset_prior: float | None, frame_prior: float | None) -> nn.Module:
    """Start each sigmoid output at its label prior by setting the bias to logit(prior).

    With sparse labels and zero biases the first updates push every hidden
    unit towards "off", and small models can stay stuck at the prior. Draws no
    random numbers, so the weight initialization is unaffected.
    """
    with torch.no_grad():
        if onset_prior is not None and hasattr(model, "onset_fc"):
            model.onset_fc.bias.fill_(math.log(onset_prior / (1.0 - onset_prior)))
        if frame_prior is not None:
            model.classifier.bias.fill_(math.log(frame_prior / (1.0 - frame_prior)))
    return model


def build_model(cfg: ModelConfig) -> nn.Module:
    cfg.validate()
    if cfg.variant == "linear_probe":
        model = LinearProbe(cfg)
    elif cfg.variant == "conv_probe":
        model = ConvProbe(cfg)
    else:
        model = OnsetsAndFrames(cfg)
    init_parameters(model, cfg.seed)
    init_output_biases(model, cfg.onset_prior, cfg.frame_prior)
    return model.to(_DTYPES[cfg.dtype])


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def parameter_report(model: nn.Module) -> dict[str, int]:
    """Parameter counts per top-level submodule plus ``total`` and ``recurrent``."""
    report: dict[str, int] = {}
    for name, child in model.named_children():
        report[name] = sum(p.numel() for p in child.parameters())
    report["recurrent"] = sum(p.numel() for m in model.modules() if isinstance(m, nn.LSTM) for p in m.parameters())
    report["total"] = sum(p.numel() for p in model.parameters())
    return report


def predict(model: nn.Module, spec: np.ndarray) -> StackOutputs:
    """Eval-mode forward on a single ``(T, n_bins)`` array, no gradients."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(spec), dtype=model_dtype(model))
            return model(x)
    finally:
        model.train(was_training)
