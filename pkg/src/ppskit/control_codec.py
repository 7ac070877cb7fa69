"""Control codec: encode shading maps to conditioning latents and back.

The encoder compresses a single-channel conditioning raster (a normalized
shading map, or raw depth for ablations) by a factor of 16 per side into a
latent feature map; the decoder mirrors it transposed. Training minimizes the
reconstruction error so the latent keeps the geometric content that the
diffusion adapter conditions on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import nn_core
from .errors import ShapeError, UserInputError
from .nn_core import ResidualBlock

#: Per-stage channel plan, input -> latent. Four stride-2 stages, so the
#: latent is 16x smaller per side with CHANNEL_PLAN[-1] channels.
CHANNEL_PLAN = (1, 32, 64, 128, 128)

_STAGES = 4
_DOWN_FACTOR = 2 ** _STAGES
_CODEC_INIT_NS = 0x0C0DEC
_CODEC_STEP_NS = 11


@dataclass
class CodecTrainConfig:
    steps: int
    lr: float = 1e-4
    batch: int = 16
    seed: int = 0
    weight_decay: float = 0.0


class ControlEncoder(nn.Module):
    """Four stages of residual block + stride-2 conv."""

    def __init__(self, plan=CHANNEL_PLAN):
        super().__init__()
        if len(plan) != _STAGES + 1:
            raise ShapeError("control_encoder", f"channel plan must have {_STAGES + 1} entries")
        self.plan = tuple(plan)
        self.blocks = nn.ModuleList(ResidualBlock(plan[i], plan[i]) for i in range(_STAGES))
        self.downs = nn.ModuleList(
            nn.Conv2d(plan[i], plan[i + 1], 3, stride=2, padding=1) for i in range(_STAGES)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.plan[0]:
            raise ShapeError("control_encoder", f"expected (B, {self.plan[0]}, H, W) input", x.shape)
        if x.shape[2] % _DOWN_FACTOR or x.shape[3] % _DOWN_FACTOR:
            raise ShapeError(
                "control_encoder", f"side lengths must be divisible by {_DOWN_FACTOR}", x.shape
            )
        h = x
        for block, down in zip(self.blocks, self.downs):
            h = down(block(h))
        return h


class ControlDecoder(nn.Module):
    """Transposed mirror of the encoder: stride-2 transposed conv + residual block."""

    def __init__(self, plan=CHANNEL_PLAN):
        super().__init__()
        if len(plan) != _STAGES + 1:
            raise ShapeError("control_decoder", f"channel plan must have {_STAGES + 1} entries")
        self.plan = tuple(plan)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(plan[i + 1], plan[i], 4, stride=2, padding=1)
            for i in reversed(range(_STAGES))
        )
        self.blocks = nn.ModuleList(
            ResidualBlock(plan[i], plan[i]) for i in reversed(range(_STAGES))
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() != 4 or f.shape[1] != self.plan[-1]:
            raise ShapeError("control_decoder", f"expected (B, {self.plan[-1]}, h, w) latent", f.shape)
        h = f
        for up, block in zip(self.ups, self.blocks):
            h = block(up(h))
        return h


class ControlCodec(nn.Module):
    """Encoder/decoder pair trained with a reconstruction loss."""

    def __init__(self, plan=CHANNEL_PLAN):
        super().__init__()
        self.encoder = ControlEncoder(plan)
        self.decoder = ControlDecoder(plan)

    @property
    def latent_channels(self) -> int:
        return self.encoder.plan[-1]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic latent for a conditioning raster with values in [0, 1]."""
        lo = float(x.min()) if x.numel() else 0.0
        hi = float(x.max()) if x.numel() else 0.0
        if lo < -1e-5 or hi > 1.0 + 1e-5:
            raise UserInputError(f"conditioning input must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
        return self.encoder(x)

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return self.decoder(f)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def reconstruction_loss(codec: ControlCodec, batch: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error, averaged over pixels and batch."""
    return nn_core.mse(codec(batch), batch)


def new_codec(seed: int, plan=CHANNEL_PLAN) -> ControlCodec:
    codec = ControlCodec(plan)
    nn_core.init_parameters(codec, nn_core.derive_seed(seed, _CODEC_INIT_NS))
    return codec


def train_codec(cond_maps: np.ndarray, cfg: CodecTrainConfig, out_dir=None,
                codec: ControlCodec | None = None):
    """Train the codec on a stack of conditioning rasters (N, 1, H, W).

    Batches are drawn with replacement from a per-step generator derived from
    the seed, so runs are reproducible and resumable by construction. Writes
    ``codec.ppsc`` and a step/loss JSONL log when ``out_dir`` is given.
    Returns the codec and the per-step loss list.
    """
    cond_maps = np.asarray(cond_maps, dtype=np.float32)
    if cond_maps.ndim != 4 or cond_maps.shape[0] == 0:
        raise UserInputError(f"training set must be a non-empty (N, 1, H, W) stack, got {cond_maps.shape}")
    if cfg.steps < 1 or cfg.lr <= 0:
        raise UserInputError(f"bad training config: steps={cfg.steps}, lr={cfg.lr}")
    data = torch.from_numpy(cond_maps)
    if codec is None:
        codec = new_codec(cfg.seed)
    optimizer = nn_core.make_adamw(codec.parameters(), cfg.lr, cfg.weight_decay)

    losses = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.jsonl", "w", encoding="utf-8")
    try:
        for step in range(1, cfg.steps + 1):
            gen = nn_core.make_generator(nn_core.derive_seed(cfg.seed, _CODEC_STEP_NS, step))
            idx = torch.randint(0, data.shape[0], (cfg.batch,), generator=gen)
            loss = reconstruction_loss(codec, data[idx])
            loss.backward()
            nn_core.adamw_step(optimizer)
            value = float(loss.detach())
            losses.append(value)
            if log_fh is not None:
                log_fh.write(json.dumps({"step": step, "loss": value}) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        nn_core.save_module(out_dir / "codec.ppsc", codec)
    return codec, losses
