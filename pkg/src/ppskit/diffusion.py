"""Pixel-space denoising diffusion with domain and shading conditioning.

Stage 1 trains a small noise-prediction UNet on the union of the synthetic
and real-looking domains; a two-row learned embedding keeps the domains
separated. Stage 2 freezes that base model and trains a control adapter (a
copy of the base encoder plus zero-initialized 1x1 connection convolutions)
jointly with the control codec, so a shading-map latent steers generation
without touching the base weights. Sampling uses the deterministic DDIM
update over a strided timestep subsequence; translation runs depth ->
shading -> latent -> conditioned sampling with the real-domain embedding.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nn_core
from .control_codec import CHANNEL_PLAN, ControlCodec, new_codec
from .errors import ShapeError, UserInputError
from .geometry import CameraIntrinsics, LightModel, NormalizationMode, compute_pps, normalize_pps
from .nn_core import ResidualBlock
from .rasters import DepthMap

DOMAIN_SOURCE = 0
DOMAIN_TARGET = 1

IMAGE_CHANNELS = 3
UNET_CHANNELS = (32, 64, 128)
EMB_DIM = 64

_INIT_NS = 0xBA5E
_STAGE1_STEP_NS = 21
_STAGE2_STEP_NS = 31
_SAMPLE_NS = 41
_ETA_NS = 0xE7A

MODEL_FILE = "model.ppsc"
CONTROL_FILE = "control.ppsc"
STATE_FILE = "train_state.ppsc"
LOSS_LOG_FILE = "loss_log.jsonl"


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process schedule: betas plus cumulative alpha products.

    ``alphas_bar`` has length ``T + 1`` with ``alphas_bar[0] = 1`` so that
    timestep 0 means "no noise" and the DDIM update can land exactly on the
    clean prediction.
    """

    betas: np.ndarray
    alphas_bar: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        ab = np.asarray(self.alphas_bar, dtype=np.float64)
        if not ((betas > 0) & (betas < 1)).all():
            raise UserInputError("betas must lie strictly inside (0, 1)")
        if ab.shape != (betas.shape[0] + 1,) or ab[0] != 1.0:
            raise UserInputError("alphas_bar must have length T+1 and start at 1")
        if not (np.diff(ab) < 0).all():
            raise UserInputError("alphas_bar must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_bar", ab)

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas=betas, alphas_bar=alphas_bar)

    @property
    def timesteps(self) -> int:
        return int(self.betas.shape[0])


def _timestep_array(t, batch: int) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(batch, int(t), dtype=np.int64)
    return t


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Forward noising: ``sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps``."""
    if eps.shape != z0.shape:
        raise ShapeError("add_noise", "noise must match the clean input", eps.shape, z0.shape)
    t = _timestep_array(t, z0.shape[0])
    if t.shape != (z0.shape[0],):
        raise ShapeError("add_noise", f"need one timestep per sample", t.shape, z0.shape)
    if (t < 1).any() or (t > schedule.timesteps).any():
        raise UserInputError(
            f"timesteps must lie in [1, {schedule.timesteps}], got range "
            f"[{int(t.min())}, {int(t.max())}]"
        )
    ab = schedule.alphas_bar[t]
    shape = (z0.shape[0],) + (1,) * (z0.dim() - 1)
    sqrt_ab = torch.from_numpy(np.sqrt(ab)).to(z0.dtype).reshape(shape)
    sqrt_rest = torch.from_numpy(np.sqrt(1.0 - ab)).to(z0.dtype).reshape(shape)
    return sqrt_ab * z0 + sqrt_rest * eps


# ---------------------------------------------------------------------------
# Model


def sinusoidal_embedding(t: torch.Tensor, dim: int = EMB_DIM, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float64) * (-math.log(10000.0) / (half - 1)))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)


class UNetEncoder(nn.Module):
    """Three-resolution encoder; every block consumes the conditioning vector."""

    def __init__(self, in_channels=IMAGE_CHANNELS, channels=UNET_CHANNELS, emb_dim=EMB_DIM):
        super().__init__()
        c0, c1, c2 = channels
        self.stem = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.block0 = ResidualBlock(c0, c0, emb_dim)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.block1 = ResidualBlock(c1, c1, emb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.block2 = ResidualBlock(c2, c2, emb_dim)

    def forward(self, z: torch.Tensor, emb: torch.Tensor):
        h0 = self.block0(self.stem(z), emb)
        h1 = self.block1(self.down0(h0), emb)
        h2 = self.block2(self.down1(h1), emb)
        return h0, h1, h2


class BaseUNet(nn.Module):
    """Noise predictor conditioned on timestep and domain.

    The sinusoidal timestep embedding and the learned domain embedding are
    summed, refined by a small MLP, and injected into every residual block.
    Output has the input's shape.
    """

    def __init__(self, in_channels=IMAGE_CHANNELS, channels=UNET_CHANNELS,
                 emb_dim=EMB_DIM, n_domains=2):
        super().__init__()
        c0, c1, c2 = channels
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.emb_dim = emb_dim
        self.n_domains = n_domains
        self.domain_table = nn.Embedding(n_domains, emb_dim)
        self.emb_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.encoder = UNetEncoder(in_channels, channels, emb_dim)
        self.mid = ResidualBlock(c2, c2, emb_dim)
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = ResidualBlock(c1 + c1, c1, emb_dim)
        self.up0 = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.dec0 = ResidualBlock(c0 + c0, c0, emb_dim)
        self.out = nn.Conv2d(c0, in_channels, 3, padding=1)

    def conditioning(self, t: torch.Tensor, domain: torch.Tensor) -> torch.Tensor:
        if domain.dim() != 1 or domain.shape != t.shape:
            raise ShapeError("conditioning", "t and domain must be matching 1-D batches",
                             t.shape, domain.shape)
        if (domain < 0).any() or (domain >= self.n_domains).any():
            raise UserInputError(f"domain labels must lie in [0, {self.n_domains})")
        dtype = self.domain_table.weight.dtype
        emb = sinusoidal_embedding(t, self.emb_dim, dtype) + self.domain_table(domain)
        return self.emb_mlp(emb)

    def _check_input(self, z: torch.Tensor):
        if z.dim() != 4 or z.shape[1] != self.in_channels:
            raise ShapeError("unet", f"expected (B, {self.in_channels}, H, W) input", z.shape)
        if z.shape[2] % 4 or z.shape[3] % 4:
            raise ShapeError("unet", "spatial size must be divisible by 4", z.shape)

    def forward(self, z: torch.Tensor, t: torch.Tensor, domain: torch.Tensor) -> torch.Tensor:
        return self.forward_with_control(z, t, domain, None)

    def forward_with_control(self, z: torch.Tensor, t: torch.Tensor, domain: torch.Tensor,
                             controls=None, emb: torch.Tensor | None = None,
                             frozen_encoder: bool = False) -> torch.Tensor:
        """Forward pass with optional adapter signals added to the decoder inputs.

        ``controls`` is a (c0, c1, c2) triple matching the two skip levels and
        the bottleneck. With ``frozen_encoder`` the encoder half runs without
        autograd tracking; gradients still flow from the output back into the
        control signals through the decoder activations.
        """
        self._check_input(z)
        if emb is None:
            with torch.set_grad_enabled(torch.is_grad_enabled() and not frozen_encoder):
                emb = self.conditioning(t, domain)
        with torch.set_grad_enabled(torch.is_grad_enabled() and not frozen_encoder):
            h0, h1, h2 = self.encoder(z, emb)
            m = self.mid(h2, emb)
        if controls is not None:
            c0, c1, c2 = controls
            if c0.shape != h0.shape or c1.shape != h1.shape or c2.shape != m.shape:
                raise ShapeError("unet", "control signals must match decoder inputs",
                                 c0.shape, c1.shape, c2.shape)
            h0 = h0 + c0
            h1 = h1 + c1
            m = m + c2
        d1 = self.dec1(nn_core.concat([self.up1(m), h1]), emb)
        d0 = self.dec0(nn_core.concat([self.up0(d1), h0]), emb)
        return self.out(d0)


def new_base_unet(seed: int, **kwargs) -> BaseUNet:
    model = BaseUNet(**kwargs)
    nn_core.init_parameters(model, nn_core.derive_seed(seed, _INIT_NS))
    return model


class ControlAdapter(nn.Module):
    """Trainable copy of the base encoder with a latent injection point.

    The codec latent is projected to the bottleneck resolution by a stride-4
    transposed convolution and added to the copied encoder's bottleneck
    features. Each of the three outputs passes through a 1x1 convolution
    whose weights and biases start at exactly zero, so a freshly built
    adapter contributes nothing to the base model.
    """

    def __init__(self, base: BaseUNet, latent_channels: int, seed: int = 0):
        super().__init__()
        c0, c1, c2 = base.channels
        self.encoder = copy.deepcopy(base.encoder)
        self.encoder.requires_grad_(True)
        self.latent_proj = nn.ConvTranspose2d(latent_channels, c2, 4, stride=4)
        nn_core.init_parameters(self.latent_proj, nn_core.derive_seed(seed, _INIT_NS, 1))
        self.connect0 = nn_core.zero_init(nn.Conv2d(c0, c0, 1))
        self.connect1 = nn_core.zero_init(nn.Conv2d(c1, c1, 1))
        self.connect2 = nn_core.zero_init(nn.Conv2d(c2, c2, 1))

    def forward(self, z: torch.Tensor, emb: torch.Tensor, latent: torch.Tensor):
        h0, h1, h2 = self.encoder(z, emb)
        if latent.shape[2] * 4 != h2.shape[2] or latent.shape[3] * 4 != h2.shape[3]:
            raise ShapeError("control_adapter", "latent must be 1/4 of the bottleneck size",
                             latent.shape, h2.shape)
        h2 = h2 + self.latent_proj(latent)
        return self.connect0(h0), self.connect1(h1), self.connect2(h2)


class ControlStack(nn.Module):
    """Everything stage 2 trains: the control codec plus the adapter."""

    def __init__(self, base: BaseUNet, seed: int = 0, plan=CHANNEL_PLAN):
        super().__init__()
        self.codec = new_codec(seed, plan)
        self.adapter = ControlAdapter(base, latent_channels=plan[-1], seed=seed)


# ---------------------------------------------------------------------------
# Losses


def _draw_t_eps(schedule: NoiseSchedule, like: torch.Tensor, gen: torch.Generator):
    t = torch.randint(1, schedule.timesteps + 1, (like.shape[0],), generator=gen)
    eps = torch.randn(like.shape, generator=gen, dtype=like.dtype)
    return t, eps


def stage1_loss(model: BaseUNet, schedule: NoiseSchedule, images: torch.Tensor,
                domains: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Noise-prediction loss with uniformly sampled timesteps (mean over all)."""
    t, eps = _draw_t_eps(schedule, images, gen)
    z_t = add_noise(schedule, images, t, eps)
    return nn_core.mse(eps, model(z_t, t, domains))


def stage2_loss(base: BaseUNet, stack: ControlStack, schedule: NoiseSchedule,
                images: torch.Tensor, cond: torch.Tensor, gen: torch.Generator):
    """Joint loss: codec reconstruction plus conditioned noise prediction.

    The batch must be paired: image i goes with conditioning raster i, both
    from the source domain. Gradients reach the adapter and codec only; the
    base runs its encoder without autograd tracking.

    Returns (total, reconstruction term, diffusion term).
    """
    if images.shape[0] != cond.shape[0]:
        raise UserInputError(
            f"unpaired batch: {images.shape[0]} images vs {cond.shape[0]} conditioning maps"
        )
    latent = stack.codec.encode(cond)
    recon = nn_core.mse(stack.codec.decode(latent), cond)
    t, eps = _draw_t_eps(schedule, images, gen)
    z_t = add_noise(schedule, images, t, eps)
    domains = torch.full((images.shape[0],), DOMAIN_SOURCE, dtype=torch.long)
    with torch.no_grad():
        emb = base.conditioning(t, domains)
    controls = stack.adapter(z_t, emb, latent)
    eps_hat = base.forward_with_control(z_t, t, domains, controls, emb=emb, frozen_encoder=True)
    diffusion = nn_core.mse(eps, eps_hat)
    return recon + diffusion, recon, diffusion


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class DiffusionTrainConfig:
    steps: int
    batch: int = 8
    lr: float = 1e-4
    seed: int = 0
    weight_decay: float = 0.0


def _validate_images(name: str, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0 or images.shape[1] != IMAGE_CHANNELS:
        raise UserInputError(f"{name} must be a non-empty (N, 3, H, W) stack, got {images.shape}")
    if images.min() < -1.0 - 1e-5 or images.max() > 1.0 + 1e-5:
        raise UserInputError(f"{name} must be scaled to [-1, 1]")
    return images


def _save_train_state(path, module: nn.Module, optimizer, step: int) -> None:
    arrays = {"meta.step": np.array([float(step)], dtype=np.float32)}
    arrays.update({f"model.{k}": v for k, v in nn_core.state_dict_arrays(module).items()})
    arrays.update(nn_core.optimizer_state_arrays(optimizer))
    nn_core.save_arrays(path, arrays)


def _load_train_state(path, module: nn.Module, optimizer) -> int:
    arrays = nn_core.load_arrays(path)
    model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    nn_core.load_module_arrays(module, model_arrays, context=str(path))
    nn_core.load_optimizer_state(optimizer, arrays)
    return int(arrays["meta.step"][0])


def _training_loop(module, optimizer, cfg: DiffusionTrainConfig, step_ns: int,
                   loss_of_batch, out_dir, extra_keys=()):
    """Shared seeded training loop; ``loss_of_batch(idx, gen)`` returns the
    scalar loss or a (loss, *extras) tuple matching ``extra_keys``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / STATE_FILE
    start_step = 0
    if state_path.exists():
        start_step = _load_train_state(state_path, module, optimizer)
        if start_step >= cfg.steps:
            raise UserInputError(
                f"{state_path}: already trained to step {start_step} >= requested {cfg.steps}"
            )
    mode = "a" if start_step else "w"
    history = []
    with open(out_dir / LOSS_LOG_FILE, mode, encoding="utf-8") as log_fh:
        for step in range(start_step + 1, cfg.steps + 1):
            gen = nn_core.make_generator(nn_core.derive_seed(cfg.seed, step_ns, step))
            result = loss_of_batch(gen)
            loss, extras = (result[0], result[1:]) if isinstance(result, tuple) else (result, ())
            loss.backward()
            nn_core.adamw_step(optimizer)
            value = float(nn_core.assert_finite(loss.detach(), "training loss"))
            record = {"step": step, "loss": value}
            record.update({key: float(extra.detach()) for key, extra in zip(extra_keys, extras)})
            log_fh.write(json.dumps(record) + "\n")
            history.append(record)
    _save_train_state(state_path, module, optimizer, cfg.steps)
    return history


def train_stage1(source_images: np.ndarray, target_images: np.ndarray,
                 cfg: DiffusionTrainConfig, out_dir,
                 schedule: NoiseSchedule | None = None):
    """Train the base model on the union of both domains with domain labels.

    Writes ``model.ppsc``, ``train_state.ppsc`` (resumable) and a per-step
    loss log to ``out_dir``. If a ``train_state.ppsc`` already exists there,
    training resumes from it and reproduces the uninterrupted run exactly.
    Returns (model, history) where history holds the per-step loss records
    of this invocation.
    """
    source_images = _validate_images("source dataset", source_images)
    target_images = _validate_images("target dataset", target_images)
    if source_images.shape[1:] != target_images.shape[1:]:
        raise UserInputError("source and target images must share one raster size")
    schedule = schedule or NoiseSchedule.linear()
    images = torch.from_numpy(np.concatenate([source_images, target_images]))
    images = images.contiguous(memory_format=torch.channels_last)
    labels = torch.cat([
        torch.full((source_images.shape[0],), DOMAIN_SOURCE, dtype=torch.long),
        torch.full((target_images.shape[0],), DOMAIN_TARGET, dtype=torch.long),
    ])
    model = new_base_unet(cfg.seed).to(memory_format=torch.channels_last)
    optimizer = nn_core.make_adamw(model.parameters(), cfg.lr, cfg.weight_decay)

    def loss_of_batch(gen):
        idx = torch.randint(0, images.shape[0], (cfg.batch,), generator=gen)
        return stage1_loss(model, schedule, images[idx], labels[idx], gen)

    history = _training_loop(model, optimizer, cfg, _STAGE1_STEP_NS, loss_of_batch, out_dir)
    nn_core.save_module(Path(out_dir) / MODEL_FILE, model)
    return model, history


def load_base_unet(path) -> BaseUNet:
    model = BaseUNet()
    nn_core.load_module(path, model)
    return model


def load_control_stack(path, base: BaseUNet) -> ControlStack:
    stack = ControlStack(base)
    nn_core.load_module(path, stack)
    return stack


def train_stage2(images: np.ndarray, cond_maps: np.ndarray, stage1_model_path,
                 cfg: DiffusionTrainConfig, out_dir,
                 schedule: NoiseSchedule | None = None,
                 codec_init_path=None) -> tuple:
    """Train adapter + codec against a frozen stage-1 base model.

    ``cond_maps`` are the per-image conditioning rasters (normalized shading
    maps, or depth for the ablation), shape (N, 1, H, W) in [0, 1]. Writes
    ``control.ppsc`` plus resumable state and a loss log with the two loss
    terms. Returns (base, stack, history).
    """
    images = _validate_images("paired images", images)
    cond_maps = np.asarray(cond_maps, dtype=np.float32)
    if cond_maps.ndim != 4 or cond_maps.shape[1] != 1:
        raise UserInputError(f"conditioning maps must be (N, 1, H, W), got {cond_maps.shape}")
    if cond_maps.shape[0] != images.shape[0]:
        raise UserInputError(
            f"unpaired dataset: {images.shape[0]} images vs {cond_maps.shape[0]} conditioning maps"
        )
    schedule = schedule or NoiseSchedule.linear()
    base = load_base_unet(stage1_model_path)
    base.requires_grad_(False)
    stack = ControlStack(base, seed=cfg.seed)
    if codec_init_path is not None:
        nn_core.load_module(codec_init_path, stack.codec)
    base.to(memory_format=torch.channels_last)
    stack.to(memory_format=torch.channels_last)
    images_t = torch.from_numpy(images).contiguous(memory_format=torch.channels_last)
    cond_t = torch.from_numpy(cond_maps).contiguous(memory_format=torch.channels_last)
    optimizer = nn_core.make_adamw(stack.parameters(), cfg.lr, cfg.weight_decay)

    def loss_of_batch(gen):
        idx = torch.randint(0, images_t.shape[0], (cfg.batch,), generator=gen)
        return stage2_loss(base, stack, schedule, images_t[idx], cond_t[idx], gen)

    history = _training_loop(stack, optimizer, cfg, _STAGE2_STEP_NS, loss_of_batch, out_dir,
                             extra_keys=("recon", "diffusion"))
    nn_core.save_module(Path(out_dir) / CONTROL_FILE, stack)
    return base, stack, history


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class SampleConfig:
    ddim_steps: int = 20
    eta: float = 0.0
    seed: int = 0
    domain: int = DOMAIN_TARGET


def ddim_timestep_sequence(timesteps: int, ddim_steps: int) -> np.ndarray:
    """Uniformly strided ascending subsequence 0 = t_0 < ... <= t_S = T."""
    if not 1 <= ddim_steps <= timesteps:
        raise UserInputError(f"ddim_steps must lie in [1, {timesteps}], got {ddim_steps}")
    return np.round(np.linspace(0.0, timesteps, ddim_steps + 1)).astype(np.int64)


def ddim_sample(denoise_fn, schedule: NoiseSchedule, cfg: SampleConfig,
                z_init: torch.Tensor) -> torch.Tensor:
    """Run the DDIM update from ``z_init`` down the timestep subsequence.

    ``denoise_fn(z, t)`` predicts the noise for a batch at (shared) timestep
    ``t``. With ``eta == 0`` the trajectory is a deterministic function of
    ``z_init``; otherwise the stochastic term draws from a generator seeded
    from ``cfg.seed``. The result is clamped to [-1, 1].
    """
    if not 0.0 <= cfg.eta <= 1.0:
        raise UserInputError(f"eta must lie in [0, 1], got {cfg.eta}")
    seq = ddim_timestep_sequence(schedule.timesteps, cfg.ddim_steps)
    noise_gen = nn_core.make_generator(nn_core.derive_seed(cfg.seed, _ETA_NS))
    z = z_init
    ab = schedule.alphas_bar
    for k in range(len(seq) - 1, 0, -1):
        t_cur = int(seq[k])
        t_prev = int(seq[k - 1])
        t_batch = torch.full((z.shape[0],), t_cur, dtype=torch.long)
        eps_hat = denoise_fn(z, t_batch)
        if eps_hat.shape != z.shape:
            raise ShapeError("ddim", "denoiser must preserve shape", eps_hat.shape, z.shape)
        ab_cur = float(ab[t_cur])
        ab_prev = float(ab[t_prev])
        x0 = (z - math.sqrt(1.0 - ab_cur) * eps_hat) / math.sqrt(ab_cur)
        sigma = 0.0
        if cfg.eta > 0.0 and t_prev > 0:
            sigma = cfg.eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) \
                * math.sqrt(1.0 - ab_cur / ab_prev)
        direction = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
        z = math.sqrt(ab_prev) * x0 + direction * eps_hat
        if sigma > 0.0:
            z = z + sigma * torch.randn(z.shape, generator=noise_gen, dtype=z.dtype)
    return torch.clamp(z, -1.0, 1.0)


def _stacked_initial_noise(cfg: SampleConfig, indices, shape, dtype=torch.float32) -> torch.Tensor:
    # Per-sample generators keyed by (seed, index): sample i is reproducible
    # independently of how many scenes share the batch.
    draws = []
    for i in indices:
        gen = nn_core.make_generator(nn_core.derive_seed(cfg.seed, _SAMPLE_NS, i))
        draws.append(torch.randn((1,) + tuple(shape), generator=gen, dtype=dtype))
    return torch.cat(draws, dim=0)


def sample_images(base: BaseUNet, schedule: NoiseSchedule, cfg: SampleConfig, n: int,
                  height: int, width: int, stack: ControlStack | None = None,
                  cond_latent: torch.Tensor | None = None,
                  sample_indices=None) -> torch.Tensor:
    """Draw ``n`` images; with a control stack, conditioned on ``cond_latent``.

    ``sample_indices`` names the per-sample seed slots (default 0..n-1) so a
    long run chunked into batches still assigns each scene its own noise.
    """
    if stack is not None and cond_latent is None:
        raise UserInputError("conditioned sampling requires the codec latent")
    if cond_latent is not None and cond_latent.shape[0] != n:
        raise UserInputError(f"need one latent per sample: {cond_latent.shape[0]} vs n={n}")
    indices = list(range(n)) if sample_indices is None else list(sample_indices)
    if len(indices) != n:
        raise UserInputError(f"need one sample index per sample: {len(indices)} vs n={n}")
    domains = torch.full((n,), int(cfg.domain), dtype=torch.long)
    z_init = _stacked_initial_noise(cfg, indices, (base.in_channels, height, width))

    def denoise_fn(z, t):
        emb = base.conditioning(t, domains)
        if stack is None:
            return base.forward_with_control(z, t, domains, None, emb=emb)
        controls = stack.adapter(z, emb, cond_latent)
        return base.forward_with_control(z, t, domains, controls, emb=emb)

    with torch.no_grad():
        return ddim_sample(denoise_fn, schedule, cfg, z_init)


# ---------------------------------------------------------------------------
# Translation


def translate_many(depths, k: CameraIntrinsics, light: LightModel, base: BaseUNet,
                   stack: ControlStack, schedule: NoiseSchedule, cfg: SampleConfig,
                   normalization=NormalizationMode.PERCENTILE, sample_indices=None,
                   condition: str = "pps"):
    """Depth maps -> conditioning rasters -> conditioned samples, target domain.

    ``condition`` selects what the adapter sees: the shading map computed from
    depth (default) or the normalized raw depth (ablation baseline). Returns a
    list of (image, conditioning) pairs: the image as a (H, W, 3) float64
    array in [-1, 1] and the normalized conditioning raster that steered it
    (kept for downstream shading-consistency audits).
    """
    from .rasters import ScalarField

    shading_maps = []
    for depth in depths:
        if condition == "pps":
            field = compute_pps(depth, k, light)
        elif condition == "depth":
            field = ScalarField(values=depth.values.copy(), valid=depth.valid.copy())
        else:
            raise UserInputError(f"unknown conditioning {condition!r}; use 'pps' or 'depth'")
        if not field.valid.any():
            raise UserInputError("depth map yields no valid pixels to condition on")
        shading_maps.append(normalize_pps(field, normalization))
    # One layout for every entry point (fresh-trained or checkpoint-loaded),
    # so identical weights give bit-identical translations.
    base.to(memory_format=torch.channels_last)
    stack.to(memory_format=torch.channels_last)
    cond = torch.from_numpy(
        np.stack([s.values for s in shading_maps])[:, None, :, :].astype(np.float32)
    ).contiguous(memory_format=torch.channels_last)
    with torch.no_grad():
        latent = stack.codec.encode(cond)
        images = sample_images(base, schedule, cfg, len(shading_maps), k.height, k.width,
                               stack=stack, cond_latent=latent, sample_indices=sample_indices)
    arrays = images.detach().cpu().numpy().astype(np.float64).transpose(0, 2, 3, 1)
    return [(arrays[i], shading_maps[i]) for i in range(len(shading_maps))]


def translate(depth: DepthMap, k: CameraIntrinsics, light: LightModel, base: BaseUNet,
              stack: ControlStack, schedule: NoiseSchedule, cfg: SampleConfig,
              normalization=NormalizationMode.PERCENTILE):
    """Single-scene convenience wrapper around :func:`translate_many`."""
    return translate_many([depth], k, light, base, stack, schedule, cfg, normalization)[0]
