"""Dense-array layers, optimization, and checkpointing for the models here.

Arrays and reverse-mode differentiation are backed by torch (CPU, float32
storage with a float64 verification mode for gradient checks). This module
owns everything the rest of the package needs from it:

* shape-checked functional ops that fail with errors naming the op contract,
* residual blocks with optional conditioning-vector injection,
* seeded, deterministic parameter initialization,
* a decoupled-weight-decay Adam step that zeroes gradients afterwards,
* the binary checkpoint format (magic ``PPSC``),
* a central finite-difference gradient checker used by the test suite.

Training code keeps determinism by drawing every random tensor from
generators derived via :func:`derive_seed`, never from global RNG state.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, FormatError, NumericalError, ShapeError

_PPSC_MAGIC = b"PPSC"
_PPSC_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Seeding


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from integer parts (master seed, step, ...)."""
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    a, b = seq.generate_state(2, np.uint32)
    return int((int(a) << 31) ^ int(b))


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


# ---------------------------------------------------------------------------
# Shape-checked functional ops


def _need(cond: bool, op: str, detail: str, *shapes):
    if not cond:
        raise ShapeError(op, detail, *shapes)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _need(a.shape == b.shape or b.dim() == 0 or a.dim() == 0, "add",
          "operands must match exactly or one must be scalar", a.shape, b.shape)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _need(a.shape == b.shape or b.dim() == 0 or a.dim() == 0, "mul",
          "operands must match exactly or one must be scalar", a.shape, b.shape)
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _need(a.dim() == 2 and b.dim() == 2, "matmul", "expects 2-D operands", a.shape, b.shape)
    _need(a.shape[1] == b.shape[0], "matmul", "inner dimensions must agree", a.shape, b.shape)
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    _need(x.shape[-1] == weight.shape[1], "linear", "input features must match weight",
          x.shape, weight.shape)
    if bias is not None:
        _need(bias.shape == (weight.shape[0],), "linear", "bias must be (out_features,)",
              bias.shape, weight.shape)
    return F.linear(x, weight, bias)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, pad: int = 0) -> torch.Tensor:
    _need(x.dim() == 4 and weight.dim() == 4, "conv2d", "expects NCHW input and OIHW weight",
          x.shape, weight.shape)
    _need(x.shape[1] == weight.shape[1], "conv2d", "input channels must match weight",
          x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def conv_transpose2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1, pad: int = 0) -> torch.Tensor:
    _need(x.dim() == 4 and weight.dim() == 4, "conv_transpose2d",
          "expects NCHW input and IOHW weight", x.shape, weight.shape)
    _need(x.shape[1] == weight.shape[0], "conv_transpose2d", "input channels must match weight",
          x.shape, weight.shape)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=pad)


def group_norm(x: torch.Tensor, groups: int, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    _need(x.dim() >= 2, "group_norm", "expects at least (N, C) input", x.shape)
    _need(x.shape[1] % groups == 0, "group_norm",
          f"channels must be divisible by {groups} groups", x.shape)
    _need(weight.shape == (x.shape[1],) and bias.shape == (x.shape[1],), "group_norm",
          "affine parameters must be (C,)", weight.shape, bias.shape)
    return F.group_norm(x, groups, weight, bias)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def embed(table: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    _need(table.dim() == 2, "embed", "table must be (rows, dim)", table.shape)
    _need(index.dtype in (torch.int32, torch.int64), "embed", "index must be integral")
    return F.embedding(index, table)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _need(a.shape == b.shape, "mse", "operands must have identical shapes", a.shape, b.shape)
    return F.mse_loss(a, b)


def concat(tensors: Sequence[torch.Tensor], dim: int = 1) -> torch.Tensor:
    _need(len(tensors) > 0, "concat", "needs at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        other[dim] = base[dim]
        _need(other == base, "concat", f"shapes must match outside dim {dim}",
              tensors[0].shape, t.shape)
    return torch.cat(list(tensors), dim=dim)


def downsample(x: torch.Tensor) -> torch.Tensor:
    _need(x.dim() == 4, "downsample", "expects NCHW input", x.shape)
    _need(x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0, "downsample",
          "spatial size must be even", x.shape)
    return F.avg_pool2d(x, 2)


def upsample(x: torch.Tensor) -> torch.Tensor:
    _need(x.dim() == 4, "upsample", "expects NCHW input", x.shape)
    return F.interpolate(x, scale_factor=2, mode="nearest")


def assert_finite(x: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {name}")
    return x


# ---------------------------------------------------------------------------
# Blocks


def pick_groups(channels: int, preferred: int = 8) -> int:
    return preferred if channels % preferred == 0 else 1


class ResidualBlock(nn.Module):
    """norm -> silu -> conv, twice, with a 1x1 skip when channels change.

    When ``emb_dim`` is set, a learned projection of the conditioning vector
    is added between the two convolutions.
    """

    def __init__(self, cin: int, cout: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(pick_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.cond = nn.Linear(emb_dim, cout) if emb_dim else None
        self.norm2 = nn.GroupNorm(pick_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.cond is not None:
            if emb is None:
                raise ShapeError("residual_block", "conditioning vector required but missing")
            h = h + self.cond(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


# ---------------------------------------------------------------------------
# Initialization


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: He-normal conv/linear weights, zero biases,
    N(0, 0.02) embeddings, unit/zero norm affine. Walks modules in
    definition order with a single seeded generator."""
    gen = make_generator(derive_seed(seed, 0x1417))
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = sub.in_channels * sub.kernel_size[0] * sub.kernel_size[1]
            with torch.no_grad():
                sub.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, nn.Linear):
            with torch.no_grad():
                sub.weight.normal_(0.0, (2.0 / sub.in_features) ** 0.5, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, nn.Embedding):
            with torch.no_grad():
                sub.weight.normal_(0.0, 0.02, generator=gen)
        elif isinstance(sub, nn.GroupNorm):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.zero_()


def zero_init(module: nn.Module) -> nn.Module:
    """Zero every parameter; used for connection layers that must start silent."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# ---------------------------------------------------------------------------
# Optimizer


def make_adamw(params: Iterable[nn.Parameter], lr: float, weight_decay: float = 0.0) -> torch.optim.AdamW:
    # foreach batches the elementwise moment updates; being elementwise they
    # stay bitwise deterministic.
    return torch.optim.AdamW(
        params, lr=lr, betas=(ADAM_BETA1, ADAM_BETA2), eps=ADAM_EPS,
        weight_decay=weight_decay, foreach=True,
    )


def adamw_step(optimizer: torch.optim.AdamW) -> None:
    """One decoupled-weight-decay Adam update; gradients are zeroed after."""
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


# ---------------------------------------------------------------------------
# Checkpoints (magic PPSC, u32 version, u32 entries, then per entry:
# u32 name length, UTF-8 name, u32 rank, u32 dims..., little-endian f32 data)


def save_arrays(path, arrays: dict) -> None:
    import struct

    with open(path, "wb") as fh:
        fh.write(_PPSC_MAGIC)
        fh.write(struct.pack("<II", _PPSC_VERSION, len(arrays)))
        for name, value in arrays.items():
            arr = np.asarray(value, dtype=np.float32)
            if arr.ndim:
                arr = np.ascontiguousarray(arr)  # would promote 0-d to 1-d
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_arrays(path) -> dict:
    import struct

    def read_exact(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"{path}: truncated checkpoint ({what})")
        return buf

    arrays = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _PPSC_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", read_exact(fh, 8, "header"))
        if version != _PPSC_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read_exact(fh, 4, "name length"))
            name = read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", read_exact(fh, 4 * rank, "dims"))
            numel = int(np.prod(shape)) if rank else 1
            payload = read_exact(fh, numel * 4, f"payload of {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return arrays


def state_dict_arrays(module: nn.Module) -> dict:
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def save_module(path, module: nn.Module) -> None:
    save_arrays(path, state_dict_arrays(module))


def load_module_arrays(module: nn.Module, arrays: dict, context: str = "checkpoint") -> None:
    """Load named arrays into a module, verifying names and shapes both ways."""
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise CheckpointError(
            f"{context}: checkpoint does not match model "
            f"(missing: {missing or 'none'}, unexpected: {extra or 'none'})"
        )
    for name, tensor in state.items():
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{context}: shape mismatch for {name}: "
                f"checkpoint {arrays[name].shape} vs model {tuple(tensor.shape)}"
            )
    module.load_state_dict(
        {name: torch.from_numpy(arrays[name].copy()).to(state[name].dtype) for name in state}
    )


def load_module(path, module: nn.Module) -> None:
    """Load a checkpoint file into a module, verifying names and shapes."""
    load_module_arrays(module, load_arrays(path), context=str(path))


def optimizer_state_arrays(optimizer: torch.optim.AdamW) -> dict:
    """Flatten AdamW moments into named arrays for checkpointing."""
    arrays = {}
    index = 0
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param, {})
            if state:
                arrays[f"opt.{index}.step"] = np.array([float(state["step"])], dtype=np.float32)
                arrays[f"opt.{index}.exp_avg"] = state["exp_avg"].detach().numpy()
                arrays[f"opt.{index}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
            index += 1
    return arrays


def load_optimizer_state(optimizer: torch.optim.AdamW, arrays: dict) -> None:
    index = 0
    for group in optimizer.param_groups:
        for param in group["params"]:
            key = f"opt.{index}.step"
            if key in arrays:
                optimizer.state[param] = {
                    "step": torch.tensor(float(arrays[key][0])),
                    "exp_avg": torch.from_numpy(arrays[f"opt.{index}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"opt.{index}.exp_avg_sq"].copy()),
                }
            index += 1


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_gradcheck(loss_fn, params: Sequence[torch.Tensor], h: float | None = None,
                          max_components: int | None = None, seed: int = 0) -> float:
    """Compare autograd gradients of a scalar loss against central differences.

    ``loss_fn`` takes no arguments and evaluates the loss from ``params``
    (leaf tensors with ``requires_grad``). Checks every component unless
    ``max_components`` caps the per-tensor sample (drawn deterministically).
    Returns the maximum relative error max(|fd - ad| / max(|fd|, |ad|, 1)).
    """
    dtype = params[0].dtype
    if h is None:
        h = 1e-3 if dtype == torch.float32 else 1e-5
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    if loss.dim() != 0:
        raise ShapeError("gradcheck", f"loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(params, grads):
        flat = param.detach().reshape(-1)
        n = flat.numel()
        if max_components is not None and n > max_components:
            idx = rng.choice(n, size=max_components, replace=False)
        else:
            idx = np.arange(n)
        gflat = grad.reshape(-1)
        for i in idx:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
            plus = float(loss_fn())
            with torch.no_grad():
                flat[i] = original - h
            minus = float(loss_fn())
            with torch.no_grad():
                flat[i] = original
            fd = (plus - minus) / (2.0 * h)
            ad = float(gflat[i])
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1.0)
            worst = max(worst, rel)
    for p in params:
        p.grad = None
    return worst
