"""Differentiable building blocks shared by the detector and the exit policy.

Autograd comes from torch; everything here is a thin, shape-checked layer on
top of it plus the pieces torch does not give us directly: a versioned
parameter store, the ``EXL1`` checkpoint format and a finite-difference
gradient checker used by the test-suite.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, DivergenceError, TruncatedFileError, BadMagicError

Tensor = torch.Tensor

LAYER_NORM_EPS = 1e-5
CHECKPOINT_MAGIC = b"EXL1"


@contextlib.contextmanager
def float64_mode():
    """Temporarily make float64 the default dtype (used by gradient checks)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _check_width(x: Tensor, expected: int, what: str) -> None:
    if x.dim() == 0 or x.shape[-1] != expected:
        raise DimensionError(f"{what}: expected inner extent {expected}, got shape {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dense_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x W + b`` with ``W`` stored as (in, out)."""
    _check_width(x, weight.shape[0], "dense_forward")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


class Dense(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, init: str = "uniform", bias: bool = True):
        super().__init__()
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"Dense widths must be positive, got {in_dim}->{out_dim}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None
        self.reset_parameters(init)

    def reset_parameters(self, init: str = "uniform") -> None:
        with torch.no_grad():
            if init == "kaiming":
                # fan_in mode for a (in, out) layout means std = sqrt(2 / in)
                self.weight.normal_(0.0, math.sqrt(2.0 / self.in_dim))
                if self.bias is not None:
                    self.bias.zero_()
            elif init == "uniform":
                bound = 1.0 / math.sqrt(self.in_dim)
                self.weight.uniform_(-bound, bound)
                if self.bias is not None:
                    self.bias.uniform_(-bound, bound)
            elif init == "zeros":
                self.weight.zero_()
                if self.bias is not None:
                    self.bias.zero_()
            else:
                raise ConfigError(f"unknown init scheme {init!r}")

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.weight, self.bias)


class MLP(nn.Module):
    """Stack of Dense layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], init: str = "kaiming"):
        super().__init__()
        if len(widths) < 2:
            raise ConfigError(f"MLP needs at least input and output widths, got {list(widths)}")
        self.layers = nn.ModuleList(Dense(a, b, init=init) for a, b in zip(widths[:-1], widths[1:]))

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def gru_step(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU cell update; gates are packed as [reset, update, candidate]."""
    hidden = w_hh.shape[0]
    _check_width(x, w_ih.shape[0], "gru_step input")
    _check_width(h, hidden, "gru_step hidden")
    gi = x @ w_ih + b_ih
    gh = h @ w_hh + b_hh
    i_r, i_z, i_n = gi.split(hidden, dim=-1)
    h_r, h_z, h_n = gh.split(hidden, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


class GRUCell(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        if in_dim <= 0 or hidden <= 0:
            raise ConfigError(f"GRU widths must be positive, got {in_dim}, {hidden}")
        self.in_dim, self.hidden = in_dim, hidden
        self.w_ih = nn.Parameter(torch.empty(in_dim, 3 * hidden))
        self.w_hh = nn.Parameter(torch.empty(hidden, 3 * hidden))
        self.b_ih = nn.Parameter(torch.empty(3 * hidden))
        self.b_hh = nn.Parameter(torch.empty(3 * hidden))
        bound = 1.0 / math.sqrt(hidden)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-bound, bound)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, LAYER_NORM_EPS)


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder block that also hands back its attention map."""

    def __init__(self, dim: int, ffn_dim: int, heads: int = 1, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"model width {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.dropout = dim, heads, dropout
        self.qkv = Dense(dim, 3 * dim)
        self.out = Dense(dim, dim)
        self.ff1 = Dense(dim, ffn_dim)
        self.ff2 = Dense(ffn_dim, dim)
        self.ln1_g = nn.Parameter(torch.ones(dim))
        self.ln1_b = nn.Parameter(torch.zeros(dim))
        self.ln2_g = nn.Parameter(torch.ones(dim))
        self.ln2_b = nn.Parameter(torch.zeros(dim))

    def forward(self, seq: Tensor) -> tuple[Tensor, Tensor]:
        return attention_encoder_forward(seq, self)


def attention_encoder_forward(seq: Tensor, layer: EncoderLayer) -> tuple[Tensor, Tensor]:
    """Self-attention + feed-forward block.

    ``seq`` is (..., n, dim). Returns the transformed sequence and the
    attention weights with shape (..., heads, n, n); every row sums to one.
    """
    if seq.dim() < 2 or seq.shape[-2] == 0:
        raise DimensionError(f"attention encoder needs a non-empty sequence, got shape {tuple(seq.shape)}")
    _check_width(seq, layer.dim, "attention_encoder_forward")
    *lead, n, d = seq.shape
    h = layer.heads
    hd = d // h
    q, k, v = layer.qkv(seq).split(d, dim=-1)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(*lead, n, h, hd).transpose(-3, -2)

    q, k, v = heads(q), heads(k), heads(v)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    attn = softmax(scores)
    mixed = (attn @ v).transpose(-3, -2).reshape(*lead, n, d)
    mixed = layer.out(mixed)
    if layer.dropout > 0.0 and layer.training:
        mixed = F.dropout(mixed, layer.dropout)
    x = layer_norm(seq + mixed, layer.ln1_g, layer.ln1_b)
    ff = layer.ff2(F.relu(layer.ff1(x)))
    if layer.dropout > 0.0 and layer.training:
        ff = F.dropout(ff, layer.dropout)
    x = layer_norm(x + ff, layer.ln2_g, layer.ln2_b)
    return x, attn


def sinusoidal_positions(n: int, dim: int) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * idx / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table.to(torch.get_default_dtype())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax(logits: Tensor, dim: int = -1) -> Tensor:
    if logits.numel() == 0:
        raise DimensionError("softmax of an empty tensor")
    shifted = logits - logits.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over any leading batch axes."""
    labels = torch.as_tensor(label, dtype=torch.long)
    n_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {labels.tolist()}")
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, labels.reshape(*logp.shape[:-1], 1)).squeeze(-1)
    return -picked.mean()


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """``(1/L) * sum_j ||a_j - b_j||_1`` for (..., L, F) sequences, averaged over leading axes.

    The subgradient of |x| at 0 is 0 (torch's sign convention).
    """
    if a.shape != b.shape:
        raise DimensionError(f"l1_mean: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() < 2:
        raise DimensionError("l1_mean expects (..., L, F) sequences")
    if a.shape[-2] == 0:
        return a.sum() * 0.0
    per_vector = (a - b).abs().sum(dim=-1)
    return per_vector.mean()


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named view over a module's parameters with a monotone version counter."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.version = 0

    @property
    def params(self) -> "OrderedDict[str, nn.Parameter]":
        return OrderedDict(self.module.named_parameters())

    @property
    def grads(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, p in self.module.named_parameters():
            out[name] = p.grad if p.grad is not None else torch.zeros_like(p)
        return out

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None

    def checksum(self) -> str:
        return parameter_checksum(self.module)


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class OptimizerConfig:
    algorithm: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("adam", "adamw"):
            raise ConfigError(f"optimizer algorithm must be adam or adamw, got {self.algorithm!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"betas must lie in [0, 1), got {b}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight decay must be >= 0 and eps > 0")

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """Adam / AdamW bound to a ParameterStore.

    ``adam`` folds weight decay into the gradient (L2); ``adamw`` decays the
    weights directly, decoupled from the moment estimates.
    """

    def __init__(self, store: ParameterStore, cfg: OptimizerConfig):
        self.store, self.cfg = store, cfg
        cls = torch.optim.AdamW if cfg.algorithm == "adamw" else torch.optim.Adam
        self._opt = cls(
            store.module.parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def set_lr(self, lr: float) -> None:
        for group in self._opt.param_groups:
            group["lr"] = lr

    def step(self) -> None:
        optimizer_step(self.store, self)


def optimizer_step(store: ParameterStore, optimizer: Optimizer) -> ParameterStore:
    for name, p in store.module.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    optimizer._opt.step()
    store.version += 1
    return store


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-3) -> Tensor:
    """Central finite differences of the scalar ``fn()`` w.r.t. every entry of ``t``."""
    grad = torch.zeros_like(t)
    flat = t.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: Tensor, b: Tensor) -> float:
    num = float((a - b).norm())
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return num / den


def grad_check(fn: Callable[[], Tensor], tensors: Iterable[Tensor], eps: float = 1e-3) -> dict[str, float]:
    """Compare autograd against finite differences for each tensor.

    ``tensors`` may be a mapping of names to leaf tensors or a plain iterable.
    Returns the norm-wise relative error per tensor.
    """
    if isinstance(tensors, Mapping):
        items = list(tensors.items())
    else:
        items = [(str(i), t) for i, t in enumerate(tensors)]
    for _, t in items:
        t.grad = None
    out = fn()
    out.backward()
    errors = {}
    for name, t in items:
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        errors[name] = relative_error(analytic, numeric_grad(fn, t, eps))
    return errors


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``EXL1``: per parameter u64 name length, UTF-8 name, u64 rank,
    u64 extents, then row-major float32 values; all little-endian."""
    chunks = [CHECKPOINT_MAGIC]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not an EXL1 checkpoint")
    pos, out = 4, OrderedDict()

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        out[name] = values.copy()
    return out


def module_to_checkpoint(module: nn.Module, path) -> None:
    save_checkpoint(path, OrderedDict((k, v) for k, v in module.state_dict().items()))


def checkpoint_to_module(module: nn.Module, path) -> nn.Module:
    arrays = load_checkpoint(path)
    expected = module.state_dict()
    if list(arrays) != list(expected):
        raise DimensionError(f"{path}: parameter names do not match the model")
    state = OrderedDict()
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise DimensionError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(expected[name].shape)}")
        state[name] = torch.from_numpy(arr).to(expected[name].dtype)
    module.load_state_dict(state)
    return module
