"""Dense tensor primitives, parameter containers and the checkpoint format.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch's autograd
tape.  The layer primitives below are written out explicitly so their
conventions (GRU gating, masked softmax semantics, Gumbel sampling) are fixed
here rather than inherited from ``torch.nn``.
"""
from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
import torch

Tensor = torch.Tensor

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"MSOC"


class NumcoreError(ValueError):
    pass


class DimensionError(NumcoreError):
    pass


class DegenerateRowError(NumcoreError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up; ``stage`` names where."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"non-finite values at stage '{stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def check_finite(x: Tensor, stage: str) -> Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NonFiniteError(stage, f"{bad} of {x.numel()} entries")
    return x


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if w.dim() != 2:
        raise DimensionError(f"weight must be 2-D, got shape {tuple(w.shape)}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"inner dimensions disagree: x[..., {x.shape[-1]}] vs w[{w.shape[0]}, ...]")
    y = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {tuple(b.shape)} != ({w.shape[1]},)")
        y = y + b
    return y


def softmax_rows(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis, optionally restricted to ``mask``.

    Masked entries come out as exact zeros. A row with no unmasked entry is
    an error; callers that can produce such rows must patch the mask first.
    """
    if mask is None:
        return torch.softmax(x, dim=-1)
    mask = mask.to(torch.bool)
    if mask.shape != x.shape:
        mask = mask.expand_as(x)
    if not mask.any(dim=-1).all():
        raise DegenerateRowError("softmax row with every entry masked")
    logits = x.masked_fill(~mask, float("-inf"))
    p = torch.softmax(logits, dim=-1)
    return p.masked_fill(~mask, 0.0)


def weighted_softmax_rows(x: Tensor, weights: Tensor, clamp: float = 60.0) -> Tensor:
    """Rows of ``w * exp(x) / sum(w * exp(x))``.

    Entries with zero weight are structurally absent: they contribute exactly
    zero and pass no gradient to ``weights``. Their true derivative
    ``exp(x_j) / sum(w * exp(x))`` is unbounded when ``x_j`` dominates the
    supported scores, which is what straight-through one-hot weights produce.
    With 0/1 weights this equals ``softmax_rows(x, weights > 0)``.
    """
    support = weights > 0
    if not support.any(dim=-1).all():
        raise DegenerateRowError("weighted softmax row with zero total weight")
    weights = torch.where(support, weights, weights.detach())
    ref = x.detach().masked_fill(~support, float("-inf")).amax(dim=-1, keepdim=True)
    e = torch.exp(torch.clamp(x - ref, max=clamp))
    num = weights * e
    return num / num.sum(dim=-1, keepdim=True)


def gumbel_noise(shape, rng: np.random.Generator, dtype=torch.float64) -> Tensor:
    """i.i.d. standard Gumbel samples ``-log(-log(u))`` with u in the open unit interval."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).eps)
    return torch.as_tensor(-np.log(-np.log(u)), dtype=dtype)


def gumbel_softmax(logits: Tensor, noise: Tensor, tau: float, mask: Tensor | None = None,
                   hard: bool = True) -> tuple[Tensor, Tensor]:
    """Gumbel-Softmax over the last axis.

    Returns ``(y, selected)`` where ``selected`` is the boolean support of the
    forward value. In hard mode the forward value is the exact one-hot argmax
    while the gradient is that of the soft sample (straight-through).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    soft = softmax_rows((logits + noise) / tau, mask)
    if not hard:
        return soft, soft > 0
    scores = soft.detach()
    if mask is not None:
        scores = scores.masked_fill(~mask.expand_as(scores), -1.0)
    index = scores.argmax(dim=-1, keepdim=True)
    one_hot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    # one_hot + (s - s) is exactly one_hot in the forward pass
    return one_hot + (soft - soft.detach()), one_hot > 0


def gru_cell(h_prev: Tensor, x: Tensor, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """One GRU step.

    Convention (gate order r, z, n along the last axis of the weights)::

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h

    so an update gate saturated at 1 keeps the previous state.
    """
    w_ih = params[prefix + "w_ih"]
    w_hh = params[prefix + "w_hh"]
    b_ih = params[prefix + "b_ih"]
    b_hh = params[prefix + "b_hh"]
    size = w_hh.shape[0]
    if h_prev.shape[-1] != size or w_hh.shape[1] != 3 * size or w_ih.shape[1] != 3 * size:
        raise DimensionError(
            f"GRU size mismatch: hidden {h_prev.shape[-1]}, w_hh {tuple(w_hh.shape)}, "
            f"w_ih {tuple(w_ih.shape)}")
    gi = affine(x, w_ih, b_ih)
    gh = affine(h_prev, w_hh, b_hh)
    i_r, i_z, i_n = gi.split(size, dim=-1)
    h_r, h_z, h_n = gh.split(size, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h_prev


class ParamSet:
    """Named parameters with gradient buffers and Adam moments."""

    def __init__(self, dtype=torch.float64):
        self.dtype = dtype
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.adam_m: dict[str, Tensor] = {}
        self.adam_v: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(value, dtype=self.dtype).clone().detach().requires_grad_(True)
        t.grad = torch.zeros_like(t)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def grads(self) -> dict[str, Tensor]:
        return {k: p.grad for k, p in self._params.items()}

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def to_dtype(self, dtype) -> "ParamSet":
        out = ParamSet(dtype)
        for k, p in self._params.items():
            out.add(k, p.detach())
        for k in self.adam_m:
            out.adam_m[k] = self.adam_m[k].to(dtype)
            out.adam_v[k] = self.adam_v[k].to(dtype)
        out.step_count = self.step_count
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.detach().cpu().numpy().copy() for k, p in self._params.items()}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, p in self._params.items():
            if k not in values:
                raise KeyError(f"missing parameter {k!r}")
            v = torch.as_tensor(np.asarray(values[k]), dtype=self.dtype)
            if v.shape != p.shape:
                raise DimensionError(
                    f"parameter {k!r}: expected shape {tuple(p.shape)}, got {tuple(v.shape)}")
            with torch.no_grad():
                p.copy_(v)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in params.items()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for _, p in params.items():
            p.grad.mul_(scale)
    return total


def adam_step(params: ParamSet, lr: float | Callable[[str], float],
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> ParamSet:
    """Bias-corrected Adam update in place; gradient buffers are zeroed afterwards.

    ``lr`` may be a callable mapping parameter name to its learning rate.
    """
    for name, p in params.items():
        if not torch.isfinite(p.grad).all():
            raise NonFiniteError("adam_step", f"gradient of {name!r} (|g|max="
                                 f"{float(p.grad.abs().nan_to_num(posinf=np.inf).max())})")
    params.step_count += 1
    t = params.step_count
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            if weight_decay:
                g = g + weight_decay * p
            m = params.adam_m.get(name)
            if m is None:
                m = params.adam_m[name] = torch.zeros_like(p)
                params.adam_v[name] = torch.zeros_like(p)
            v = params.adam_v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            rate = lr(name) if callable(lr) else lr
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-rate / c1)
    params.zero_grad()
    return params


# ---------------------------------------------------------------------------
# parameter initialisation

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (little endian):
#   u8  version
#   4s  magic "MSOC"
#   u32 metadata length, then metadata as UTF-8 JSON
#   u32 entry count
#   per entry: u16 name length, name, u8 ndim, u32 * ndim dims, u64 payload offset
#   payload: float32 values, offsets relative to the payload start

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    header = io.BytesIO()
    payload = io.BytesIO()
    header.write(struct.pack("<B", CHECKPOINT_VERSION))
    header.write(CHECKPOINT_MAGIC)
    header.write(struct.pack("<I", len(meta)))
    header.write(meta)
    header.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw = name.encode("utf-8")
        header.write(struct.pack("<H", len(raw)))
        header.write(raw)
        header.write(struct.pack("<B", arr.ndim))
        header.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.write(struct.pack("<Q", payload.tell()))
        payload.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.getvalue())
        fh.write(payload.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    data = Path(path).read_bytes()
    if not data:
        raise NumcoreError(f"{path}: empty checkpoint")
    version = data[0]
    if version != CHECKPOINT_VERSION:
        raise NumcoreError(f"{path}: unsupported checkpoint version {version}")
    if data[1:5] != CHECKPOINT_MAGIC:
        raise NumcoreError(f"{path}: bad magic")
    pos = 5
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    metadata = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append((name, shape, offset))
    tensors = OrderedDict()
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = pos + offset
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return tensors, metadata
