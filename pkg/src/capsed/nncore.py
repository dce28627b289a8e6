"""Differentiable primitives, a finite-difference gradient oracle, and the
checkpoint container.

The network is built from exactly the primitive set below. Forward/backward
is delegated to torch (CPU); the gradient contract is enforced by
`grad_check`, a central-finite-difference oracle that is independent of
autograd. Tensors follow torch semantics: `.shape`, dense row-major values,
`.requires_grad`, additive `.grad` accumulation.

Checkpoints are flat key -> array containers: a zip file whose entries are
NumPy `.npy` payloads (shape header + little-endian data), keys being
hierarchical parameter names such as ``cnn.blocks.0.conv_gate.weight``. An
optional ``__config__`` entry holds a UTF-8 JSON byte array describing the
model configuration.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when a primitive rejects its inputs; names the primitive and dims."""


def _require(cond: bool, primitive: str, detail: str) -> None:
    if not cond:
        raise ShapeError(f"{primitive}: {detail}")


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------

def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           padding: int | tuple[int, int] = 0) -> torch.Tensor:
    _require(x.dim() == 4, "conv2d", f"expected 4-d input (N,C,H,W), got shape {tuple(x.shape)}")
    _require(weight.dim() == 4, "conv2d", f"expected 4-d weight, got shape {tuple(weight.shape)}")
    _require(x.shape[1] == weight.shape[1], "conv2d",
             f"input channels {x.shape[1]} != weight in-channels {weight.shape[1]}")
    return F.conv2d(x, weight, bias, stride=1, padding=padding)


def batch_norm(x: torch.Tensor, running_mean: torch.Tensor, running_var: torch.Tensor,
               weight: torch.Tensor, bias: torch.Tensor, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> torch.Tensor:
    _require(x.shape[1] == weight.shape[0], "batch_norm",
             f"channels {x.shape[1]} != weight size {weight.shape[0]}")
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def hadamard(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.shape == b.shape, "hadamard", f"shape {tuple(a.shape)} != {tuple(b.shape)}")
    return a * b


def avg_pool2d(x: torch.Tensor, kernel: tuple[int, int]) -> torch.Tensor:
    _require(x.dim() == 4, "avg_pool2d", f"expected 4-d input, got shape {tuple(x.shape)}")
    return F.avg_pool2d(x, kernel)


def max_pool2d(x: torch.Tensor, kernel: tuple[int, int]) -> torch.Tensor:
    _require(x.dim() == 4, "max_pool2d", f"expected 4-d input, got shape {tuple(x.shape)}")
    return F.max_pool2d(x, kernel)


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    _require(x.shape[-1] == weight.shape[1], "dense",
             f"input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    _require(table.dim() == 2, "embedding", f"expected 2-d table, got shape {tuple(table.shape)}")
    return F.embedding(ids, table)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    _require(x.shape[-1] == weight.shape[0], "layer_norm",
             f"feature dim {x.shape[-1]} != weight size {weight.shape[0]}")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              additive_mask: torch.Tensor | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention.

    q: (..., Lq, D), k/v: (..., Lk, D). `additive_mask` is broadcast onto the
    (..., Lq, Lk) score matrix before the softmax; use -inf to exclude keys.
    Masked entries get exactly zero weight. Rows with every key masked are the
    caller's responsibility (they would produce NaNs).
    """
    _require(q.shape[-1] == k.shape[-1], "attention",
             f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    _require(k.shape[-2] == v.shape[-2], "attention",
             f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
    if additive_mask is not None:
        scores = scores + additive_mask
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def gru_cell(x: torch.Tensor, h: torch.Tensor, weight_ih: torch.Tensor,
             weight_hh: torch.Tensor, bias_ih: torch.Tensor,
             bias_hh: torch.Tensor) -> torch.Tensor:
    """One GRU step, gate order (reset, update, new) as in torch's GRU."""
    _require(x.shape[-1] == weight_ih.shape[1], "gru_cell",
             f"input size {x.shape[-1]} != weight_ih in-size {weight_ih.shape[1]}")
    _require(h.shape[-1] * 3 == weight_hh.shape[0], "gru_cell",
             f"hidden size {h.shape[-1]} incompatible with weight_hh rows {weight_hh.shape[0]}")
    gi = F.linear(x, weight_ih, bias_ih)
    gh = F.linear(h, weight_hh, bias_hh)
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    """Inverted dropout: activations are scaled by 1/(1-p) at train time."""
    return F.dropout(x, p=p, training=training)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    shapes = [tuple(t.shape) for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        other = list(s)
        d = dim % len(base)
        other[d] = base[d]
        _require(other == base, "concat", f"incompatible shapes {shapes} along dim {dim}")
    return torch.cat(list(tensors), dim=dim)


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor,
                    reduction: str = "mean") -> torch.Tensor:
    _require(logits.shape == targets.shape, "bce_with_logits",
             f"logits shape {tuple(logits.shape)} != targets shape {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets, reduction=reduction)


def reduce_mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x.mean(dim=dim)


def reduce_max(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x.amax(dim=dim)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

EPS_FLOOR = 1e-8


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               epsilon: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    `fn` must be a deterministic map from the given tensors to one output
    tensor. The output is reduced to a scalar with a fixed random probe so
    that every output element influences the check. Only inputs with
    ``requires_grad`` set are perturbed. A non-finite analytic gradient is
    reported as +inf (a failure), never raised.

    Relative error per element: |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    inputs = [t for t in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    probe = torch.rand(out.shape, generator=gen, dtype=out.dtype) + 0.5

    def scalar(*args: torch.Tensor) -> torch.Tensor:
        return (fn(*args) * probe).sum()

    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        raise ValueError("grad_check: no input has requires_grad set")
    analytic = torch.autograd.grad(scalar(*inputs), checked)
    if any(not torch.isfinite(g).all() for g in analytic):
        return float("inf")

    worst = 0.0
    with torch.no_grad():
        detached = [t.detach().clone() for t in inputs]
        for which, grad in zip([i for i, t in enumerate(inputs) if t.requires_grad], analytic):
            base = detached[which]
            flat = base.reshape(-1)
            gflat = grad.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                hi = scalar(*detached).item()
                flat[j] = orig - epsilon
                lo = scalar(*detached).item()
                flat[j] = orig
                fd = (hi - lo) / (2.0 * epsilon)
                a = gflat[j].item()
                denom = max(abs(a), abs(fd), EPS_FLOOR)
                worst = max(worst, abs(a - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _to_little_endian(a: np.ndarray) -> np.ndarray:
    if a.dtype.kind == "f":
        return a.astype(a.dtype.newbyteorder("<"), copy=False)
    return a


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a flat key->array container (zip of .npy entries)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, _to_little_endian(np.asarray(arrays[key])))
            # fixed date_time keeps the container byte-reproducible
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            key = name[:-4] if name.endswith(".npy") else name
            arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            if arr.dtype.kind == "f":
                arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
            out[key] = arr
    return out


def save_state(path, state_dict: dict[str, torch.Tensor], config: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in state_dict.items()}
    if config is not None:
        payload = json.dumps(config, sort_keys=True).encode("utf-8")
        arrays["__config__"] = np.frombuffer(payload, dtype=np.uint8).copy()
    save_arrays(path, arrays)


def load_state(path) -> tuple[dict[str, torch.Tensor], dict | None]:
    arrays = load_arrays(path)
    config = None
    raw = arrays.pop("__config__", None)
    if raw is not None:
        config = json.loads(raw.tobytes().decode("utf-8"))
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    return state, config
