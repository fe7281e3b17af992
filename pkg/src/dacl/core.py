"""Numeric core: tensor ops with reverse-mode differentiation.

Tensors are ``torch.Tensor`` values and the computation graph is torch's
autograd tape. Every op here adds the shape and finiteness checks the rest
of the package relies on. ``grad_check`` is a finite-difference oracle that
never touches autograd when computing its numeric side.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, DomainError, NumericError

Tensor = torch.Tensor

IN_EPS = 1e-5


def _finite(out: Tensor, op: str) -> Tensor:
    if not bool(torch.isfinite(out).all()):
        raise NumericError(f"{op}: non-finite value in output")
    return out


def tensor(data, dtype=torch.float32, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    _finite(t, "tensor")
    return t.requires_grad_(requires_grad)


def _broadcastable(a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape or a.dim() == 0 or b.dim() == 0:
        return True
    # broadcasting is allowed over the leading batch dim only
    lo, hi = (a, b) if a.dim() <= b.dim() else (b, a)
    if lo.dim() == hi.dim():
        return lo.shape[1:] == hi.shape[1:] and (lo.shape[0] == 1 or hi.shape[0] == 1)
    return lo.dim() == hi.dim() - 1 and lo.shape == hi.shape[1:]


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(x, dtype=like.dtype)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if not _broadcastable(a, b):
        raise DimensionError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")
    return _finite(a + b, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if not _broadcastable(a, b):
        raise DimensionError(f"mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")
    return _finite(a * b, "mul")


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return F.leaky_relu(x, slope)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # torch's abs has subgradient 0 at x == 0, as required
    return torch.abs(x)


def log(x: Tensor) -> Tensor:
    if bool((x <= 0).any()):
        raise DomainError("log: non-positive input")
    return _finite(torch.log(x), "log")


def exp(x: Tensor) -> Tensor:
    return _finite(torch.exp(x), "exp")


def mean(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:
    if x.numel() == 0:
        raise ContractError("mean: empty tensor")
    if dim is None:
        return x.mean()
    return x.mean(dim=dim, keepdim=keepdim)


def logsumexp(x: Tensor, dim: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along ``dim`` (dimension removed)."""
    m = x.detach().amax(dim=dim, keepdim=True)
    return (x - m).exp().sum(dim=dim).log() + m.squeeze(dim)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return x - logsumexp(x, dim).unsqueeze(dim)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dim, shifted by the row max."""
    z = x - x.detach().amax(dim=-1, keepdim=True)
    e = z.exp()
    return e / e.sum(dim=-1, keepdim=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0] or b.dim() != 2:
        raise DimensionError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    return add(matmul(x, weight.t()), bias)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise DimensionError(
                f"concat: {tuple(ref.shape)} vs {tuple(t.shape)} differ outside the channel dim"
            )
    return torch.cat(list(tensors), dim=1)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.dim() != 4:
        raise DimensionError("global_avg_pool expects N,C,H,W")
    return x.mean(dim=(2, 3))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of two."""
    if x.dim() != 4:
        raise DimensionError("upsample2x expects N,C,H,W")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Area-average downsampling by an integer factor."""
    if factor == 1:
        return x
    if x.shape[-1] % factor or x.shape[-2] % factor:
        raise DimensionError(f"avg_pool: {tuple(x.shape)} not divisible by {factor}")
    return F.avg_pool2d(x, factor)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError("conv2d expects N,C,H,W input and F,C,kh,kw weight")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: weight expects {weight.shape[1]} input channels, got {x.shape[1]}"
        )
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError("conv2d: bias must have one entry per filter")
    return _finite(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: int = 2,
    padding: int = 1,
    output_padding: int = 1,
) -> Tensor:
    """Transposed convolution; weight is [C_in, F, kh, kw]."""
    if x.dim() != 4 or weight.dim() != 4 or weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"conv_transpose2d: weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}"
        )
    out = F.conv_transpose2d(
        x, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )
    return _finite(out, "conv_transpose2d")


def instance_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = IN_EPS) -> Tensor:
    """Per-sample, per-channel standardisation with optional affine."""
    if x.dim() != 4:
        raise DimensionError("instance_norm expects N,C,H,W")
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = ((x - mu) ** 2).mean(dim=(2, 3), keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight.view(1, -1, 1, 1)
    if bias is not None:
        y = y + bias.view(1, -1, 1, 1)
    return _finite(y, "instance_norm")


def backward(loss: Tensor, params: Mapping[str, Tensor], retain_graph: bool = True) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(param) into each parameter's ``.grad``.

    Returns the gradient store keyed by parameter name. Repeated calls on the
    same graph add up, so callers reset with :func:`zero_grad` between steps.
    """
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite loss {loss.detach().item()}")
    loss.backward(retain_graph=retain_graph)
    out = {}
    for name, p in params.items():
        if p.requires_grad:
            out[name] = p.grad if p.grad is not None else torch.zeros_like(p)
    return out


def zero_grad(params: Mapping[str, Tensor] | Iterable[Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between central differences and autograd.

    ``f`` recomputes a scalar from the current values of ``params``.
    Per coordinate the error is ``|fd - ad| / max(1e-8, |fd| + |ad|)``.
    With ``max_coords`` only that many coordinates per tensor are probed,
    chosen by a seeded generator.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in tensors:
        if p.dtype != torch.float64:
            raise ContractError("grad_check runs in 64-bit mode; cast parameters to float64")
    zero_grad(tensors)
    for p in tensors:
        p.requires_grad_(True)
    loss = f()
    if loss.dim() != 0:
        raise ContractError("grad_check: f must return a scalar")
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in tensors]
    zero_grad(tensors)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, ad in zip(tensors, analytic):
            flat = p.view(-1)
            n = flat.numel()
            coords = range(n)
            if max_coords is not None and n > max_coords:
                coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(f())
                flat[i] = orig - eps
                fm = float(f())
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"grad_check: non-finite f at coordinate {i}")
                fd = (fp - fm) / (2 * eps)
                a = ad.view(-1)[i].item()
                err = math.fabs(fd - a) / max(1e-8, math.fabs(fd) + math.fabs(a))
                worst = max(worst, err)
    return worst
