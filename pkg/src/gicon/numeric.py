"""Tensor primitives used by the model.

Everything here is a thin layer over torch; autodiff is torch's reverse mode.
The extra value is in the checks: shape errors, empty attention rows,
non-finite activations, and a central-difference gradient checker.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericError(ArithmeticError):
    """A non-finite value showed up where it must not."""


def resolve_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def masked_softmax(
    logits: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Softmax over the last axis of ``logits + bias``.

    ``mask`` is True where an entry may receive probability. Masked entries come
    out exactly zero. A row with nothing unmasked is an error, since it means a
    token has no context at all.
    """
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        mask = torch.broadcast_to(mask, logits.shape)
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("masked_softmax: fully masked row (empty attention context)")
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def segment_sum(messages: torch.Tensor, dst: torch.Tensor, n_nodes: int, dim: int = 0) -> torch.Tensor:
    """Sum rows of ``messages`` (along ``dim``) into ``n_nodes`` buckets given by ``dst``.

    Accumulation follows edge-list order, so results are reproducible.
    """
    dst = torch.as_tensor(dst, dtype=torch.long)
    if dst.numel() != messages.shape[dim]:
        raise ValueError(f"segment_sum: {dst.numel()} indices for {messages.shape[dim]} messages")
    if dst.numel() and (int(dst.max()) >= n_nodes or int(dst.min()) < 0):
        raise IndexError(f"segment_sum: destination index out of range for {n_nodes} nodes")
    shape = list(messages.shape)
    shape[dim] = n_nodes
    out = messages.new_zeros(shape)
    return out.index_add(dim, dst, messages)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def dropout(x: torch.Tensor, p: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout. ``generator=None`` or ``p == 0`` means evaluation mode."""
    if generator is None or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def assert_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {where}")
    return x


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-6,
    floor: float = 1e-8,
    max_coords: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is re-evaluated with each coordinate of ``params`` nudged by
    ``+-step``; the error per coordinate is ``|g - g_fd| / (|g_fd| + floor)``.
    With ``max_coords`` set, that many coordinates are drawn per tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords: Iterable[int] = torch.randperm(n, generator=generator)[:max_coords].tolist()
            else:
                coords = range(n)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                err = abs(gflat[i].item() - fd) / (abs(fd) + floor)
                worst = max(worst, err)
    return worst
