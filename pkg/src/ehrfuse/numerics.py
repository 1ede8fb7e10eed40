"""Tensor primitives, Adam, and a finite-difference gradient checker.

Tensors are ``torch.Tensor``; autograd supplies the reverse-mode pass except
for softmax, whose backward is written out here so the verification harness
can inject a deliberate fault into it.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
import torch


class NumericError(ArithmeticError):
    """Raised when a value that must be finite is not."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


_FAULTS: dict[str, bool] = {"softmax_backward_sign": False}


@contextlib.contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Temporarily enable a named fault (used by the mutation harness)."""
    if name not in _FAULTS:
        raise KeyError(f"unknown fault {name!r}; known: {sorted(_FAULTS)}")
    old = _FAULTS[name]
    _FAULTS[name] = True
    try:
        yield
    finally:
        _FAULTS[name] = old


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


class _MaskedSoftmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, keep, dim):
        if keep is not None:
            logits = logits.masked_fill(~keep, -math.inf)
        shifted = logits - logits.amax(dim=dim, keepdim=True)
        e = torch.exp(shifted)
        y = e / e.sum(dim=dim, keepdim=True)
        ctx.dim = dim
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad_out):
        (y,) = ctx.saved_tensors
        inner = (grad_out * y).sum(dim=ctx.dim, keepdim=True)
        grad_in = y * (grad_out - inner)
        if _FAULTS["softmax_backward_sign"]:
            grad_in = -grad_in
        return grad_in, None, None


def softmax(logits: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (broadcastable to ``logits``; truthy = keep) excludes positions,
    which receive exactly zero weight. Every slice must keep at least one
    position.
    """
    if logits.dim() == 0:
        raise ShapeError("softmax needs at least one axis")
    axis = axis % logits.dim()
    check_finite(logits, "softmax logits")
    keep = None
    if mask is not None:
        keep = torch.broadcast_to(mask.bool(), logits.shape)
        if not bool(keep.any(dim=axis).all()):
            raise ShapeError("softmax slice with every position masked")
    return _MaskedSoftmax.apply(logits, keep, axis)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    n = x.shape[-1]
    if n == 0:
        raise ShapeError("layer_norm over zero-length axis")
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise ShapeError(f"gain/bias width {gain.shape[-1]}/{bias.shape[-1]} != {n}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


class LayerNorm(torch.nn.Module):
    def __init__(self, width: int, eps: float = 1e-12):
        super().__init__()
        self.gain = torch.nn.Parameter(torch.ones(width))
        self.bias = torch.nn.Parameter(torch.zeros(width))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


def dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None, training: bool) -> torch.Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# parameters and Adam

@dataclass
class ParamGroup:
    name: str
    tensor: torch.nn.Parameter

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @property
    def grad(self) -> torch.Tensor:
        g = self.tensor.grad
        return torch.zeros_like(self.tensor) if g is None else g


def param_groups(module: torch.nn.Module) -> list[ParamGroup]:
    return [ParamGroup(n, p) for n, p in module.named_parameters()]


def zero_grads(groups: Iterable[ParamGroup]) -> None:
    for g in groups:
        g.tensor.grad = None


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled; 0 gives plain Adam
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ConfigError(f"Adam beta must lie in (0, 1), got {b}")


@torch.no_grad()
def adam_step(groups: list[ParamGroup], state: AdamState) -> None:
    """One bias-corrected Adam update in place; clears gradients afterwards.

    Frozen groups are skipped entirely, including their moments. Decoupled
    weight decay, when set, shrinks matrices only (not biases or norms).
    """
    if not state.lr > 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for g in groups:
        p = g.tensor
        if not p.requires_grad:
            continue
        grad = g.grad
        m = state.m.get(g.name)
        if m is None:
            m = state.m[g.name] = torch.zeros_like(p)
            state.v[g.name] = torch.zeros_like(p)
        v = state.v[g.name]
        m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
        if state.weight_decay and p.dim() > 1:
            p.mul_(1.0 - state.lr * state.weight_decay)
        p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    zero_grads(groups)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckEntry:
    name: str
    trainable: bool
    max_rel_error: float
    n_checked: int
    max_abs_analytic: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    groups: list[ParamGroup],
    samples: int = 5,
    seed: int = 0,
    h_scale: float = 1e-5,
    floor: float = 1e-12,
) -> list[GradCheckEntry]:
    """Compare autograd gradients with central differences.

    ``loss_fn`` evaluates the scalar loss from the current parameter values.
    For each group, ``samples`` random coordinates are perturbed by
    ``h = h_scale * (1 + |x|)``. Relative error uses the denominator
    ``max(|analytic|, |numeric|, floor)``; a floor above the finite-difference
    noise level keeps vanishing gradients from dominating the report. Frozen groups report the largest
    analytic gradient magnitude instead (which must be exactly zero).
    """
    for g in groups:
        if g.tensor.dtype != torch.float64:
            raise NumericError(f"grad_check requires float64 parameters ({g.name} is {g.tensor.dtype})")
    zero_grads(groups)
    loss = loss_fn()
    again = loss_fn()
    if loss.item() != again.item():
        raise DeterminismError(f"loss_fn not deterministic: {loss.item()!r} vs {again.item()!r}")
    check_finite(loss, "loss")
    loss.backward()
    analytic = {g.name: g.grad.detach().clone() for g in groups}
    zero_grads(groups)

    rng = np.random.default_rng(seed)
    report = []
    with torch.no_grad():
        for g in groups:
            flat = g.tensor.view(-1)
            a_flat = analytic[g.name].view(-1)
            if not g.trainable:
                peak = float(a_flat.abs().max()) if flat.numel() else 0.0
                report.append(GradCheckEntry(g.name, False, peak, 0, peak))
                continue
            idx = rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False)
            worst = 0.0
            for i in idx:
                i = int(i)
                x0 = flat[i].item()
                h = h_scale * (1.0 + abs(x0))
                flat[i] = x0 + h
                up = loss_fn().item()
                flat[i] = x0 - h
                down = loss_fn().item()
                flat[i] = x0
                num = (up - down) / (2.0 * h)
                ana = a_flat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
            report.append(GradCheckEntry(
                name=g.name,
                trainable=g.trainable,
                max_rel_error=worst,
                n_checked=len(idx),
                max_abs_analytic=float(a_flat[torch.as_tensor(idx)].abs().max()) if len(idx) else 0.0,
            ))
    return report
