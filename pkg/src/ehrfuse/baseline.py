"""Bag-of-tokens logistic regression, used only as a sanity oracle on synthetic labels."""
from __future__ import annotations

from typing import Sequence

import torch

from .data import VisitRecord


def bag_of_tokens(visits: Sequence[VisitRecord], words: Sequence[str]) -> torch.Tensor:
    """Binary presence matrix ``[len(visits), len(words)]`` (float64)."""
    col = {w: j for j, w in enumerate(words)}
    x = torch.zeros(len(visits), len(words), dtype=torch.float64)
    for i, v in enumerate(visits):
        for t in v.text_tokens:
            j = col.get(t)
            if j is not None:
                x[i, j] = 1.0
    return x


def fit_logistic(x: torch.Tensor, y: torch.Tensor, l2: float = 1e-3, iters: int = 200):
    """L2-regularized logistic regression fitted with L-BFGS; returns ``(weight, bias)``."""
    w = torch.zeros(x.shape[1], dtype=x.dtype, requires_grad=True)
    b = torch.zeros((), dtype=x.dtype, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=iters, line_search_fn="strong_wolfe")
    y = y.to(x.dtype)

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(x @ w + b, y) + l2 * (w @ w)
        loss.backward()
        return loss

    opt.step(closure)
    return w.detach(), b.detach()


def predict_logistic(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x @ w + b)
