"""Cross-modal attention between the text and code encodings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .encoders import EncodedVisit, Linear
from .numerics import ConfigError, ShapeError, softmax

MODES = ("cross", "ablation")


class EmptyContextError(ShapeError):
    pass


def cross_modal_attend(query_cls, other_tokens, other_mask, proj: nn.Module | None = None,
                       return_weights: bool = False):
    """One [CLS] query attending over the other modality's token matrix.

    Keys and values are both the (projected) token matrix; the score scale
    uses the query width, and the query is added back as a residual.
    """
    kv = other_tokens if proj is None else proj(other_tokens)
    if kv.shape[-1] != query_cls.shape[-1]:
        raise ShapeError(f"key width {kv.shape[-1]} != query width {query_cls.shape[-1]}; pass a projection")
    if not bool(other_mask.any(dim=1).all()):
        raise EmptyContextError("other modality is fully masked for some row")
    scores = (kv @ query_cls[:, :, None]).squeeze(-1) / math.sqrt(query_cls.shape[-1])  # [B, S]
    weights = softmax(scores, axis=-1, mask=other_mask)
    out = (weights[:, None, :] @ kv).squeeze(1) + query_cls
    return (out, weights) if return_weights else out


@dataclass
class AugmentedReps:
    """Per code stream: ``a_text[s]`` (text query over stream s) and ``a_code[s]``."""

    a_text: dict[str, torch.Tensor]
    a_code: dict[str, torch.Tensor]
    text_over_code: dict[str, torch.Tensor] = field(default_factory=dict)
    code_over_text: dict[str, torch.Tensor] = field(default_factory=dict)


class CrossModalFusion(nn.Module):
    def __init__(self, text_width: int, code_width: int):
        super().__init__()
        self.code_to_text = Linear(code_width, text_width)
        self.text_to_code = Linear(text_width, code_width)

    def forward(self, text: EncodedVisit, codes: dict[str, EncodedVisit], mode: str = "cross") -> AugmentedReps:
        return fuse_visit(text, codes, self, mode)


def fuse_visit(text: EncodedVisit, codes: dict[str, EncodedVisit], fusion: CrossModalFusion,
               mode: str = "cross") -> AugmentedReps:
    """Augment each code stream and the text against one another.

    ``mode="ablation"`` returns the raw [CLS] rows with no cross terms.
    """
    if mode not in MODES:
        raise ConfigError(f"fusion mode must be one of {MODES}, got {mode!r}")
    reps = AugmentedReps({}, {})
    for name, enc in codes.items():
        if enc.z.shape[0] != text.z.shape[0]:
            raise ShapeError(f"stream {name!r} batch size differs from text")
        if mode == "ablation":
            reps.a_text[name] = text.cls
            reps.a_code[name] = enc.cls
            continue
        reps.a_text[name], reps.text_over_code[name] = cross_modal_attend(
            text.cls, enc.z, enc.mask, fusion.code_to_text, return_weights=True)
        reps.a_code[name], reps.code_over_text[name] = cross_modal_attend(
            enc.cls, text.z, text.mask, fusion.text_to_code, return_weights=True)
    return reps


def attention_records(visit_ids, text_tokens, code_tokens, reps: AugmentedReps, stream: str) -> list[dict]:
    """Export rows: ``{"visit_id", "direction", "source_tokens", "weights"}``.

    ``text_tokens``/``code_tokens`` are per-row token strings including [CLS],
    aligned with the unpadded prefix of each encoded sequence.
    """
    out = []
    for r, vid in enumerate(visit_ids):
        for direction, weights, toks in (
            ("text_over_code", reps.text_over_code[stream], code_tokens[r]),
            ("code_over_text", reps.code_over_text[stream], text_tokens[r]),
        ):
            w = weights[r, : len(toks)].detach().double()
            out.append({
                "visit_id": vid,
                "direction": direction,
                "source_tokens": list(toks),
                "weights": [float(x) for x in w],
            })
    return out
