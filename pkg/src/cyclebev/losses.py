"""Training objectives.

Segmentation tensors carry classes on axis -3, i.e. (..., C, H, W).  All
losses are mean-reduced, so duplicating a batch leaves them unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

PART_NAMES = ("bce1", "height", "align", "cycle", "bce2")
# baseline-only terms; weighted like the cycle term they replace
EXTRA_PARTS = ("feature_cycle",)
DEFAULT_CLASS_WEIGHTS = (0.03, 0.5, 1.0)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1e-3
    lambda3: float = 0.4
    lambda4: float = 1.0
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if any(w < 0 for w in self.class_weights):
            raise ValueError("class weights must be nonnegative")

    def coefficient(self, part: str) -> float:
        return {
            "bce1": 1.0,
            "height": self.lambda1,
            "align": self.lambda2,
            "cycle": self.lambda3,
            "bce2": self.lambda4,
            "feature_cycle": self.lambda3,
        }[part]


@dataclass
class LossReport:
    total: torch.Tensor
    parts: dict[str, torch.Tensor]
    absent: tuple[str, ...] = ()
    extra: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"total": float(self.total)}
        for name in PART_NAMES:
            out[name] = float(self.parts[name]) if name in self.parts else 0.0
        for name, value in self.parts.items():
            if name not in PART_NAMES:
                out[name] = float(value)
        out["absent"] = list(self.absent)
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def weighted_bce(logits: torch.Tensor, target: torch.Tensor, class_weights=DEFAULT_CLASS_WEIGHTS,
                 check_binary: bool = True) -> torch.Tensor:
    """Per-class BCE on logits, mean over pixels, weighted sum over classes."""
    _check_shapes(logits, target, "weighted_bce")
    if check_binary and not torch.all((target == 0) | (target == 1)):
        raise ValueError("weighted_bce: target must be binary")
    n_cls = logits.shape[-3]
    if len(class_weights) != n_cls:
        raise ValueError(f"weighted_bce: {len(class_weights)} weights for {n_cls} classes")
    target = target.to(logits.dtype)
    per_elem = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    per_class = per_elem.movedim(-3, 0).reshape(n_cls, -1).mean(dim=1)
    w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    return (w * per_class).sum()


def cycle_loss(pv_gt: torch.Tensor, pv_logits: torch.Tensor,
               class_weights=DEFAULT_CLASS_WEIGHTS) -> torch.Tensor:
    """Mean over cameras of the weighted BCE; camera axis is -4: (..., N_c, C, H, W)."""
    if pv_gt.dim() < 4 or pv_gt.shape[-4] != pv_logits.shape[-4]:
        raise ValueError("cycle_loss: camera count mismatch")
    _check_shapes(pv_logits, pv_gt, "cycle_loss")
    n_cam = pv_gt.shape[-4]
    per_cam = [
        weighted_bce(pv_logits.select(-4, i), pv_gt.select(-4, i), class_weights)
        for i in range(n_cam)
    ]
    return torch.stack(per_cam).mean()


def height_loss(h_gt: torch.Tensor, h_pred: torch.Tensor) -> torch.Tensor:
    """Squared l2 difference divided by the number of map cells."""
    _check_shapes(h_gt, h_pred, "height_loss")
    return ((h_gt - h_pred) ** 2).mean()


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def align_loss(bev: torch.Tensor, target: torch.Tensor, detach_target: bool = True) -> torch.Tensor:
    """Smooth-l1 (knee at 1) between VT features and the guide's features.

    With ``detach_target`` the guide is a constant target (frozen guide);
    otherwise gradients also reach the guide.
    """
    _check_shapes(bev, target, "align_loss")
    if detach_target:
        target = target.detach()
    return smooth_l1(bev - target).mean()


def feature_cycle_loss(feats: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between PV features and their reconstruction."""
    _check_shapes(feats, recon, "feature_cycle_loss")
    return (feats - recon).abs().mean()


def overall_loss(parts: dict[str, torch.Tensor], weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum of the five terms; absent terms contribute 0 and are listed."""
    unknown = set(parts) - set(PART_NAMES) - set(EXTRA_PARTS)
    if unknown:
        raise KeyError(f"overall_loss: unknown parts {sorted(unknown)}")
    total = None
    absent = []
    for name in PART_NAMES + EXTRA_PARTS:
        if name not in parts or parts[name] is None:
            if name in PART_NAMES:
                absent.append(name)
            continue
        value = parts[name]
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise FloatingPointError(f"overall_loss: non-finite {name} term")
        term = weights.coefficient(name) * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    kept = {k: v for k, v in parts.items() if v is not None}
    return LossReport(total=total, parts=kept, absent=tuple(absent))
