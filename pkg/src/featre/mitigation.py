"""Trojan removal by flipping hyperplane neurons.

Given the binary mask of compromised feature elements, the mitigated model is
a wrapper computing head(flip(features(x))) where flip negates exactly the
masked elements. The wrapper leaves the original checkpoint untouched; a
weight-folding export is available when the flip can be absorbed into the
first linear layer after the split.
"""

from __future__ import annotations

from math import ceil

import torch
import torch.nn as nn

from .attacks import TriggerSpec
from .datakit import DatasetStats, LabeledDataset
from .featanalysis import top_fraction_mask
from .modelkit import LayeredClassifier, SplitModel, clone_model, evaluate


def binarize(mask: torch.Tensor, tau3: float = 0.05) -> torch.Tensor:
    """Soft mask to flip set: threshold at 0.5; if nothing clears it, keep the
    ceil(tau3 * size) largest entries (ties toward the lower flat index)."""
    hard = (mask.detach() >= 0.5).float()
    if hard.sum() > 0:
        return hard
    return top_fraction_mask(mask.detach(), tau3)


def _check_binary(mask: torch.Tensor) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("flip mask must be binary")


def flip(a: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Negate masked feature elements, leave the rest unchanged."""
    if a.shape[-mask.dim():] != mask.shape:
        raise ValueError(f"feature shape {tuple(a.shape)} does not end with "
                         f"mask shape {tuple(mask.shape)}")
    _check_binary(mask)
    return a * (1.0 - 2.0 * mask)


class MitigatedModel(nn.Module):
    """head(flip(features(x))) around an untouched split model."""

    def __init__(self, split: SplitModel, mask: torch.Tensor):
        super().__init__()
        if tuple(mask.shape) != tuple(split.feature_shape):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match "
                             f"feature shape {split.feature_shape}")
        _check_binary(mask)
        self.split = split
        self.register_buffer("flip_mask", mask.detach().clone())
        self.feature_shape = split.feature_shape
        self.num_classes = split.num_classes

    def features(self, x):
        return self.split.features(x)

    def head(self, a):
        return self.split.head(flip(a, self.flip_mask))

    def forward(self, x):
        return self.head(self.features(x))


def mitigate(split: SplitModel, mask: torch.Tensor) -> MitigatedModel:
    return MitigatedModel(split, mask)


def _atomic_modules(module: nn.Module):
    kids = list(module.children())
    if not kids:
        yield module
        return
    for kid in kids:
        yield from _atomic_modules(kid)


def channel_uniform(mask: torch.Tensor) -> bool:
    """True when every spatial position within a channel agrees."""
    if mask.dim() == 1:
        return True
    flat = mask.reshape(mask.shape[0], -1)
    return bool(torch.all((flat == flat[:, :1])))


def fold_flip(split: SplitModel, mask: torch.Tensor) -> LayeredClassifier:
    """Export a standalone classifier with the flip folded into weights.

    The fold negates the input columns of the first linear layer after the
    split. Legal when nothing parametric or nonlinear sits in between: a
    direct flatten handles any binary mask; a spatial average pooling path
    additionally requires the mask to be channel-uniform.
    """
    _check_binary(mask)
    if tuple(mask.shape) != tuple(split.feature_shape):
        raise ValueError("mask shape does not match feature shape")
    folded = clone_model(split.base)
    linear = None
    pooled = False
    post_names = [n for n in folded.layer_names if n not in split.pre_names]
    for name in post_names:
        for m in _atomic_modules(folded.blocks[name]):
            if isinstance(m, nn.Linear):
                linear = m
                break
            if isinstance(m, (nn.Flatten, nn.Identity, nn.Dropout)):
                continue
            if isinstance(m, (nn.AvgPool2d, nn.AdaptiveAvgPool2d)):
                pooled = True
                continue
            raise ValueError(f"cannot fold through {type(m).__name__}")
        if linear is not None:
            break
    if linear is None:
        raise ValueError("no linear layer after the split to fold into")
    with torch.no_grad():
        if linear.in_features == mask.numel() and not pooled:
            cols = torch.nonzero(mask.reshape(-1), as_tuple=False).reshape(-1)
        elif mask.dim() >= 1 and linear.in_features == mask.shape[0]:
            if not channel_uniform(mask):
                raise ValueError("pooled fold requires a channel-uniform mask")
            cols = torch.nonzero(mask.reshape(mask.shape[0], -1)[:, 0],
                                 as_tuple=False).reshape(-1)
        else:
            raise ValueError(
                f"linear input width {linear.in_features} matches neither the "
                f"mask size {mask.numel()} nor its channel count")
        linear.weight[:, cols] *= -1.0
    return folded


def mitigation_report(model: nn.Module, mitigated: nn.Module, test_set: LabeledDataset,
                      stats: DatasetStats, attack: TriggerSpec) -> dict:
    """BA/ASR on the held-out test set before and after mitigation."""
    before = evaluate(model, test_set, stats, attack)
    after = evaluate(mitigated, test_set, stats, attack)
    return {
        "BA_before": before["BA"],
        "ASR_before": before["ASR"],
        "BA_after": after["BA"],
        "ASR_after": after["ASR"],
    }
