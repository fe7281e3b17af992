"""Scalar objectives for style transfer, contrastive learning and the tasks.

All losses reduce by mean so their scale does not depend on batch size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from . import core
from .errors import ContractError, DataError, DimensionError


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if self.lambda_cyc < 0 or self.lambda_idt < 0:
            raise ContractError("loss weights must be nonnegative")


def adversarial_losses(scores_real, scores_fake):
    """Least-squares GAN objectives ``(loss_D, loss_G)`` for one direction.

    The discriminator pushes real scores to 1 and fake scores to 0; the
    generator pushes fake scores to 1. Callers detach the fake batch before
    using ``loss_D`` to step the discriminator.
    """
    if scores_real.numel() == 0 or scores_fake.numel() == 0:
        raise ContractError("adversarial_losses: empty score map")
    if scores_real.shape != scores_fake.shape:
        raise DimensionError("adversarial_losses: score maps differ in shape")
    return discriminator_loss(scores_real, scores_fake), generator_loss(scores_fake)


def discriminator_loss(scores_real, scores_fake):
    return core.mean((scores_real - 1) ** 2) + core.mean(scores_fake**2)


def generator_loss(scores_fake):
    if scores_fake.numel() == 0:
        raise ContractError("generator_loss: empty score map")
    return core.mean((scores_fake - 1) ** 2)


def _mean_abs_diff(a, b, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return core.mean(core.abs(a - b))


def cycle_loss(x, x_reconstructed):
    return _mean_abs_diff(x, x_reconstructed, "cycle_loss")


def identity_loss(x, same_domain_output):
    return _mean_abs_diff(x, same_domain_output, "identity_loss")


def style_total(adv, cyc, idt, w: LossWeights):
    return adv + w.lambda_cyc * cyc + w.lambda_idt * idt


def info_nce(q, k_pos, k_negs, tau: float):
    """Contrastive (N+1)-way cross-entropy with the positive at index 0.

    ``q`` and ``k_pos`` are [D] or [B, D]; ``k_negs`` is [N, D] (N may be 0)
    and is shared by every query in the batch. Returns the batch mean.
    """
    if tau <= 0:
        raise ContractError(f"info_nce: tau must be positive, got {tau}")
    single = q.dim() == 1
    if single:
        q, k_pos = q.unsqueeze(0), k_pos.unsqueeze(0)
    if k_negs is None or (not torch.is_tensor(k_negs) and len(k_negs) == 0):
        k_negs = q.new_zeros((0, q.shape[-1]))
    elif not torch.is_tensor(k_negs):
        k_negs = torch.stack(list(k_negs))
    if q.shape != k_pos.shape or k_negs.shape[-1] != q.shape[-1]:
        raise DimensionError("info_nce: query and key lengths differ")
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    logits = torch.cat([pos, q @ k_negs.t()], dim=1) / tau
    return core.mean(core.logsumexp(logits, dim=1) - logits[:, 0])


def _check_depth_gt(gt):
    if not bool(torch.isfinite(gt).all()) or bool((gt <= 0).any()):
        raise DataError("depth ground truth must be finite and positive")


def depth_loss(preds: Sequence, gt):
    """Sum over scales of the mean absolute error against area-pooled gt.

    ``gt`` is [N, H, W] or [N, 1, H, W] in meters; each prediction is
    [N, 1, h, w] with H/h an integer factor.
    """
    if gt.dim() == 3:
        gt = gt.unsqueeze(1)
    _check_depth_gt(gt)
    total = 0.0
    for p in preds:
        factor = gt.shape[-1] // p.shape[-1]
        target = core.avg_pool(gt, factor)
        if target.shape != p.shape:
            raise DimensionError(f"depth_loss: prediction {tuple(p.shape)} vs gt {tuple(target.shape)}")
        total = total + core.mean(core.abs(p - target))
    return total


def majority_downsample(ids, factor: int, num_classes: int):
    """Most frequent id in each factor x factor block; ties go to the lowest id."""
    if factor == 1:
        return ids
    onehot = F.one_hot(ids.long(), num_classes).permute(0, 3, 1, 2).double()
    counts = F.avg_pool2d(onehot, factor)
    return counts.argmax(dim=1)


def _ce(logits, gt):
    if gt.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise DimensionError(f"seg_loss: logits {tuple(logits.shape)} vs labels {tuple(gt.shape)}")
    logp = core.log_softmax(logits, dim=1)
    picked = logp.gather(1, gt.long().unsqueeze(1))
    return -core.mean(picked)


def seg_loss(logits, gt):
    """Pixel-wise cross-entropy.

    ``logits`` is a single [N, C, H, W] tensor, a [C, H, W] tensor, or the
    decoder's list of scales; coarser scales use majority-pooled labels and
    every scale counts equally.
    """
    scales = list(logits) if isinstance(logits, (list, tuple)) else [logits]
    if scales[0].dim() == 3:
        scales = [s.unsqueeze(0) for s in scales]
        gt = gt.unsqueeze(0)
    c = scales[-1].shape[1]
    if bool((gt < 0).any()) or bool((gt >= c).any()):
        raise DataError(f"seg_loss: class id outside [0, {c})")
    total = 0.0
    for s in scales:
        factor = gt.shape[-1] // s.shape[-1]
        total = total + _ce(s, majority_downsample(gt, factor, c))
    return total
