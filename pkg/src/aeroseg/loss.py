"""The three-term training objective.

* pixel-wise cross-entropy over labelled pixels,
* soft Dice loss over labelled pixels,
* a domain misalignment term: the mean log-probability the domain head
  assigns to the true domain tag. Minimizing that log-probability drives
  the head toward domain confusion, which aligns the shared features.

The total is ``l0 + lambda1 * l1 + lambda2 * l2``. The first two terms see
only samples that carry ground-truth masks; the misalignment term sees the
whole mixed batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, LabelError
from .model import ModelOutput
from .tensor import Tensor

IGNORE_INDEX = 255


def one_hot_indicators(truth: np.ndarray, num_classes: int,
                       ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
    """One-hot encode an index mask [N,H,W] -> ([N,K,H,W], valid [N,H,W]).

    Pixels equal to ``ignore_index`` get an all-zero indicator row; any
    other value outside [0, K) raises LabelError.
    """
    truth = np.asarray(truth)
    if truth.ndim == 2:
        truth = truth[None]
    valid = truth != ignore_index
    bad = valid & ((truth < 0) | (truth >= num_classes))
    if bad.any():
        offending = int(truth[bad].flat[0])
        raise LabelError(f"mask value {offending} outside [0, {num_classes})")
    safe = np.where(valid, truth, 0).astype(np.int64)
    onehot = np.zeros((truth.shape[0], num_classes) + truth.shape[1:], dtype=np.float64)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    onehot *= valid[:, None]
    return onehot, valid


def cross_entropy_pixelwise(seg_logits: Tensor, truth: np.ndarray,
                            ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored pixels of -log softmax at the true class."""
    num_classes = seg_logits.shape[1]
    onehot, valid = one_hot_indicators(truth, num_classes, ignore_index)
    if onehot.shape != seg_logits.shape:
        raise DimensionError(
            f"cross_entropy: logits {seg_logits.shape} vs mask-derived {onehot.shape}")
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: no pixels to score (all ignored)")
    log_probs = T.log_softmax(seg_logits)
    picked = T.mul(log_probs, Tensor(onehot))
    return T.mul(T.tensor_sum(picked), -1.0 / count)


def softmax_probabilities(seg_logits: Tensor) -> Tensor:
    """Per-pixel class probabilities (channel sums are 1 within 1e-9)."""
    return T.exp(T.log_softmax(seg_logits))


def soft_dice_loss(indicator: Union[Tensor, np.ndarray], probabilities: Tensor,
                   smoothing: float = 1e-6) -> Tensor:
    """1 - (2*sum(g*s) + eps) / (sum(g) + sum(s) + eps) over same-shape
    indicator g and probability s arrays. This is the overlap form itself;
    multi-class reduction happens in :func:`dice_loss` by feeding one-hot
    indicators whose class axis is folded into the sums."""
    g = indicator if isinstance(indicator, Tensor) else Tensor(np.asarray(indicator, dtype=np.float64))
    intersection = T.tensor_sum(T.mul(g, probabilities))
    numerator = T.add(T.mul(intersection, 2.0), smoothing)
    denominator = T.add(T.add(T.tensor_sum(g), T.tensor_sum(probabilities)), smoothing)
    return T.add(T.mul(T.div(numerator, denominator), -1.0), 1.0)


def dice_loss(soft: Tensor, truth: np.ndarray, smoothing: float = 1e-6,
              ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Soft Dice loss between [N,K,H,W] probabilities and an index mask.

    One-hot truth and predicted probabilities are summed over samples,
    pixels and classes together; ignored pixels are removed from both
    sides. Result lies in [0, 1].
    """
    num_classes = soft.shape[1]
    onehot, valid = one_hot_indicators(truth, num_classes, ignore_index)
    valid_k = np.broadcast_to(valid[:, None], soft.shape).astype(np.float64)
    masked_probs = T.mul(soft, Tensor(np.ascontiguousarray(valid_k)))
    return soft_dice_loss(onehot, masked_probs, smoothing)


def domain_misalignment_loss(domain_logits: Tensor, true_domains: np.ndarray,
                             eps_clamp: float = 1e-7) -> Tensor:
    """Mean log softmax probability of the true domain tag, clamped below
    at log(eps_clamp). The value is <= 0; minimizing it pushes the true
    domain's probability down (feature confusion)."""
    num_domains = domain_logits.shape[1]
    labels = np.asarray(true_domains, dtype=np.int64).reshape(-1)
    if labels.shape[0] != domain_logits.shape[0]:
        raise ContractError(
            f"domain loss: {labels.shape[0]} labels for {domain_logits.shape[0]} samples")
    if ((labels < 0) | (labels >= num_domains)).any():
        offending = int(labels[(labels < 0) | (labels >= num_domains)][0])
        raise LabelError(f"domain label {offending} outside [0, {num_domains})")
    onehot = np.zeros(domain_logits.shape, dtype=np.float64)
    onehot[np.arange(labels.size), labels] = 1.0
    log_probs = T.clamp_min(T.log_softmax(domain_logits), math.log(eps_clamp))
    picked = T.mul(log_probs, Tensor(onehot))
    return T.mul(T.tensor_sum(picked), 1.0 / labels.size)


@dataclass
class LossBreakdown:
    """The three loss values, their weights, and the weighted total.

    ``total`` always equals ``l0 + lambda1 * l1 + lambda2 * l2`` computed
    in exactly that expression, in every domain-loss mode.
    """

    l0: float
    l1: float
    l2: float
    lambda1: float
    lambda2: float
    total: float


LITERAL = "literal"
ADVERSARIAL_REVERSAL = "adversarial_reversal"


def total_loss(
    output: ModelOutput,
    truth_masks: Optional[np.ndarray],
    domains: np.ndarray,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    *,
    ignore_index: int = IGNORE_INDEX,
    dice_smoothing: float = 1e-6,
    eps_clamp: float = 1e-7,
    domain_loss_mode: str = LITERAL,
) -> tuple[Tensor, LossBreakdown]:
    """Compose the training objective for one mixed batch.

    ``truth_masks`` is [N,H,W] with ``ignore_index`` filling unlabelled
    samples (or None when the whole batch is unlabelled); ``domains`` is
    the per-sample domain tag index. Returns the scalar graph tensor to
    backpropagate plus the value breakdown.

    In ``adversarial_reversal`` mode the caller must have run the forward
    pass with ``domain_grad_reversed=True``; the optimized scalar then
    carries the domain term with flipped sign (a standard classification
    loss for the head) while the reported breakdown keeps the literal
    log-probability value and composition.
    """
    if domain_loss_mode not in (LITERAL, ADVERSARIAL_REVERSAL):
        raise ConfigurationError(f"unknown domain_loss_mode {domain_loss_mode!r}")
    domains = np.asarray(domains).reshape(-1)
    has_masks = truth_masks is not None and bool((np.asarray(truth_masks) != ignore_index).any())
    if not has_masks and domains.size == 0:
        raise ContractError("batch carries neither ground-truth masks nor domain tags")

    l2_term = domain_misalignment_loss(output.domain_logits, domains, eps_clamp)
    l2_value = l2_term.item()

    if has_masks:
        l0_term = cross_entropy_pixelwise(output.seg_logits, truth_masks, ignore_index)
        l1_term = dice_loss(softmax_probabilities(output.seg_logits), truth_masks,
                            dice_smoothing, ignore_index)
        l0_value, l1_value = l0_term.item(), l1_term.item()
    else:
        l0_term = l1_term = None
        l0_value = l1_value = 0.0

    domain_sign = -1.0 if domain_loss_mode == ADVERSARIAL_REVERSAL else 1.0
    objective = T.mul(l2_term, domain_sign * lambda2)
    if has_masks:
        objective = T.add(T.add(l0_term, T.mul(l1_term, lambda1)), objective)

    total_value = l0_value + lambda1 * l1_value + lambda2 * l2_value
    breakdown = LossBreakdown(l0=l0_value, l1=l1_value, l2=l2_value,
                              lambda1=lambda1, lambda2=lambda2, total=total_value)
    return objective, breakdown
