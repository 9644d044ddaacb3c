"""Dynamic class-balance weighting for the segmentation loss.

Each source image contributes its per-class pixel frequencies; a temperature
softmax turns those into instantaneous weights (rare classes get more), and an
exponential moving average smooths them across images. The averaged weights
multiply the per-pixel cross-entropy.

Frequencies and weights are cheap numpy values; only the loss itself runs in
torch so gradients can flow to the model. The moving-average state belongs to
the single training thread and may be copied freely for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Probabilities are floored here before the log so the loss stays finite even
# for a confidently wrong pixel.
LOG_FLOOR = 1e-12

# Per-pixel probability vectors must sum to 1 within this tolerance.
PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class DcsConfig:
    """Weighting hyperparameters.

    `num_classes` counts the weighted (real) classes; `ignore_index` is the
    label value excluded from both frequencies and loss, by default the index
    right after the last real class.
    """

    num_classes: int
    temperature: float = 0.9
    decay: float = 0.7
    ignore_index: int | None = None

    def __post_init__(self):
        if self.num_classes <= 0:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {self.decay}")
        if self.ignore_index is None:
            object.__setattr__(self, "ignore_index", self.num_classes)


@dataclass
class DcsState:
    """Exponentially averaged class weights plus the number of updates seen."""

    weights: np.ndarray
    step: int = 0

    @classmethod
    def initial(cls, cfg: DcsConfig) -> "DcsState":
        return cls(weights=np.ones(cfg.num_classes, dtype=np.float64), step=0)

    def copy(self) -> "DcsState":
        return DcsState(self.weights.copy(), self.step)


def _validate_label(label: np.ndarray, cfg: DcsConfig) -> np.ndarray:
    label = np.asarray(label)
    if not np.issubdtype(label.dtype, np.integer):
        raise ValueError(f"label map must be integer, got dtype {label.dtype}")
    bad = (label < 0) | ((label >= cfg.num_classes) & (label != cfg.ignore_index))
    if bad.any():
        raise ValueError(
            f"label values must be in [0, {cfg.num_classes - 1}] or "
            f"{cfg.ignore_index} (ignore), found {sorted(np.unique(label[bad]))[:5]}"
        )
    return label


def label_frequency(label: np.ndarray, cfg: DcsConfig) -> np.ndarray:
    """Per-class fraction of the non-ignored pixels of one label map.

    An entirely ignored map degenerates to the uniform vector 1/C so callers
    never divide by zero.
    """
    label = _validate_label(label, cfg)
    kept = label[label != cfg.ignore_index]
    if kept.size == 0:
        return np.full(cfg.num_classes, 1.0 / cfg.num_classes)
    counts = np.bincount(kept.ravel().astype(np.int64), minlength=cfg.num_classes)
    return counts / kept.size


def instantaneous_weights(freq: np.ndarray, cfg: DcsConfig) -> np.ndarray:
    """Temperature-softmax weights: w_c = C * softmax((1 - f_c) / t)_c.

    Rarer classes get strictly larger weights; the output always sums to the
    number of classes, so uniform frequencies give all-ones.
    """
    freq = np.asarray(freq, dtype=np.float64)
    if freq.shape != (cfg.num_classes,):
        raise ValueError(f"expected {cfg.num_classes} frequencies, got shape {freq.shape}")
    scores = (1.0 - freq) / cfg.temperature
    scores -= scores.max()  # softmax shift, exact invariance
    e = np.exp(scores)
    return cfg.num_classes * e / e.sum()


def update(state: DcsState, w: np.ndarray, cfg: DcsConfig) -> DcsState:
    """One moving-average step: weights' = decay * weights + (1 - decay) * w."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != state.weights.shape:
        raise ValueError(f"weight length mismatch: state {state.weights.shape}, w {w.shape}")
    new = cfg.decay * state.weights + (1.0 - cfg.decay) * w
    return DcsState(weights=new, step=state.step + 1)


def weighted_seg_loss_batch(
    probs: torch.Tensor, label: torch.Tensor, state: DcsState, cfg: DcsConfig
) -> torch.Tensor:
    """Class-weighted cross-entropy over a batch of probability maps.

    `probs` is (B, H, W, K) post-softmax with K >= num_classes channels
    (typically num_classes + 1 including the ignored class); `label` is
    (B, H, W) integer. Ignored pixels contribute exactly zero loss and zero
    gradient; the sum is normalized by the number of non-ignored pixels so the
    value is crop-size invariant. A batch with no scorable pixel returns 0.
    """
    if probs.dim() != 4:
        raise ValueError(f"expected probs of shape (B, H, W, K), got {tuple(probs.shape)}")
    if label.shape != probs.shape[:3]:
        raise ValueError(
            f"label shape {tuple(label.shape)} does not match probs {tuple(probs.shape[:3])}"
        )
    if probs.shape[3] < cfg.num_classes:
        raise ValueError(
            f"probs has {probs.shape[3]} channels, need >= {cfg.num_classes}"
        )
    with torch.no_grad():
        sums = probs.sum(dim=3)
        worst = (sums - 1.0).abs().max().item() if sums.numel() else 0.0
        if worst > PROB_SUM_TOL:
            raise ValueError(
                f"probabilities are not normalized: max |sum - 1| = {worst:.3g}"
            )
    _validate_label(label.cpu().numpy(), cfg)

    keep = label != cfg.ignore_index
    if not bool(keep.any()):
        return probs.sum() * 0.0
    # gather needs in-range indices even at ignored pixels; the mask zeroes
    # their contribution and their gradient
    safe = torch.where(keep, label, torch.zeros_like(label)).long()
    picked = probs.gather(3, safe.unsqueeze(3)).squeeze(3)
    logp = torch.log(picked.clamp_min(LOG_FLOOR))
    class_w = torch.as_tensor(state.weights, dtype=probs.dtype, device=probs.device)
    pixel_w = class_w[safe] * keep.to(probs.dtype)
    return -(pixel_w * logp).sum() / keep.sum().to(probs.dtype)


def weighted_seg_loss(
    probs: torch.Tensor | np.ndarray,
    label: torch.Tensor | np.ndarray,
    state: DcsState,
    cfg: DcsConfig,
) -> torch.Tensor:
    """Single-image weighted cross-entropy; see `weighted_seg_loss_batch`."""
    probs_t = torch.as_tensor(probs)
    label_t = torch.as_tensor(np.asarray(label) if isinstance(label, np.ndarray) else label)
    if probs_t.dim() != 3:
        raise ValueError(f"expected probs of shape (H, W, K), got {tuple(probs_t.shape)}")
    return weighted_seg_loss_batch(
        probs_t.unsqueeze(0), label_t.unsqueeze(0), state, cfg
    )
