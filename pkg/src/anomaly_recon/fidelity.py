"""Anatomical fidelity of reconstructions, measured through a segmentation net.

A multiclass anatomy segmentation network is trained on normal slices; its
softmax entropy rates the sharpness of a generated image (quality score)
and the Dice overlap between the segmentations of an input and its
reconstruction rates geometric consistency (overlap score).
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import xlogy

from .errors import InvalidArgumentError, NumericFailureError
from .losses import focal_loss, soft_dice_loss
from .networks import ResUNet
from .phantom import ANATOMY_CLASSES

SEG_CLASS_NAMES = ("background",) + ANATOMY_CLASSES


@dataclass
class SoftmaxMap:
    """Per-pixel class probabilities (C, H, W) plus the derived label map."""

    probs: np.ndarray

    def validate(self, tol: float = 1e-6) -> "SoftmaxMap":
        if self.probs.ndim != 3:
            raise InvalidArgumentError(f"softmax map must be (C, H, W), got {self.probs.shape}")
        if self.probs.min() < -tol:
            raise InvalidArgumentError("softmax map has negative probabilities")
        sums = self.probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > tol:
            raise InvalidArgumentError("softmax map rows do not sum to 1")
        return self

    @property
    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=0)


class SegModel:
    """ResUNet wrapper producing per-pixel softmax maps."""

    def __init__(self, n_classes: int = len(SEG_CLASS_NAMES), filters=(16, 32, 64), init_seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        torch.manual_seed(init_seed)
        self.net = ResUNet(n_classes=n_classes, filters=tuple(filters)).to(dtype)
        self.n_classes = n_classes
        self.dtype = dtype
        self.trained_steps = 0

    def to_batch(self, x) -> torch.Tensor:
        if isinstance(x, (list, tuple)):
            x = np.stack([getattr(s, "data", s) for s in x])
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x))
        x = x.to(self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        return x

    def predict_probs(self, x) -> torch.Tensor:
        """(B, C, H, W) softmax probabilities in eval mode."""
        batch = self.to_batch(x)
        self.net.eval()
        with torch.no_grad():
            logits = self.net(batch)
        if not bool(torch.isfinite(logits).all()):
            raise NumericFailureError("segmentation network produced non-finite logits")
        return torch.softmax(logits, dim=1)

    def softmax_map(self, x) -> SoftmaxMap:
        probs = self.predict_probs(x)[0].cpu().numpy().astype(np.float64)
        return SoftmaxMap(probs=probs)


def labels_to_onehot(class_index_map: np.ndarray, n_classes: int) -> np.ndarray:
    """(H, W) int map -> (C, H, W) one-hot float array."""
    if class_index_map.max() >= n_classes or class_index_map.min() < 0:
        raise InvalidArgumentError(
            f"label map values outside [0, {n_classes}): {class_index_map.min()}..{class_index_map.max()}"
        )
    return np.eye(n_classes, dtype=np.float32)[class_index_map].transpose(2, 0, 1)


def anatomy_index_map(label_masks: dict, k: int, crop=None) -> np.ndarray:
    """Per-pixel anatomy class indices for axial slice ``k`` (0 = background)."""
    base = None
    for cls_idx, name in enumerate(ANATOMY_CLASSES, start=1):
        mask = label_masks[name][k]
        if crop is not None:
            mask = crop(mask)
        if base is None:
            base = np.zeros(mask.shape, dtype=np.int64)
        base[mask.astype(bool)] = cls_idx
    return base


def train_segmentation_step(
    model: SegModel,
    batch: tuple[torch.Tensor, torch.Tensor],
    optimizer: torch.optim.Optimizer,
    focal_gamma: float = 2.0,
    dice_eps: float = 1e-5,
) -> float:
    """One step on soft Dice + focal loss; labels are one-hot (B, C, H, W)."""
    x, target = batch
    x = model.to_batch(x)
    if not torch.is_tensor(target):
        target = torch.from_numpy(np.ascontiguousarray(target))
    target = target.to(model.dtype)
    if target.ndim != 4 or target.shape[1] != model.n_classes:
        raise InvalidArgumentError(
            f"one-hot labels must be (B, {model.n_classes}, H, W), got {tuple(target.shape)}"
        )
    model.net.train()
    logits = model.net(x)
    log_probs = torch.log_softmax(logits, dim=1)
    probs = log_probs.exp()
    loss = soft_dice_loss(probs, target, eps=dice_eps) + focal_loss(log_probs, target, gamma=focal_gamma)
    if not bool(torch.isfinite(loss)):
        optimizer.zero_grad(set_to_none=True)
        raise NumericFailureError(f"segmentation loss non-finite ({float(loss)}); step aborted")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.trained_steps += 1
    return float(loss)


def entropy(softmax_map: SoftmaxMap) -> float:
    """-sum_k sum_ij p log p over the whole map (natural log, 0 log 0 = 0)."""
    softmax_map.validate()
    return float(-xlogy(softmax_map.probs, softmax_map.probs).sum())


def quality_score(model: SegModel, x, x_hat) -> float:
    """Entropy(x) - Entropy(x_hat); higher means a sharper reconstruction."""
    return entropy(model.softmax_map(x)) - entropy(model.softmax_map(x_hat))


def dice_binary(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); defined as 1.0 for two empty masks."""
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def overlap_score(model: SegModel, x, x_hat, background_class: int = 0) -> float:
    """Mean Dice over the classes present in the segmentation of ``x``.

    Class presence is taken from the argmax segmentation of the input, so
    the score needs no ground truth; background is excluded.
    """
    seg_x = model.softmax_map(x).argmax
    seg_hat = model.softmax_map(x_hat).argmax
    present = [k for k in np.unique(seg_x) if k != background_class]
    if not present:
        raise InvalidArgumentError("no foreground classes present in the input segmentation")
    return float(np.mean([dice_binary(seg_x == k, seg_hat == k) for k in present]))
