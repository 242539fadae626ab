"""Patch-level normal-appearance embeddings trained with a triplet margin loss.

Anchors are random body-region patches from normal slices; positives are the
same window under small spatial and intensity jitter; negatives are
independent windows from the same slice at least ``min_neg_dist`` pixels
away from the anchor center.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateInputError, InvalidArgumentError, NumericFailureError
from .losses import triplet_loss
from .networks import PatchEmbedder
from .volume import Slice


@dataclass
class Patch:
    data: np.ndarray  # (1, p, p) in [-1, 1]
    center: tuple[int, int]
    source: str = ""

    def validate(self) -> "Patch":
        if self.data.ndim != 3 or self.data.shape[0] != 1 or self.data.shape[1] != self.data.shape[2]:
            raise InvalidArgumentError(f"patch must be (1, p, p), got {self.data.shape}")
        if self.data.min() < -1.0 - 1e-6 or self.data.max() > 1.0 + 1e-6:
            raise InvalidArgumentError("patch intensities outside [-1, 1]")
        return self


@dataclass
class Triplet:
    anchor: Patch
    positive: Patch
    negative: Patch


@dataclass
class TripletConfig:
    patch_size: int = 32
    max_shift: int = 3
    scale_jitter: float = 0.05
    intensity_scale: float = 0.05
    intensity_offset: float = 0.05
    min_neg_dist: int = 8
    body_threshold: float = -0.95


def _valid_center_range(extent: int, patch: int) -> tuple[int, int]:
    # window = [c - patch//2, c - patch//2 + patch) must stay in bounds
    lo = patch // 2
    hi = extent - patch + patch // 2
    return lo, hi


def _crop(data: np.ndarray, center: tuple[int, int], size: int) -> np.ndarray:
    i0 = center[0] - size // 2
    j0 = center[1] - size // 2
    return data[i0 : i0 + size, j0 : j0 + size]


def sample_triplet(s: Slice, rng: np.random.Generator, cfg: TripletConfig | None = None) -> Triplet:
    """Draw one (anchor, positive, negative) triplet from a slice."""
    cfg = cfg or TripletConfig()
    s.validate()
    h, w = s.data.shape
    p = cfg.patch_size
    ilo, ihi = _valid_center_range(h, p)
    jlo, jhi = _valid_center_range(w, p)
    if ihi < ilo or jhi < jlo:
        raise InvalidArgumentError(f"slice {s.data.shape} smaller than patch size {p}")

    body = s.data > cfg.body_threshold
    body[:ilo], body[ihi + 1 :] = False, False
    body[:, :jlo], body[:, jhi + 1 :] = False, False
    candidates = np.flatnonzero(body)
    if candidates.size == 0:
        raise DegenerateInputError("slice has no body region to anchor patches in")
    idx = candidates[rng.integers(candidates.size)]
    ci, cj = int(idx // w), int(idx % w)
    anchor = Patch(data=_crop(s.data, (ci, cj), p)[None], center=(ci, cj), source=s.source_id)

    # positive: jittered copy of the anchor window
    di = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
    dj = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
    scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
    gain = 1.0 + rng.uniform(-cfg.intensity_scale, cfg.intensity_scale)
    offset = rng.uniform(-cfg.intensity_offset, cfg.intensity_offset)
    pi = int(np.clip(ci + di, ilo, ihi))
    pj = int(np.clip(cj + dj, jlo, jhi))
    win = int(round(p * scale))
    win = max(min(win, min(h, w)), 4)
    pilo, pihi = _valid_center_range(h, win)
    pjlo, pjhi = _valid_center_range(w, win)
    pi2 = int(np.clip(pi, pilo, pihi))
    pj2 = int(np.clip(pj, pjlo, pjhi))
    pos_data = _crop(s.data, (pi2, pj2), win)
    if win != p:
        t = torch.from_numpy(np.ascontiguousarray(pos_data, dtype=np.float32))[None, None]
        pos_data = F.interpolate(t, size=(p, p), mode="bilinear", align_corners=False)[0, 0].numpy()
    if gain != 1.0 or offset != 0.0:
        pos_data = np.clip(pos_data * gain + offset, -1.0, 1.0)
    positive = Patch(data=pos_data.astype(np.float32)[None], center=(pi2, pj2), source=s.source_id)

    # negative: independent window, away from the anchor
    for _ in range(1000):
        ni = int(rng.integers(ilo, ihi + 1))
        nj = int(rng.integers(jlo, jhi + 1))
        if (ni - ci) ** 2 + (nj - cj) ** 2 >= cfg.min_neg_dist**2:
            break
    else:
        raise DegenerateInputError("could not place a negative patch away from the anchor")
    negative = Patch(data=_crop(s.data, (ni, nj), p)[None], center=(ni, nj), source=s.source_id)
    return Triplet(anchor=anchor, positive=positive, negative=negative)


def triplet_batch_tensors(triplets: list[Triplet], dtype=torch.float32):
    def stack(which):
        return torch.from_numpy(np.stack([getattr(t, which).data for t in triplets])).to(dtype)

    return stack("anchor"), stack("positive"), stack("negative")


def embed(model: PatchEmbedder, patches) -> torch.Tensor:
    """Embed a patch batch; eval mode, no gradients."""
    if isinstance(patches, (list, tuple)):
        patches = np.stack([p.data if isinstance(p, Patch) else p for p in patches])
    if isinstance(patches, np.ndarray):
        patches = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))
    if patches.ndim == 3:
        patches = patches[:, None]
    if patches.ndim != 4 or patches.shape[1] != 1:
        raise InvalidArgumentError(f"expected (B, 1, p, p) patches, got {tuple(patches.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters())
            out = model(patches.to(param.dtype))
    finally:
        if was_training:
            model.train()
    if not bool(torch.isfinite(out).all()):
        raise NumericFailureError("embedding network produced non-finite values")
    return out


def train_discriminator_step(
    model: PatchEmbedder,
    triplets: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    optimizer: torch.optim.Optimizer,
) -> float:
    """One gradient step minimizing the mean triplet margin loss."""
    model.train()
    a, p, n = triplets
    loss = triplet_loss(model(a), model(p), model(n))
    if not bool(torch.isfinite(loss)):
        optimizer.zero_grad(set_to_none=True)
        raise NumericFailureError(f"triplet loss non-finite ({float(loss)}); step aborted")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.trained_steps += 1
    return float(loss.detach())
