"""Loss functions and score primitives shared across the networks.

All functions accept torch tensors and are differentiable; shapes follow
the (batch, channel, H, W) convention unless noted.
"""

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError

IMAGE_DATA_RANGE = 2.0  # slices live in [-1, 1]


def loss_reg(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)), summed over latent dims, batch mean.

    0.5 * sum(mu^2 + sigma^2 - 1 - 2*log(sigma)) per sample.
    """
    if mu.shape != sigma.shape:
        raise InvalidArgumentError(f"mu/sigma shape mismatch: {tuple(mu.shape)} vs {tuple(sigma.shape)}")
    if not bool((sigma > 0).all()):
        raise InvalidArgumentError("sigma must be strictly positive")
    per_sample = 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * torch.log(sigma)).flatten(1).sum(dim=1)
    return per_sample.mean()


def _gaussian_window(window_size: int, sigma: float, dtype, device) -> torch.Tensor:
    half = (window_size - 1) / 2.0
    coords = torch.arange(window_size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(
    x: torch.Tensor,
    y: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    data_range: float = IMAGE_DATA_RANGE,
) -> torch.Tensor:
    """Mean structural similarity with a Gaussian window (valid convolution).

    Matches the classic single-scale formulation: local Gaussian-weighted
    means/covariances, stabilizers C1=(0.01*L)^2 and C2=(0.03*L)^2, and the
    border cropped by the window half-width.
    """
    if x.shape != y.shape:
        raise InvalidArgumentError(f"ssim shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4:
        raise InvalidArgumentError("ssim expects (batch, channel, H, W)")
    c = x.shape[1]
    w1 = _gaussian_window(window_size, sigma, x.dtype, x.device)
    kernel_h = w1.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    kernel_w = w1.view(1, 1, 1, -1).repeat(c, 1, 1, 1)

    def blur(t):
        t = F.conv2d(t, kernel_h, groups=c)
        return F.conv2d(t, kernel_w, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x**2
    sigma_y = blur(y * y) - mu_y**2
    sigma_xy = blur(x * y) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    return (num / den).mean()


def loss_ae(x: torch.Tensor, x_hat: torch.Tensor, ssim_weight: float = 1.0) -> torch.Tensor:
    """Reconstruction loss: half mean squared error plus a structural term.

    ``0.5 * MSE + ssim_weight * (1 - SSIM)``; with ``ssim_weight == 0`` this
    is the plain squared-distance likelihood term.
    """
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(f"loss_ae shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    out = 0.5 * F.mse_loss(x_hat, x)
    if ssim_weight != 0.0:
        out = out + ssim_weight * (1.0 - ssim(x, x_hat))
    return out


def hinge_margin(value: torch.Tensor, margin: float) -> torch.Tensor:
    """[m - value]^+ : the introspective adversarial margin term."""
    return torch.clamp(margin - value, min=0.0)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor) -> torch.Tensor:
    """max{d(a,p) - d(a,n) + 1, 0} with Euclidean d, averaged over the batch."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise InvalidArgumentError(
            f"triplet shape mismatch: {tuple(anchor.shape)} / {tuple(positive.shape)} / {tuple(negative.shape)}"
        )
    d_ap = torch.linalg.vector_norm(anchor - positive, dim=-1)
    d_an = torch.linalg.vector_norm(anchor - negative, dim=-1)
    return torch.clamp(d_ap - d_an + 1.0, min=0.0).mean()


def soft_dice_loss(probs: torch.Tensor, target_onehot: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - mean soft Dice over classes; probs and targets are (B, C, H, W)."""
    if probs.shape != target_onehot.shape:
        raise InvalidArgumentError(
            f"dice shape mismatch: {tuple(probs.shape)} vs {tuple(target_onehot.shape)}"
        )
    dims = (0, 2, 3)
    inter = (probs * target_onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + target_onehot.sum(dim=dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def focal_loss(log_probs: torch.Tensor, target_onehot: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Multiclass focal loss -(1-p_t)^gamma * log(p_t), mean over pixels.

    Takes log-probabilities for numerical stability.
    """
    if log_probs.shape != target_onehot.shape:
        raise InvalidArgumentError(
            f"focal shape mismatch: {tuple(log_probs.shape)} vs {tuple(target_onehot.shape)}"
        )
    logpt = (log_probs * target_onehot).sum(dim=1)
    pt = logpt.exp()
    return (-((1.0 - pt) ** gamma) * logpt).mean()


def softmax_entropy(probs: torch.Tensor) -> torch.Tensor:
    """-sum p*log(p) over classes and pixels (natural log, 0*log0 = 0).

    ``probs`` is (C, H, W) or (B, C, H, W); returns a scalar per image,
    summed over everything but the batch axis.
    """
    if bool((probs < 0).any()):
        raise InvalidArgumentError("probabilities must be non-negative")
    plogp = torch.where(probs > 0, probs * torch.log(probs.clamp_min(1e-30)), probs.new_zeros(()))
    if probs.ndim == 4:
        return -plogp.flatten(1).sum(dim=1)
    return -plogp.sum()
