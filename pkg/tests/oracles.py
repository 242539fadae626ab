"""Independent reference implementations used as test oracles.

Everything here deliberately avoids the code paths under test: Monte Carlo
instead of closed forms, rank statistics instead of threshold sweeps,
scikit-image instead of the in-tree SSIM, explicit loops instead of
vectorized reductions, finite differences instead of autograd.
"""

import numpy as np
import torch
from scipy.stats import rankdata


def mc_kl_divergence(mu: float, sigma: float, dims: int, n_samples: int, seed: int = 0) -> float:
    """Monte Carlo KL(N(mu, sigma^2 I) || N(0, I)) over `dims` iid dimensions.

    Estimates E[log q(z) - log p(z)] from `n_samples` draws of the full
    `dims`-dimensional z.  With z = sigma*e + mu the per-draw log ratio is
    0.5*(sigma^2-1)*e^2 + sigma*mu*e + 0.5*mu^2 - log(sigma), so the sample
    mean only needs the running sums of e and e^2 (an exact algebraic
    identity, not an approximation).
    """
    gen = torch.Generator().manual_seed(seed)
    total_draws = n_samples * dims
    sum_e = 0.0
    sum_e2 = 0.0
    done = 0
    chunk = 200_000_000
    while done < total_draws:
        n = min(chunk, total_draws - done)
        e = torch.randn(n, generator=gen, dtype=torch.float32)
        sum_e += float(e.sum(dtype=torch.float64))
        sum_e2 += float(torch.dot(e, e))
        done += n
    total = (
        0.5 * (sigma**2 - 1.0) * sum_e2
        + sigma * mu * sum_e
        + total_draws * (0.5 * mu**2 - np.log(sigma))
    )
    return total / n_samples


def reference_ssim(x: np.ndarray, y: np.ndarray, data_range: float = 2.0) -> float:
    """scikit-image single-scale SSIM with the classic Gaussian-window setup."""
    from skimage.metrics import structural_similarity

    return float(
        structural_similarity(
            x.astype(np.float64),
            y.astype(np.float64),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=data_range,
        )
    )


def direct_triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray) -> float:
    """Literal transcription of the margin formula with numpy norms."""
    d_ap = np.sqrt(((a - p) ** 2).sum(axis=-1))
    d_an = np.sqrt(((a - n) ** 2).sum(axis=-1))
    return float(np.maximum(d_ap - d_an + 1.0, 0.0).mean())


def direct_entropy(probs: np.ndarray) -> float:
    """Double-loop entropy: -sum_k sum_ij p log p with 0 log 0 = 0."""
    total = 0.0
    n_cls = probs.shape[0]
    for k in range(n_cls):
        plane = probs[k]
        for v in plane.ravel():
            if v > 0:
                total -= float(v) * float(np.log(v))
    return total


def direct_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice by explicit pixel counting."""
    inter = 0
    na = nb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        if x:
            na += 1
        if y:
            nb += 1
        if x and y:
            inter += 1
    return 2.0 * inter / (na + nb)


def mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Tie-corrected rank AUC: P(score_pos > score_neg) + 0.5 P(equal)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def central_difference_gradient(fn, params: list[torch.Tensor], h: float = 1e-5) -> list[torch.Tensor]:
    """Per-parameter central finite differences of a scalar function."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(fn())
                flat[i] = orig - h
                f_minus = float(fn())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * h)
            grads.append(g)
    return grads


def directional_derivative_fd(fn, params: list[torch.Tensor], direction: list[torch.Tensor], h: float = 1e-6) -> float:
    """Central finite-difference directional derivative along `direction`."""
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(h * d)
        f_plus = float(fn())
        for p, d in zip(params, direction):
            p.add_(-2.0 * h * d)
        f_minus = float(fn())
        for p, d in zip(params, direction):
            p.add_(h * d)
    return (f_plus - f_minus) / (2.0 * h)


def gradient_relative_error(fn, params: list[torch.Tensor], n_directions: int = 8, seed: int = 0, h: float = 1e-6) -> float:
    """Max relative error between autograd and FD directional derivatives."""
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_directions):
        direction = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
        fd = directional_derivative_fd(fn, params, direction, h=h)
        denom = max(abs(analytic), abs(fd), 1e-12)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst
