"""Analytic gradients vs central finite differences on miniature models.

Everything runs in float64; relative error must stay below 1e-4.
"""

import numpy as np
import pytest
import torch

from anomaly_recon.losses import focal_loss, hinge_margin, loss_ae, loss_reg, soft_dice_loss, triplet_loss
from anomaly_recon.networks import PatchEmbedder, ResUNet
from anomaly_recon.reconstruction import ReconArch, ReconModel, reparameterize
from oracles import gradient_relative_error

TOL = 1e-4


def _params(module):
    return [p for p in module.parameters() if p.requires_grad]


def _posterior(model, x):
    mu, logvar = model.encoder(x)
    return mu, torch.exp(0.5 * logvar)


@pytest.fixture(scope="module")
def tiny_recon():
    arch = ReconArch(encoder_filters=(3, 6), decoder_filters=(6, 3, 3), latent_channels=3, image_size=16)
    model = ReconModel(arch=arch, mode="introvae", init_seed=1, dtype=torch.float64)
    # BN in eval mode: running statistics must not drift between FD probes
    model.eval()
    return model


@pytest.fixture(scope="module")
def batch16():
    rng = np.random.default_rng(0)
    return torch.tensor(np.tanh(rng.normal(size=(2, 1, 16, 16))), dtype=torch.float64)


def test_loss_ae_with_ssim_gradient(tiny_recon, batch16):
    model = tiny_recon
    eps = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def fn():
        mu, logvar = model.encoder(batch16)
        z = reparameterize(mu, torch.exp(0.5 * logvar), eps)
        x_hat = model.decoder(z)
        return loss_ae(batch16, x_hat, ssim_weight=1.0)

    err = gradient_relative_error(fn, _params(model.encoder) + _params(model.decoder), n_directions=6)
    assert err < TOL


def test_loss_reg_gradient(tiny_recon, batch16):
    model = tiny_recon

    def fn():
        mu, logvar = model.encoder(batch16)
        return loss_reg(mu, torch.exp(0.5 * logvar))

    err = gradient_relative_error(fn, _params(model.encoder), n_directions=6)
    assert err < TOL


def test_introvae_hinge_gradient(tiny_recon, batch16):
    # margin term [m - L_REG(z')]^+ with z' from the detached reconstruction
    model = tiny_recon
    eps = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    with torch.no_grad():
        mu, logvar = model.encoder(batch16)
        x_hat = model.decoder(reparameterize(mu, torch.exp(0.5 * logvar), eps)).detach()
        reg0 = loss_reg(*_posterior(model, x_hat))
    margin = float(reg0) * 2.0  # fixed margin, hinge active away from the kink

    def fn():
        reg = loss_reg(*_posterior(model, x_hat))
        return hinge_margin(reg, margin)

    err = gradient_relative_error(fn, _params(model.encoder), n_directions=6)
    assert err < TOL


def test_triplet_loss_gradient_through_embedder():
    torch.manual_seed(2)
    model = PatchEmbedder(filters=(3, 6), patch_size=8, hidden=12, embed_dim=6).to(torch.float64)
    model.eval()
    rng = np.random.default_rng(2)
    a, p, n = (torch.tensor(np.tanh(rng.normal(size=(3, 1, 8, 8))), dtype=torch.float64) for _ in range(3))

    def fn():
        return triplet_loss(model(a), model(p), model(n))

    err = gradient_relative_error(fn, _params(model), n_directions=6)
    assert err < TOL


def test_softdice_focal_gradient_through_resunet():
    torch.manual_seed(3)
    model = ResUNet(n_classes=3, filters=(3, 6)).to(torch.float64)
    model.eval()
    rng = np.random.default_rng(3)
    x = torch.tensor(np.tanh(rng.normal(size=(2, 1, 16, 16))), dtype=torch.float64)
    idx = rng.integers(0, 3, size=(2, 16, 16))
    onehot = torch.tensor(np.eye(3)[idx].transpose(0, 3, 1, 2), dtype=torch.float64)

    def fn():
        log_probs = torch.log_softmax(model(x), dim=1)
        return soft_dice_loss(log_probs.exp(), onehot) + focal_loss(log_probs, onehot, gamma=2.0)

    err = gradient_relative_error(fn, _params(model), n_directions=6)
    assert err < TOL


def test_per_parameter_fd_on_micro_embedder():
    # exhaustive per-parameter check on a model small enough to afford it
    from oracles import central_difference_gradient

    torch.manual_seed(4)
    model = torch.nn.Sequential(
        torch.nn.Conv2d(1, 2, 3, padding=1),
        torch.nn.Tanh(),
        torch.nn.Flatten(),
        torch.nn.Linear(2 * 6 * 6, 4),
    ).to(torch.float64)
    rng = np.random.default_rng(5)
    a, p, n = (torch.tensor(np.tanh(rng.normal(size=(2, 1, 6, 6))), dtype=torch.float64) for _ in range(3))

    def fn():
        return triplet_loss(model(a), model(p), model(n))

    params = _params(model)
    loss = fn()
    analytic = torch.autograd.grad(loss, params)
    numeric = central_difference_gradient(fn, params, h=1e-6)
    # relative to the global gradient scale: some parameters (final bias)
    # cancel structurally and have exactly zero gradient
    scale = max(float(g.abs().max()) for g in analytic)
    for g_a, g_n in zip(analytic, numeric):
        assert float((g_a - g_n).abs().max()) / scale < TOL
