"""Image-level normal-anatomy model: VAE / introspective-VAE training, latent search.

The encoder infers a Gaussian posterior (mu, sigma) over a spatial latent
code; the decoder maps codes back to slices through a tanh output.  Two
training modes are supported:

* ``vae``       one joint gradient step on the reconstruction + KL objective
* ``introvae``  alternating encoder/decoder steps where the KL term doubles
  as an adversarial energy: the encoder pushes the KL of re-encoded
  reconstructions above a margin while the decoder pulls it back down.

Latent search refines the encoded posterior mean by plain gradient descent
on the reconstruction loss with all network parameters frozen.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgumentError, NumericFailureError
from .losses import hinge_margin, loss_ae, loss_reg, ssim
from .networks import ReconDecoder, ReconEncoder


@dataclass
class ReconArch:
    encoder_filters: tuple = (32, 64, 128, 256, 512, 512)
    decoder_filters: tuple = (512, 512, 256, 128, 64, 32, 16)
    latent_channels: int = 128
    image_size: int = 256

    @property
    def latent_spatial(self) -> int:
        return self.image_size // (2 ** len(self.encoder_filters))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.latent_spatial
        return (self.latent_channels, s, s)

    def validate(self) -> "ReconArch":
        if self.latent_spatial < 1:
            raise InvalidArgumentError(
                f"image size {self.image_size} too small for {len(self.encoder_filters)} encoder stages"
            )
        up = 2 ** (len(self.decoder_filters) - 1)
        if self.latent_spatial * up != self.image_size:
            raise InvalidArgumentError(
                "decoder filter plan does not upsample the latent back to the image size"
            )
        return self


@dataclass
class LatentCode:
    """A latent sample with the Gaussian parameters it was drawn from."""

    z: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    origin: str = "encoded"  # encoded | searched

    def validate(self) -> "LatentCode":
        if self.origin not in ("encoded", "searched"):
            raise InvalidArgumentError(f"bad latent origin {self.origin!r}")
        if not bool((self.sigma > 0).all()):
            raise InvalidArgumentError("sigma must be strictly positive")
        for name, t in (("z", self.z), ("mu", self.mu), ("sigma", self.sigma)):
            if not bool(torch.isfinite(t).all()):
                raise InvalidArgumentError(f"latent {name} contains non-finite values")
        return self


@dataclass
class ReconLossReport:
    l_ae: float
    l_reg_z: float
    l_margin_zprime: float
    l_encoder: float
    l_decoder: float

    def as_dict(self) -> dict:
        return {
            "l_ae": self.l_ae,
            "l_reg_z": self.l_reg_z,
            "l_margin_zprime": self.l_margin_zprime,
            "l_encoder": self.l_encoder,
            "l_decoder": self.l_decoder,
        }


class ReconModel:
    """Encoder/decoder pair with the hyperparameters of its training mode."""

    def __init__(
        self,
        arch: ReconArch | None = None,
        mode: str = "vae",
        init_seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        if mode not in ("vae", "introvae"):
            raise InvalidArgumentError(f"unknown reconstruction mode {mode!r}")
        self.arch = (arch or ReconArch()).validate()
        self.mode = mode
        torch.manual_seed(init_seed)
        self.encoder = ReconEncoder(
            filters=tuple(self.arch.encoder_filters), latent_channels=self.arch.latent_channels
        ).to(dtype)
        self.decoder = ReconDecoder(
            filters=tuple(self.arch.decoder_filters), latent_channels=self.arch.latent_channels
        ).to(dtype)
        self.dtype = dtype

    def train(self):
        self.encoder.train()
        self.decoder.train()
        return self

    def eval(self):
        self.encoder.eval()
        self.decoder.eval()
        return self

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def parameter_digest(self, include_buffers: bool = True) -> str:
        """SHA-256 over model state; buffers (BN statistics) optional since
        any train-mode forward updates them regardless of the optimizer."""
        h = hashlib.sha256()
        for module in (self.encoder, self.decoder):
            learnable = {name for name, _ in module.named_parameters()}
            for name, tensor in sorted(module.state_dict().items()):
                if not include_buffers and name not in learnable:
                    continue
                h.update(name.encode())
                h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def to_batch(self, x) -> torch.Tensor:
        """Accept (B,H,W) / (B,1,H,W) arrays or tensors, or a list of Slices."""
        if isinstance(x, (list, tuple)):
            x = np.stack([getattr(s, "data", s) for s in x])
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x))
        x = x.to(self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1:
            raise InvalidArgumentError(f"expected single-channel slice batch, got shape {tuple(x.shape)}")
        return x


def encode(model: ReconModel, x) -> tuple[torch.Tensor, torch.Tensor]:
    """Posterior parameters for a slice batch: (mu, sigma), sigma = exp(logvar/2)."""
    batch = model.to_batch(x) if not torch.is_tensor(x) or x.ndim != 4 else x.to(model.dtype)
    mu, logvar = model.encoder(batch)
    if not bool(torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise NumericFailureError(
            "encoder produced non-finite activations "
            f"(mu finite={bool(torch.isfinite(mu).all())}, logvar finite={bool(torch.isfinite(logvar).all())})"
        )
    return mu, torch.exp(0.5 * logvar)


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    """z = mu + sigma * epsilon, elementwise."""
    if not (mu.shape == sigma.shape == epsilon.shape):
        raise InvalidArgumentError(
            f"reparameterize shape mismatch: {tuple(mu.shape)} / {tuple(sigma.shape)} / {tuple(epsilon.shape)}"
        )
    return mu + sigma * epsilon


def decode(model: ReconModel, z: torch.Tensor) -> torch.Tensor:
    """Decode latent codes to slices in (-1, 1)."""
    if z.ndim == 3:
        z = z[None]
    if tuple(z.shape[1:]) != model.arch.latent_shape:
        raise InvalidArgumentError(
            f"latent shape {tuple(z.shape[1:])} does not match model latent {model.arch.latent_shape}"
        )
    out = model.decoder(z.to(model.dtype))
    if not bool(torch.isfinite(out).all()):
        raise NumericFailureError("decoder produced non-finite activations")
    return out


def _check_finite_loss(name: str, value: torch.Tensor, parts: dict) -> None:
    if not bool(torch.isfinite(value)):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise NumericFailureError(f"{name} is non-finite ({detail}); step aborted")


def make_optimizers(model: ReconModel, lr_encoder: float, lr_decoder: float):
    return (
        torch.optim.Adam(model.encoder.parameters(), lr=lr_encoder),
        torch.optim.Adam(model.decoder.parameters(), lr=lr_decoder),
    )


def _draw_epsilon(mu: torch.Tensor, seed: int | None) -> torch.Tensor:
    if seed is None:
        return torch.randn_like(mu)
    g = torch.Generator().manual_seed(int(seed) % (2**63))
    return torch.randn(mu.shape, generator=g, dtype=mu.dtype)


def train_vae_step(
    model: ReconModel,
    batch,
    opt_encoder: torch.optim.Optimizer,
    opt_decoder: torch.optim.Optimizer,
    ae_weight: float = 1.0,
    reg_weight: float = 1.0,
    ssim_weight: float = 1.0,
    epsilon: torch.Tensor | None = None,
    epsilon_seed: int | None = None,
) -> ReconLossReport:
    """One joint gradient step on ``ae_weight*L_AE + reg_weight*L_REG``."""
    model.train()
    x = model.to_batch(batch)
    mu, sigma = encode(model, x)
    eps = epsilon if epsilon is not None else _draw_epsilon(mu, epsilon_seed)
    z = reparameterize(mu, sigma, eps)
    x_hat = decode(model, z)
    l_ae = loss_ae(x, x_hat, ssim_weight=ssim_weight)
    l_reg = loss_reg(mu, sigma)
    total = ae_weight * l_ae + reg_weight * l_reg
    _check_finite_loss("vae loss", total, {"l_ae": l_ae, "l_reg": l_reg})
    opt_encoder.zero_grad(set_to_none=True)
    opt_decoder.zero_grad(set_to_none=True)
    total.backward()
    opt_encoder.step()
    opt_decoder.step()
    t = float(total.detach())
    return ReconLossReport(
        l_ae=float(l_ae.detach()), l_reg_z=float(l_reg.detach()), l_margin_zprime=0.0, l_encoder=t, l_decoder=t
    )


def train_introvae_step(
    model: ReconModel,
    batch,
    opt_encoder: torch.optim.Optimizer,
    opt_decoder: torch.optim.Optimizer,
    alpha: float = 0.5,
    beta: float = 0.04,
    margin: float = 120.0,
    ssim_weight: float = 1.0,
    epsilon: torch.Tensor | None = None,
    epsilon_seed: int | None = None,
) -> ReconLossReport:
    """Alternating introspective step.

    Encoder phase minimizes ``L_REG(z) + alpha*[m - L_REG(z')]^+ + beta*L_AE``
    where z' re-encodes the reconstruction with decoder gradients blocked;
    decoder phase then minimizes ``alpha*L_REG(z') + beta*L_AE`` through the
    reconstruction path.  The same epsilon (hence the same z) is used for
    both phases.
    """
    model.train()
    x = model.to_batch(batch)

    # --- encoder phase
    mu, sigma = encode(model, x)
    eps = epsilon if epsilon is not None else _draw_epsilon(mu, epsilon_seed)
    z = reparameterize(mu, sigma, eps)
    x_hat = decode(model, z)
    l_ae = loss_ae(x, x_hat, ssim_weight=ssim_weight)
    l_reg_z = loss_reg(mu, sigma)
    mu_p, sigma_p = encode(model, x_hat.detach())
    l_margin = hinge_margin(loss_reg(mu_p, sigma_p), margin)
    enc_loss = l_reg_z + alpha * l_margin + beta * l_ae
    _check_finite_loss(
        "introvae encoder loss", enc_loss, {"l_reg_z": l_reg_z, "l_margin": l_margin, "l_ae": l_ae}
    )
    opt_encoder.zero_grad(set_to_none=True)
    opt_decoder.zero_grad(set_to_none=True)
    enc_loss.backward()
    opt_encoder.step()

    # --- decoder phase (same z, encoder graph cut)
    x_hat2 = decode(model, z.detach())
    l_ae2 = loss_ae(x, x_hat2, ssim_weight=ssim_weight)
    if alpha != 0.0:
        mu_p2, sigma_p2 = encode(model, x_hat2)
        l_reg_zp = loss_reg(mu_p2, sigma_p2)
        dec_loss = alpha * l_reg_zp + beta * l_ae2
    else:
        dec_loss = beta * l_ae2
    _check_finite_loss("introvae decoder loss", dec_loss, {"l_ae2": l_ae2})
    opt_encoder.zero_grad(set_to_none=True)
    opt_decoder.zero_grad(set_to_none=True)
    dec_loss.backward()
    opt_decoder.step()
    opt_encoder.zero_grad(set_to_none=True)

    return ReconLossReport(
        l_ae=float(l_ae.detach()),
        l_reg_z=float(l_reg_z.detach()),
        l_margin_zprime=float(l_margin.detach()),
        l_encoder=float(enc_loss.detach()),
        l_decoder=float(dec_loss.detach()),
    )


@dataclass
class LatentSearchResult:
    code: LatentCode
    reconstruction: torch.Tensor  # (B, 1, H, W)
    initial_loss: np.ndarray
    final_loss: np.ndarray
    diverged: np.ndarray  # bool per sample; best-so-far returned where True
    history: list = field(default_factory=list)


def _per_sample_ae(x: torch.Tensor, x_hat: torch.Tensor, ssim_weight: float) -> torch.Tensor:
    per_mse = 0.5 * ((x - x_hat) ** 2).flatten(1).mean(dim=1)
    if ssim_weight == 0.0:
        return per_mse
    vals = torch.stack([ssim(x[i : i + 1], x_hat[i : i + 1]) for i in range(x.shape[0])])
    return per_mse + ssim_weight * (1.0 - vals)


def latent_search(
    model: ReconModel,
    x,
    steps: int = 100,
    lr: float = 1e-3,
    ssim_weight: float = 1.0,
    divergence_factor: float = 10.0,
) -> LatentSearchResult:
    """Gradient descent on the reconstruction loss over z with the model frozen.

    Starts from the posterior mean.  Samples whose running loss exceeds
    ``divergence_factor`` times their initial loss are flagged and their
    best-so-far code is returned instead of the final iterate.
    """
    if steps < 0:
        raise InvalidArgumentError("steps must be >= 0")
    model.eval()
    batch = model.to_batch(x)
    frozen = [p for p in model.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            mu, sigma = encode(model, batch)
        z = mu.clone().requires_grad_(True)
        with torch.no_grad():
            recon0 = decode(model, z)
            l0 = _per_sample_ae(batch, recon0, ssim_weight)
        best_loss = l0.clone()
        best_z = z.detach().clone()
        diverged = torch.zeros(batch.shape[0], dtype=torch.bool)
        history = [float(l0.mean())]
        if steps > 0:
            opt = torch.optim.Adam([z], lr=lr)
            for _ in range(steps):
                opt.zero_grad(set_to_none=True)
                x_hat = decode(model, z)
                per = _per_sample_ae(batch, x_hat, ssim_weight)
                per.sum().backward()
                opt.step()
                with torch.no_grad():
                    x_eval = decode(model, z)
                    cur = _per_sample_ae(batch, x_eval, ssim_weight)
                    improved = cur < best_loss
                    best_loss = torch.where(improved, cur, best_loss)
                    best_z[improved] = z.detach()[improved]
                    diverged |= cur > divergence_factor * l0
                    history.append(float(cur.mean()))
        with torch.no_grad():
            z_final = z.detach().clone()
            z_final[diverged] = best_z[diverged]
            recon = decode(model, z_final)
            final = _per_sample_ae(batch, recon, ssim_weight)
        code = LatentCode(z=z_final, mu=mu.detach(), sigma=sigma.detach(), origin="searched").validate()
        return LatentSearchResult(
            code=code,
            reconstruction=recon,
            initial_loss=l0.cpu().numpy(),
            final_loss=final.cpu().numpy(),
            diverged=diverged.cpu().numpy(),
            history=history,
        )
    finally:
        for p in frozen:
            p.requires_grad_(True)
