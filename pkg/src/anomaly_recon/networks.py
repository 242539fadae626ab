"""Network architectures: reconstruction encoder/decoder, patch embedder, ResUNet.

Filter plans are configurable so the same code serves the full-size setup
(encoder 32-64-128-256-512-512, latent 128x4x4, decoder 512-512-256-128-64-
32-16) and the reduced desk profile used for CI-scale experiments.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


def he_init(module: nn.Module, a: float = 0.0) -> None:
    """Kaiming fan-in initialization on all conv / linear weights."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=a, mode="fan_in", nonlinearity="leaky_relu" if a > 0 else "relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResBlock(nn.Module):
    """Two conv+BN+activation sequences with a residual connection."""

    def __init__(self, c_in: int, c_out: int, leaky: float = 0.2):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.LeakyReLU(leaky) if leaky > 0 else nn.ReLU()

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.skip(x))


class ReconEncoder(nn.Module):
    """Residual encoder emitting (mu, logvar) heads of latent shape."""

    def __init__(self, filters=(32, 64, 128, 256, 512, 512), latent_channels: int = 128, leaky: float = 0.2):
        super().__init__()
        blocks = []
        c_in = 1
        for f in filters:
            blocks.append(ResBlock(c_in, f, leaky=leaky))
            blocks.append(nn.AvgPool2d(2))
            c_in = f
        self.features = nn.Sequential(*blocks)
        self.mu_head = nn.Conv2d(c_in, latent_channels, 3, padding=1)
        self.logvar_head = nn.Conv2d(c_in, latent_channels, 3, padding=1)
        he_init(self, a=leaky)

    def forward(self, x):
        h = self.features(x)
        return self.mu_head(h), self.logvar_head(h)


class ReconDecoder(nn.Module):
    """Residual decoder with interpolation+conv upsampling and tanh output."""

    def __init__(self, filters=(512, 512, 256, 128, 64, 32, 16), latent_channels: int = 128, leaky: float = 0.2):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.upconvs = nn.ModuleList()
        c_in = latent_channels
        for i, f in enumerate(filters):
            self.blocks.append(ResBlock(c_in, f, leaky=leaky))
            if i < len(filters) - 1:
                self.upconvs.append(nn.Conv2d(f, f, 3, padding=1))
            c_in = f
        self.out_conv = nn.Conv2d(filters[-1], 1, 3, padding=1)
        he_init(self, a=leaky)

    def forward(self, z):
        h = z
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.upconvs):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upconvs[i](h)
        out = torch.tanh(self.out_conv(h))
        # saturated tanh rounds to exactly +-1.0 in floating point; keep the
        # advertised open interval by clamping one epsilon inside
        eps = torch.finfo(out.dtype).eps
        return out.clamp(-1.0 + eps, 1.0 - eps)


class PatchEmbedder(nn.Module):
    """Residual patch network with max pooling and an MLP embedding head."""

    def __init__(self, filters=(64, 128, 256, 512), patch_size: int = 32, hidden: int = 1024, embed_dim: int = 256):
        super().__init__()
        blocks = []
        c_in = 1
        for f in filters:
            blocks.append(ResBlock(c_in, f, leaky=0.0))
            blocks.append(nn.MaxPool2d(2))
            c_in = f
        self.features = nn.Sequential(*blocks)
        spatial = patch_size // (2 ** len(filters))
        if spatial < 1:
            raise ValueError(f"patch size {patch_size} too small for {len(filters)} pooling stages")
        self.mlp = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c_in * spatial * spatial, hidden),
            nn.ReLU(),
            nn.Linear(hidden, embed_dim),
        )
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.trained_steps = 0
        he_init(self)

    def forward(self, x):
        return self.mlp(self.features(x))


class _DownStage(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = ResBlock(c_in, c_out, leaky=0.0)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skip = self.block(x)
        return self.pool(skip), skip


class _UpStage(nn.Module):
    def __init__(self, c_in, c_skip, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.block = ResBlock(c_out + c_skip, c_out, leaky=0.0)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        return self.block(torch.cat([x, skip], dim=1))


class ResUNet(nn.Module):
    """Residual U-shaped segmentation network; forward returns logits."""

    def __init__(self, n_classes: int, filters=(16, 32, 64)):
        super().__init__()
        downs = []
        c_in = 1
        for f in filters:
            downs.append(_DownStage(c_in, f))
            c_in = f
        self.downs = nn.ModuleList(downs)
        self.bottleneck = ResBlock(c_in, filters[-1] * 2, leaky=0.0)
        ups = []
        c_in = filters[-1] * 2
        for f in reversed(filters):
            ups.append(_UpStage(c_in, f, f))
            c_in = f
        self.ups = nn.ModuleList(ups)
        self.out_conv = nn.Conv2d(c_in, n_classes, 1)
        self.n_classes = n_classes
        he_init(self)

    def forward(self, x):
        skips = []
        h = x
        for stage in self.downs:
            h, skip = stage(h)
            skips.append(skip)
        h = self.bottleneck(h)
        for stage, skip in zip(self.ups, reversed(skips)):
            h = stage(h, skip)
        return self.out_conv(h)
