"""Small DCGAN-style backbone used at desk scale.

Any generator mapping (B, latent_dim) -> (B, C, H, W) in [-1, 1] and any
discriminator mapping images -> (B,) logits can be dropped in instead.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class Generator(nn.Module):
    """Four transposed convs: 1 -> 4 -> 8 -> 16 -> 32."""

    def __init__(self, latent_dim: int = 64, channels: int = 32, out_channels: int = 3, resolution: int = 32):
        super().__init__()
        if resolution != 32:
            raise ValueError("the desk generator only produces 32x32 images")
        self.latent_dim = latent_dim
        c = channels
        self.layers = nn.ModuleList([
            nn.ConvTranspose2d(latent_dim, 4 * c, 4, 1, 0),
            nn.ConvTranspose2d(4 * c, 2 * c, 4, 2, 1),
            nn.ConvTranspose2d(2 * c, c, 4, 2, 1),
            nn.ConvTranspose2d(c, out_channels, 4, 2, 1),
        ])

    def forward(self, z):
        x = z.view(z.shape[0], -1, 1, 1)
        for layer in self.layers[:-1]:
            x = F.leaky_relu(layer(x), 0.2)
        return torch.tanh(self.layers[-1](x))


class Discriminator(nn.Module):
    """Four convs: 32 -> 16 -> 8 -> 4 -> 1 logit."""

    def __init__(self, channels: int = 32, in_channels: int = 3, resolution: int = 32):
        super().__init__()
        if resolution != 32:
            raise ValueError("the desk discriminator only accepts 32x32 images")
        c = channels
        self.layers = nn.ModuleList([
            nn.Conv2d(in_channels, c, 4, 2, 1),
            nn.Conv2d(c, 2 * c, 4, 2, 1),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1),
            nn.Conv2d(4 * c, 1, 4, 1, 0),
        ])

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = F.leaky_relu(layer(x), 0.2)
        return self.layers[-1](x).flatten()


def seeded(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialise every conv/linear with PyTorch's default scheme under a fixed seed."""
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.reset_parameters()
    torch.random.set_rng_state(state)
    return module
