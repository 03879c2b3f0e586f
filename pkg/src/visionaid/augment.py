"""Differentiable augmentations with an adaptive strength controller.

Modes:
    adaptive  each enabled op fires per sample with probability ``current_p``;
              ``adapt`` steers ``current_p`` from the sign of real logits.
    fixed     DiffAugment-style: every enabled op always fires.
    none      identity.

All random numbers are drawn up front in a fixed order whatever ``p`` is,
so the consumption of the rng stream never depends on the policy state.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn.functional as F

OPS = ("xflip", "translation", "color", "cutout")
MODES = ("adaptive", "fixed", "none")
FIXED_DEFAULT_OPS = ("translation", "color", "cutout")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugPolicy:
    policy_id: str
    mode: str = "adaptive"
    current_p: float = 0.0
    target: float = 0.6
    ops: tuple[str, ...] = OPS
    adjust_step: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.mode not in MODES:
            raise AugmentError(f"{self.policy_id}: unknown mode {self.mode!r}")
        unknown = set(self.ops) - set(OPS)
        if unknown:
            raise AugmentError(f"{self.policy_id}: unknown ops {sorted(unknown)}")
        if not 0.0 <= self.current_p <= 1.0:
            raise AugmentError(f"{self.policy_id}: current_p {self.current_p} outside [0, 1]")
        if not 0.0 <= self.target <= 1.0:
            raise AugmentError(f"{self.policy_id}: target {self.target} outside [0, 1]")
        if self.adjust_step < 0:
            raise AugmentError(f"{self.policy_id}: adjust_step must be >= 0")


def _gate(mask: torch.Tensor, new: torch.Tensor, old: torch.Tensor) -> torch.Tensor:
    return torch.where(mask.view(-1, 1, 1, 1), new, old)


def _translate(x: torch.Tensor, tx: torch.Tensor, ty: torch.Tensor) -> torch.Tensor:
    """Integer shift per sample with zero fill; plain indexing keeps it differentiable."""
    b, _, h, w = x.shape
    gb, gy, gx = torch.meshgrid(torch.arange(b), torch.arange(h), torch.arange(w), indexing="ij")
    gy = torch.clamp(gy + ty.view(-1, 1, 1) + 1, 0, h + 1)
    gx = torch.clamp(gx + tx.view(-1, 1, 1) + 1, 0, w + 1)
    xp = F.pad(x, [1, 1, 1, 1])
    return xp.permute(0, 2, 3, 1)[gb, gy, gx].permute(0, 3, 1, 2)


def _color(x: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    r = r.to(x.dtype)
    x = x + (r[:, 0] - 0.5).view(-1, 1, 1, 1)
    mean = x.mean(dim=1, keepdim=True)
    x = (x - mean) * (2 * r[:, 1]).view(-1, 1, 1, 1) + mean
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean) * (r[:, 2] + 0.5).view(-1, 1, 1, 1) + mean


def _cutout(x: torch.Tensor, cy: torch.Tensor, cx: torch.Tensor, ratio: float = 0.5) -> torch.Tensor:
    b, _, h, w = x.shape
    sh, sw = int(h * ratio + 0.5), int(w * ratio + 0.5)
    ys = torch.arange(h).view(1, -1, 1)
    xs = torch.arange(w).view(1, 1, -1)
    y0 = (cy - sh // 2).view(-1, 1, 1)
    x0 = (cx - sw // 2).view(-1, 1, 1)
    inside = (ys >= y0) & (ys < y0 + sh) & (xs >= x0) & (xs < x0 + sw)
    return x * (~inside).unsqueeze(1).to(x.dtype)


def augment(images: torch.Tensor, policy: AugPolicy, rng: torch.Generator | None = None) -> torch.Tensor:
    if images.dim() != 4:
        raise AugmentError(f"expected a 4-D image batch, got {tuple(images.shape)}")
    if policy.mode == "none" or not policy.ops:
        return images
    b, _, h, w = images.shape
    ops = set(policy.ops)

    # draw everything in a fixed order so the stream advances identically
    gate_u = torch.rand(len(OPS), b, generator=rng)
    shift = (int(h * 0.125 + 0.5), int(w * 0.125 + 0.5))
    tx = torch.randint(-shift[1], shift[1] + 1, (b,), generator=rng)
    ty = torch.randint(-shift[0], shift[0] + 1, (b,), generator=rng)
    color_r = torch.rand(b, 3, generator=rng)
    cy = torch.randint(0, h + 1 - int(h * 0.5 + 0.5) % 2, (b,), generator=rng)
    cx = torch.randint(0, w + 1 - int(w * 0.5 + 0.5) % 2, (b,), generator=rng)

    p = 1.0 if policy.mode == "fixed" else policy.current_p
    fire = {op: gate_u[i] < p for i, op in enumerate(OPS)}

    x = images
    if "xflip" in ops:
        x = _gate(fire["xflip"], x.flip(3), x)
    if "translation" in ops:
        x = _gate(fire["translation"], _translate(x, tx, ty), x)
    if "color" in ops:
        x = _gate(fire["color"], _color(x, color_r), x)
    if "cutout" in ops:
        x = _gate(fire["cutout"], _cutout(x, cy, cx), x)
    return x


def sign_ratio(real_logits: torch.Tensor) -> float:
    """r_t = E[sign(D(x_real))]."""
    return float(torch.sign(real_logits.detach()).mean())


def adapt(policy: AugPolicy, real_logits: torch.Tensor) -> AugPolicy:
    if policy.mode != "adaptive":
        raise AugmentError(f"{policy.policy_id}: adapt called on a {policy.mode!r} policy")
    if real_logits.numel() == 0:
        raise AugmentError("adapt needs at least one real logit")
    r_t = sign_ratio(real_logits)
    step = policy.adjust_step if r_t > policy.target else -policy.adjust_step
    p = min(max(policy.current_p + step, 0.0), 1.0)
    return dataclasses.replace(policy, current_p=p)
