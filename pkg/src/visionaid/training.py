"""Adversarial objective over the original discriminator plus vision-aided heads.

The discriminator-side objective for one batch is

    L_D(x, G(z)) + sum_k L_k(x, G(z))

where each term is a softplus BCE on that discriminator's own augmented
view of the batch and L_k runs through a frozen bank extractor.  With no
heads selected this is exactly the plain GAN loss.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugPolicy, adapt, augment
from .bank import ModelBank
from .heads import Head, LogitSet, build_head
from .selection import ProbeResult, SelectionState

log = logging.getLogger(__name__)

D_NAME = "D"


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (never depends on PYTHONHASHSEED)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_rng(*parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


def make_optimizer(params: Iterable[nn.Parameter], kind: str = "adam", lr: float = 0.002,
                   betas: tuple[float, float] = (0.0, 0.99)) -> torch.optim.Optimizer:
    params = list(params)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=1e-8)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# losses


def _branches(logits) -> list[torch.Tensor]:
    return logits.branches if isinstance(logits, LogitSet) else [logits]


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    if target == 1.0:
        return F.softplus(-logits).mean()
    if target == 0.0:
        return F.softplus(logits).mean()
    return (target * F.softplus(-logits) + (1 - target) * F.softplus(logits)).mean()


def _branch_sum(logits, target: float) -> torch.Tensor:
    """Per-branch BCE averaged over batch and grid, summed over branches."""
    branches = _branches(logits)
    total = _bce(branches[0], target)
    for b in branches[1:]:
        total = total + _bce(b, target)
    return total


def _check_finite(*logit_sets) -> None:
    for ls in logit_sets:
        if ls is None:
            continue
        for b in _branches(ls):
            if not torch.isfinite(b).all():
                raise TrainingError("non-finite discriminator logits")


def gan_loss(real_logits, fake_logits, side: str, smoothing: float = 0.0) -> torch.Tensor:
    """Softplus form of the minimax objective.

    discriminator: BCE(real -> 1 - smoothing) + BCE(fake -> 0)
    generator:     non-saturating softplus(-D(G(z)))
    Multi-branch logits (a ``LogitSet``) are scored per branch and summed.
    """
    _check_finite(real_logits, fake_logits)
    if side == "discriminator":
        return _branch_sum(real_logits, 1.0 - smoothing) + _branch_sum(fake_logits, 0.0)
    if side == "generator":
        return _branch_sum(fake_logits, 1.0)
    raise ValueError(f"side must be 'discriminator' or 'generator', not {side!r}")


def smoothing_gate(probe: ProbeResult, eps: float = 0.1, threshold: float = 0.9) -> float:
    """One-sided label smoothing only for heads whose probe accuracy exceeds the threshold."""
    return eps if probe.val_accuracy > threshold else 0.0


def r1_penalty(logits, inputs: torch.Tensor, gamma: float) -> torch.Tensor:
    """gamma/2 * E ||d D(x) / dx||^2 on real inputs."""
    out = sum(b.sum() for b in _branches(logits))
    (grad,) = torch.autograd.grad(out, inputs, create_graph=True)
    return 0.5 * gamma * grad.square().flatten(1).sum(1).mean()


# ---------------------------------------------------------------------------
# state


@dataclass
class VisionDiscriminator:
    model_id: str
    head: Head
    policy: AugPolicy
    optimizer: torch.optim.Optimizer
    smoothing: float = 0.0
    probe: ProbeResult | None = None
    init_seed: int = 0


@dataclass
class SnapshotRecord:
    step: int
    path: str
    fid: float

    def __post_init__(self):
        if not self.fid >= 0:
            raise TrainingError(f"snapshot FID must be >= 0, got {self.fid}")


@dataclass
class TrainSettings:
    latent_dim: int = 64
    r1_gamma: float = 1.0
    r1_interval: int = 16
    r1_heads: bool = False
    ada_interval: int = 4
    head_width: int | None = None
    head_optimizer: str = "adam"
    head_lr: float = 0.002
    head_betas: tuple[float, float] = (0.0, 0.99)


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    r_t: dict[str, float]
    p: dict[str, float]
    r1: float = 0.0


@dataclass
class EnsembleState:
    generator: nn.Module
    discriminator: nn.Module
    bank: ModelBank
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    d_policy: AugPolicy
    selection: SelectionState
    settings: TrainSettings = field(default_factory=TrainSettings)
    vision: list[VisionDiscriminator] = field(default_factory=list)
    rngs: dict[str, torch.Generator] = field(default_factory=dict)
    seed: int = 0
    step: int = 0
    images_shown: int = 0
    schedule: list[int] = field(default_factory=list)
    d_smoothing: float = 0.0
    snapshots: list[SnapshotRecord] = field(default_factory=list)
    # pending real-logit signs per adaptive policy, flushed every ada_interval steps
    sign_acc: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("latent", "data", "probe", f"aug:{D_NAME}"):
            self.rngs.setdefault(name, make_rng(self.seed, name))

    def rng(self, name: str) -> torch.Generator:
        if name not in self.rngs:
            self.rngs[name] = make_rng(self.seed, name)
        return self.rngs[name]

    @property
    def names(self) -> list[str]:
        return [D_NAME] + [v.model_id for v in self.vision]

    def policy(self, name: str) -> AugPolicy:
        return self.d_policy if name == D_NAME else self._vision(name).policy

    def set_policy(self, name: str, policy: AugPolicy) -> None:
        if name == D_NAME:
            self.d_policy = policy
        else:
            self._vision(name).policy = policy

    def _vision(self, name: str) -> VisionDiscriminator:
        for v in self.vision:
            if v.model_id == name:
                return v
        raise KeyError(name)

    def check_invariants(self) -> None:
        if len(self.vision) != len(self.selection.selected):
            raise TrainingError("vision discriminators out of sync with selection state")
        if [v.model_id for v in self.vision] != self.selection.selected:
            raise TrainingError("vision discriminator order differs from selection order")


def add_vision_discriminator(state: EnsembleState, model_id: str, policy: AugPolicy, smoothing: float = 0.0,
                             probe: ProbeResult | None = None, init_seed: int | None = None) -> VisionDiscriminator:
    """Bind a fresh head to a bank model and put it in the ensemble.

    The caller is responsible for updating the selection state first.
    """
    if init_seed is None:
        init_seed = derive_seed(state.seed, "head", model_id) % (2 ** 31)
    s = state.settings
    head = build_head(state.bank.spec(model_id), init_seed, width=s.head_width)
    ref = next(state.discriminator.parameters(), None)
    if ref is not None:
        head.to(ref.dtype)
    opt = make_optimizer(head.parameters(), s.head_optimizer, s.head_lr, s.head_betas)
    vd = VisionDiscriminator(model_id, head, policy, opt, smoothing, probe, init_seed)
    state.vision.append(vd)
    state.rng(f"aug:{model_id}")
    return vd


# ---------------------------------------------------------------------------
# forward passes


def _discriminate(state: EnsembleState, name: str, images: torch.Tensor):
    if name == D_NAME:
        return state.discriminator(images)
    vd = state._vision(name)
    return vd.head(state.bank.features(name, images))


def loss_terms(state: EnsembleState, real_batch: torch.Tensor | None, fake_batch: torch.Tensor, side: str,
               names: list[str] | None = None, r1: Iterable[str] = ()) -> dict[str, dict]:
    """Per-discriminator loss on its own augmented view of the batches.

    Returns ``{name: {"loss", "real_logits", "r1"}}``.  Each discriminator
    draws from its own augmentation rng, so adding a head never changes the
    augmentations the others see.
    """
    r1 = set(r1)
    out = {}
    for name in names if names is not None else state.names:
        try:
            out[name] = _loss_term(state, name, real_batch, fake_batch, side, name in r1)
        except TrainingError as e:
            raise TrainingError(f"{name}: {e}") from None
    return out


def _loss_term(state: EnsembleState, name: str, real_batch, fake_batch, side: str, with_r1: bool) -> dict:
    policy = state.policy(name)
    rng = state.rng(f"aug:{name}")
    smoothing = state.d_smoothing if name == D_NAME else state._vision(name).smoothing
    entry = {"real_logits": None, "r1": None}
    if side == "discriminator":
        real_in = augment(real_batch, policy, rng)
        if with_r1:
            real_in = real_in.detach().requires_grad_(True)
        fake_in = augment(fake_batch, policy, rng)
        real_logits = _discriminate(state, name, real_in)
        fake_logits = _discriminate(state, name, fake_in)
        entry["loss"] = gan_loss(real_logits, fake_logits, side, smoothing)
        entry["real_logits"] = real_logits
        if with_r1:
            entry["r1"] = r1_penalty(real_logits, real_in, state.settings.r1_gamma)
    else:
        fake_logits = _discriminate(state, name, augment(fake_batch, policy, rng))
        entry["loss"] = gan_loss(None, fake_logits, side)
    return entry


def _sum(values: list[torch.Tensor]) -> torch.Tensor:
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


def vision_aided_loss(state: EnsembleState, real_batch: torch.Tensor | None, fake_batch: torch.Tensor,
                      side: str) -> torch.Tensor:
    """V(D, G) + sum_k V(D_k, G) as an unweighted sum of per-discriminator losses."""
    terms = loss_terms(state, real_batch, fake_batch, side)
    return _sum([t["loss"] for t in terms.values()])


def _reduced(logits) -> torch.Tensor:
    return logits.reduced if isinstance(logits, LogitSet) else logits


def _apply_grads(loss: torch.Tensor, params: list[nn.Parameter]) -> None:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


def _diagnostic(state: EnsembleState, stage: str, terms: dict) -> dict:
    return {
        "step": state.step,
        "stage": stage,
        "losses": {k: float(v["loss"].detach()) for k, v in terms.items()},
        "p": {n: state.policy(n).current_p for n in state.names},
    }


def _guarded_terms(state: EnsembleState, stage: str, real, fake, r1=()) -> dict:
    try:
        return loss_terms(state, real, fake, stage, r1=r1)
    except TrainingError as e:
        report = {"step": state.step, "stage": stage, "error": str(e),
                  "p": {n: state.policy(n).current_p for n in state.names}}
        raise NonFiniteLossError(f"{stage} update: {e}", report) from None


def train_step(state: EnsembleState, real_batch: torch.Tensor) -> StepReport:
    """One discriminator update (D and every head) then one generator update.

    Each update draws its own latent batch.  R1 is added to the original
    discriminator every ``r1_interval`` steps, scaled by the interval.
    """
    s = state.settings
    if real_batch.shape[0] < 1:
        raise TrainingError("batch size must be >= 1")
    batch = real_batch.shape[0]
    dtype = real_batch.dtype
    G, D = state.generator, state.discriminator

    # -- discriminators
    z = torch.randn(batch, s.latent_dim, generator=state.rng("latent")).to(dtype)
    with torch.no_grad():
        fake = G(z)
    r1_due = s.r1_gamma > 0 and s.r1_interval > 0 and state.step % s.r1_interval == 0
    r1_names = ([D_NAME] + ([v.model_id for v in state.vision] if s.r1_heads else [])) if r1_due else []
    terms = _guarded_terms(state, "discriminator", real_batch, fake, r1=r1_names)
    d_total = _sum([t["loss"] for t in terms.values()])
    r1_total = 0.0
    if r1_names:
        r1 = _sum([terms[n]["r1"] for n in r1_names]) * s.r1_interval
        r1_total = float(r1.detach())
        d_total = d_total + r1
    if not torch.isfinite(d_total):
        raise NonFiniteLossError("non-finite discriminator loss", _diagnostic(state, "discriminator", terms))
    d_params = [p for p in D.parameters() if p.requires_grad]
    head_params = [p for v in state.vision for p in v.head.parameters()]
    _apply_grads(d_total, d_params + head_params)
    state.d_opt.step()
    for v in state.vision:
        v.optimizer.step()

    # -- generator
    z = torch.randn(batch, s.latent_dim, generator=state.rng("latent")).to(dtype)
    fake = G(z)
    g_terms = _guarded_terms(state, "generator", None, fake)
    g_total = _sum([t["loss"] for t in g_terms.values()])
    if not torch.isfinite(g_total):
        raise NonFiniteLossError("non-finite generator loss", _diagnostic(state, "generator", g_terms))
    _apply_grads(g_total, [p for p in G.parameters() if p.requires_grad])
    state.g_opt.step()

    # -- adaptive augmentation
    r_t = {}
    for name, t in terms.items():
        signs = torch.sign(_reduced(t["real_logits"]).detach())
        r_t[name] = float(signs.mean())
        if state.policy(name).mode == "adaptive":
            state.sign_acc.setdefault(name, []).extend(signs.tolist())
    state.step += 1
    state.images_shown += batch
    if state.step % s.ada_interval == 0:
        for name in state.names:
            pending = state.sign_acc.pop(name, None)
            if pending:
                state.set_policy(name, adapt(state.policy(name), torch.tensor(pending)))

    losses = {f"D/{n}": float(t["loss"].detach()) for n, t in terms.items()}
    losses.update({f"G/{n}": float(t["loss"].detach()) for n, t in g_terms.items()})
    return StepReport(state.step, losses, r_t, {n: state.policy(n).current_p for n in state.names}, r1_total)


def sample_latents(n: int, latent_dim: int, rng: torch.Generator) -> torch.Tensor:
    return torch.randn(n, latent_dim, generator=rng)


@torch.no_grad()
def generate(generator: nn.Module, n: int, latent_dim: int, rng: torch.Generator, chunk: int = 500) -> torch.Tensor:
    z = sample_latents(n, latent_dim, rng)
    dtype = next(generator.parameters()).dtype
    return torch.cat([generator(z[i:i + chunk].to(dtype)) for i in range(0, n, chunk)])

