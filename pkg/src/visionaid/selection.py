"""Linear-probe separability and model selection over the bank."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .bank import ModelBank

log = logging.getLogger(__name__)

DEFAULT_RUNS = 3
DEFAULT_SPLIT = 0.7
DEFAULT_L2 = 1e-4
MAX_PROBE_SAMPLES = 10_000


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    model_id: str
    train_accuracy: float
    val_accuracy: float
    val_objective: float
    runs: int = 1
    val_accuracy_std: float = 0.0

    def __post_init__(self):
        if not (0 <= self.train_accuracy <= 1 and 0 <= self.val_accuracy <= 1):
            raise SelectionError(f"{self.model_id}: accuracy outside [0, 1]")
        if self.runs < 1 or self.val_accuracy_std < 0 or not np.isfinite(self.val_objective):
            raise SelectionError(f"{self.model_id}: malformed probe result")

    def to_dict(self) -> dict:
        return asdict(self)


def _split(perm: np.ndarray, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    n_train = int(round(len(perm) * ratio))
    return perm[:n_train], perm[n_train:]


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float) -> tuple[np.ndarray, float]:
    """Full-batch L-BFGS on mean BCE + l2/2 * |w|^2 (bias unpenalised)."""
    n, d = x.shape
    sign = 2 * y - 1

    def objective(theta):
        w, b = theta[:d], theta[d]
        z = x @ w + b
        loss = -log_expit(sign * z).mean() + 0.5 * l2 * w @ w
        g = -sign * expit(-sign * z) / n
        return loss, np.concatenate([x.T @ g + l2 * w, [g.sum()]])

    res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": 500, "gtol": 1e-8})
    return res.x[:d], float(res.x[d])


def _bce(z: np.ndarray, y: np.ndarray) -> float:
    return float(-log_expit((2 * y - 1) * z).mean())


def linear_probe(real_feats, fake_feats, split_ratio: float = DEFAULT_SPLIT, seed: int = 0,
                 runs: int = DEFAULT_RUNS, l2: float = DEFAULT_L2, model_id: str = "") -> ProbeResult:
    """Real-vs-fake logistic probe, averaged over ``runs`` random splits.

    Each run splits both classes ``split_ratio`` train / rest validation,
    standardises with train statistics and fits a logistic classifier.
    ``val_objective`` is the negative validation BCE (higher means the two
    sets are easier to tell apart).
    """
    real = np.asarray(real_feats, dtype=np.float64).reshape(len(real_feats), -1)
    fake = np.asarray(fake_feats, dtype=np.float64).reshape(len(fake_feats), -1)
    if real.shape[1] != fake.shape[1]:
        raise SelectionError(f"{model_id}: feature dims differ ({real.shape[1]} vs {fake.shape[1]})")
    if not (np.isfinite(real).all() and np.isfinite(fake).all()):
        raise SelectionError(f"{model_id}: non-finite features")
    if runs < 1:
        raise SelectionError("runs must be >= 1")

    train_acc, val_acc, val_obj = [], [], []
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        perm_r = rng.permutation(len(real))
        # equal-sized classes share the permutation: duplicated rows then never straddle train/val
        perm_f = perm_r if len(fake) == len(real) else rng.permutation(len(fake))
        tr_r, va_r = _split(perm_r, split_ratio)
        tr_f, va_f = _split(perm_f, split_ratio)
        if min(len(tr_r), len(va_r), len(tr_f), len(va_f)) < 2:
            raise SelectionError(f"{model_id}: degenerate split, need >= 2 samples per class per split")
        x_tr = np.concatenate([real[tr_r], fake[tr_f]])
        y_tr = np.concatenate([np.ones(len(tr_r)), np.zeros(len(tr_f))])
        x_va = np.concatenate([real[va_r], fake[va_f]])
        y_va = np.concatenate([np.ones(len(va_r)), np.zeros(len(va_f))])

        mu = x_tr.mean(0)
        sd = x_tr.std(0)
        sd[sd < 1e-12] = 1.0
        x_tr, x_va = (x_tr - mu) / sd, (x_va - mu) / sd

        w, b = _fit_logistic(x_tr, y_tr, l2)
        z_tr, z_va = x_tr @ w + b, x_va @ w + b
        train_acc.append(((z_tr > 0) == (y_tr > 0)).mean())
        val_acc.append(((z_va > 0) == (y_va > 0)).mean())
        val_obj.append(-_bce(z_va, y_va))

    return ProbeResult(model_id, float(np.mean(train_acc)), float(np.mean(val_acc)), float(np.mean(val_obj)),
                       runs, float(np.std(val_acc)))


def ranking_key(p: ProbeResult):
    return (-p.val_objective, -p.val_accuracy, p.model_id)


@torch.no_grad()
def _flat_features(bank: ModelBank, model_id: str, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    dtype = next(bank.entry(model_id).module.parameters(), images).dtype
    out = [bank.features(model_id, images[i:i + chunk].to(dtype)).flatten().cpu().numpy()
           for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def rank_models(bank: ModelBank, generator_samples: torch.Tensor, real_samples: torch.Tensor,
                exclude: Iterable[str] = (), split_ratio: float = DEFAULT_SPLIT, seed: int = 0,
                runs: int = DEFAULT_RUNS, l2: float = DEFAULT_L2,
                max_samples: int = MAX_PROBE_SAMPLES) -> list[ProbeResult]:
    """Probe every non-excluded bank model; most separable first."""
    if len(generator_samples) == 0 or len(real_samples) == 0:
        raise SelectionError("rank_models needs non-empty real and generated batches")
    exclude = set(exclude)
    candidates = [m for m in bank.list_models() if m not in exclude]
    if not candidates:
        raise SelectionError("no candidate models left after exclusion")
    if len(real_samples) > max_samples:
        idx = np.random.default_rng(seed).choice(len(real_samples), max_samples, replace=False)
        real_samples = real_samples[np.sort(idx)]
    generator_samples = generator_samples[:max_samples]

    results = []
    for mid in candidates:
        real = _flat_features(bank, mid, real_samples)
        fake = _flat_features(bank, mid, generator_samples)
        results.append(linear_probe(real, fake, split_ratio, seed, runs, l2, model_id=mid))
    return sorted(results, key=ranking_key)


@dataclass
class SelectionState:
    k_max: int
    remaining: set[str]
    selected: list[str] = field(default_factory=list)
    history: list[tuple[int, list[ProbeResult]]] = field(default_factory=list)

    def __post_init__(self):
        self.remaining = set(self.remaining) - set(self.selected)
        if self.k_max < 0:
            raise SelectionError("k_max must be >= 0")
        if len(self.selected) > self.k_max:
            raise SelectionError("more models selected than k_max")

    def to_dict(self) -> dict:
        return {
            "k_max": self.k_max,
            "selected": list(self.selected),
            "remaining": sorted(self.remaining),
            "history": [[step, [p.to_dict() for p in ranking]] for step, ranking in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionState":
        return cls(d["k_max"], set(d["remaining"]), list(d["selected"]),
                   [(step, [ProbeResult(**p) for p in ranking]) for step, ranking in d["history"]])


def select_next(state: SelectionState, ranking: Sequence[ProbeResult], step: int = 0) -> str:
    if len(state.selected) >= state.k_max:
        raise SelectionError(f"already selected k_max={state.k_max} models")
    if not state.remaining:
        raise SelectionError("no remaining models to select")
    for p in sorted(ranking, key=ranking_key):
        if p.model_id in state.remaining:
            chosen = p.model_id
            break
    else:
        raise SelectionError("ranking contains no remaining model")
    state.remaining.discard(chosen)
    state.selected.append(chosen)
    state.history.append((step, list(ranking)))
    return chosen


def k_fixed_select(bank: ModelBank, generator_samples: torch.Tensor, real_samples: torch.Tensor, K: int,
                   exclude: Iterable[str] = (), **probe_kwargs) -> list[str]:
    """Pick the top-K models from a single ranking pass, before training."""
    n_candidates = len([m for m in bank.list_models() if m not in set(exclude)])
    if K > n_candidates:
        raise SelectionError(f"K={K} exceeds the {n_candidates} candidate models")
    ranking = rank_models(bank, generator_samples, real_samples, exclude, **probe_kwargs)
    return [p.model_id for p in ranking[:K]]
