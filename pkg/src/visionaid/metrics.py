"""FID, KID, k-NN precision/recall and Mahalanobis worst-sample ranking."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .bank import ModelBank

EIG_SLACK = 1e-6


class MetricError(ValueError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise MetricError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8, rtol=0):
            raise MetricError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise MetricError("fit_gaussian needs at least 2 samples")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (len(x) - 1)
    return GaussianStats(mu, (cov + cov.T) / 2, len(x))


def _clipped_eigh(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((a + a.T) / 2)
    tol = EIG_SLACK * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise MetricError(f"{what} has eigenvalue {w.min():.3g} below the tolerated slack")
    return np.clip(w, 0.0, None), v


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, tiny negatives clipped to 0."""
    w, v = _clipped_eigh(a, "matrix")
    return (v * np.sqrt(w)) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Tr((S_a S_b)^(1/2)) equals the sum of singular values of
    S_a^(1/2) S_b^(1/2).  Taking it that way is symmetric in (a, b) to
    rounding and stays accurate when a covariance is singular, where
    square-rooting eigenvalues near zero would amplify rounding error.
    """
    if a.dim != b.dim:
        raise MetricError(f"dimension mismatch: {a.dim} vs {b.dim}")
    cross = sqrtm_psd(a.covariance) @ sqrtm_psd(b.covariance)
    trace_sqrt = np.linalg.svd(cross, compute_uv=False).sum()
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * trace_sqrt
    return float(max(value, 0.0))


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD.

    For equal sizes this is the U-statistic over index pairs i != j, so the
    cross term also drops its diagonal and identical sets score exactly 0.
    For unequal sizes the cross term averages over all pairs.
    """
    m, n = len(x), len(y)
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    within = (kxx.sum() - np.trace(kxx)) / (m * (m - 1)) + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        cross = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        cross = kxy.mean()
    return float(within - 2 * cross)


def kid_subsets(feats_a, feats_b, subset_size: int | None = None, n_subsets: int = 100,
                seed: int = 0) -> np.ndarray:
    a = np.asarray(feats_a, dtype=np.float64).reshape(len(feats_a), -1)
    b = np.asarray(feats_b, dtype=np.float64).reshape(len(feats_b), -1)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("KID needs at least 2 samples in each set")
    if a.shape[1] != b.shape[1]:
        raise MetricError("KID feature dims differ")
    if subset_size is None:
        subset_size = min(1000, len(a), len(b))
    if subset_size < 2 or subset_size > min(len(a), len(b)):
        raise MetricError(f"subset_size {subset_size} must lie in [2, {min(len(a), len(b))}]")
    rng = np.random.default_rng(seed)
    out = np.empty(n_subsets)
    for i in range(n_subsets):
        ia = rng.choice(len(a), subset_size, replace=False)
        # rows of a and b are independent draws, so equal-sized sets may share indices
        ib = ia if len(a) == len(b) else rng.choice(len(b), subset_size, replace=False)
        out[i] = mmd2_unbiased(a[ia], b[ib])
    return out


def kid(feats_a, feats_b, subset_size: int | None = None, n_subsets: int = 100, seed: int = 0) -> float:
    """Unbiased squared MMD, cubic polynomial kernel, averaged over random subsets.

    Returned in natural units; reports multiply by 1e3.
    """
    return float(kid_subsets(feats_a, feats_b, subset_size, n_subsets, seed).mean())


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    d = cdist(x, x)
    # column 0 of the sorted row is the point itself
    return np.sort(d, axis=1)[:, k]


def precision_recall(real_feats, fake_feats, k: int = 3) -> tuple[float, float]:
    real = np.asarray(real_feats, dtype=np.float64).reshape(len(real_feats), -1)
    fake = np.asarray(fake_feats, dtype=np.float64).reshape(len(fake_feats), -1)
    if len(real) < k + 1 or len(fake) < k + 1:
        raise MetricError(f"precision/recall with k={k} needs at least {k + 1} samples per set")
    real_r = _knn_radii(real, k)
    fake_r = _knn_radii(fake, k)
    d = cdist(real, fake)
    precision = (d <= real_r[:, None]).any(axis=0).mean()
    recall = (d <= fake_r[None, :]).any(axis=1).mean()
    return float(precision), float(recall)


def mahalanobis_distances(samples, ref: GaussianStats) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if x.shape[1] != ref.dim:
        raise MetricError(f"dimension mismatch: {x.shape[1]} vs {ref.dim}")
    ridge = 1e-6 * np.trace(ref.covariance) / ref.dim
    cov = ref.covariance + ridge * np.eye(ref.dim)
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - ref.mean).T)
    return np.sqrt((z ** 2).sum(axis=0))


def mahalanobis_rank(sample_feats, ref: GaussianStats, worst_m: int | None = None) -> np.ndarray:
    """Indices of the least likely samples under ``ref``, farthest first."""
    dist = mahalanobis_distances(sample_feats, ref)
    order = np.argsort(-dist, kind="stable")
    return order if worst_m is None else order[:worst_m]


# ---------------------------------------------------------------------------
# full evaluation


@dataclass
class MetricReport:
    step: int
    fid: float
    kid: float
    precision: float
    recall: float
    probe_accuracies: dict[str, float] = field(default_factory=dict)
    n_generated: int = 0
    n_reference: int = 0

    def __post_init__(self):
        if self.fid < 0 or not (0 <= self.precision <= 1 and 0 <= self.recall <= 1):
            raise MetricError("metric report out of range")

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def metric_features(bank: ModelBank, metric_id: str, images: torch.Tensor, chunk: int = 500) -> np.ndarray:
    if metric_id not in bank:
        raise MetricError(f"metric extractor {metric_id!r} is not registered")
    out = [bank.features(metric_id, images[i:i + chunk]).flatten().cpu().numpy()
           for i in range(0, len(images), chunk)]
    return np.concatenate(out).astype(np.float64)


def evaluate(sampler: Callable[[int], torch.Tensor], real_images: torch.Tensor | None, bank: ModelBank,
             metric_id: str, n_gen: int = 5000, step: int = 0, kid_subset_size: int | None = None,
             kid_subsets_n: int = 100, pr_k: int = 3, seed: int = 0,
             probe_accuracies: dict[str, float] | None = None,
             real_feats: np.ndarray | None = None) -> MetricReport:
    """Generate ``n_gen`` samples, embed once, compute every metric.

    ``real_feats`` short-circuits re-embedding the reference set.
    """
    if real_feats is None:
        if real_images is None or len(real_images) == 0:
            raise MetricError("reference dataset is empty")
        real_feats = metric_features(bank, metric_id, real_images)
    fake_feats = metric_features(bank, metric_id, sampler(n_gen))
    if kid_subset_size is None:
        kid_subset_size = min(1000, len(real_feats), len(fake_feats))
    p, r = precision_recall(real_feats, fake_feats, pr_k)
    return MetricReport(
        step=step,
        fid=fid(fit_gaussian(real_feats), fit_gaussian(fake_feats)),
        kid=1e3 * kid(real_feats, fake_feats, kid_subset_size, kid_subsets_n, seed),
        precision=p,
        recall=r,
        probe_accuracies=dict(probe_accuracies or {}),
        n_generated=len(fake_feats),
        n_reference=len(real_feats),
    )


# ---------------------------------------------------------------------------
# feature dump files: "VAFD" | u16 version | u16 dtype | u16 rank | u64 shape[rank] | float32 data

DUMP_MAGIC = b"VAFD"
DUMP_VERSION = 1
DTYPE_FLOAT32 = 1


def write_feature_dump(path, features) -> None:
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    header = DUMP_MAGIC + struct.pack("<HHH", DUMP_VERSION, DTYPE_FLOAT32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_feature_dump(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise MetricError(f"{path}: not a feature dump (bad magic)")
    version, dtype, rank = struct.unpack_from("<HHH", raw, 4)
    if version != DUMP_VERSION or dtype != DTYPE_FLOAT32:
        raise MetricError(f"{path}: unsupported version {version} / dtype code {dtype}")
    shape = struct.unpack_from(f"<{rank}Q", raw, 10)
    offset = 10 + 8 * rank
    data = np.frombuffer(raw, dtype="<f4", offset=offset)
    if data.size != int(np.prod(shape)):
        raise MetricError(f"{path}: payload size does not match shape {shape}")
    return data.reshape(shape).copy()
