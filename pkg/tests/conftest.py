import numpy as np
import pytest
import torch
from torch import nn

from visionaid.bank import FeatureExtractorSpec, ModelBank
from visionaid.config import from_dict


class ChannelQuadrants(nn.Module):
    """Mean of one input channel over each 2x2 quadrant of the image -> (1, 2, 2)."""

    def __init__(self, channel: int):
        super().__init__()
        self.channel = channel
        self.scale = nn.Parameter(torch.ones(1))

    def forward(self, x):
        return [self.scale * nn.functional.adaptive_avg_pool2d(x[:, self.channel:self.channel + 1], 2)]


def quadrant_spec(model_id, res=16):
    return FeatureExtractorSpec(model_id, res, 3, [(1, 2, 2)])


def tiny_bank(res=16, zero=True):
    """Two cheap informative extractors plus (optionally) a constant one, and a metric net."""
    bank = ModelBank()
    bank.register_surrogate(FeatureExtractorSpec("pool4", res, 3, [(3, 4, 4)]), "pool", out_size=4)
    bank.register_surrogate(FeatureExtractorSpec("conv", res, 3, [(8, 4, 4)]), "random_conv", widths=[4, 8], seed=5)
    if zero:
        bank.register_surrogate(FeatureExtractorSpec("zero", res, 3, [(2, 4, 4)]), "zero", output_shapes=[(2, 4, 4)])
    bank.register_surrogate(FeatureExtractorSpec("metric", res, 3, [(16, 1, 1)]), "random_conv", widths=[8, 16],
                            seed=99, global_pool=True)
    return bank


def tiny_raw(out_dir, **sections):
    raw = {
        "data": {"path": "synthetic:two_mode", "n_samples": 64, "batch_size": 4, "resolution": 32},
        "generator": {"channels": 4, "latent_dim": 8},
        "discriminator": {"channels": 4, "head_width": 8},
        "selection": {"k_max": 3, "runs": 1},
        "schedule": {"warmup_steps": 0, "intervals": [100, 50, 50]},
        "metrics": {"extractor": "metric", "snapshot_every": 50, "snapshot_n_gen": 64, "n_gen": 64,
                    "kid_subset_size": 32, "kid_subsets": 5},
        "run": {"output_dir": str(out_dir), "log_every": 25},
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return raw


def tiny_cfg(out_dir, **sections):
    return from_dict(tiny_raw(out_dir, **sections))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-6 + 1e-3 * np.abs(b).max())))


@torch.no_grad()
def central_diff(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar f at x (float64) by central differences."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run -----

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = getattr(item, "originalname", item.name)
    if not name.startswith("test_criterion_") or not (rep.when == "call" or rep.failed):
        return
    n = int(name.split("_")[2])
    title = (item.function.__doc__ or name).strip().splitlines()[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ok = rep.passed and _CRITERIA.get(n, (True, ""))[0]
    _CRITERIA[n] = (ok, f"{title} ({detail})" if detail else title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title}")
