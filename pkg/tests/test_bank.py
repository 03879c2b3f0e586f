import json

import pytest
import torch
import torch.nn.functional as F

from conftest import central_diff, rel_err
from visionaid.bank import (BankError, FeatureExtractorSpec, ModelBank, PoolExtractor, RegistrationError,
                            ValidationError, desk_bank, preprocess, weights_checksum)
from visionaid.heads import build_head


def test_register_and_list():
    bank = ModelBank()
    bank.register_surrogate(FeatureExtractorSpec("edges16", 32, 3, [(16, 8, 8)]), "edges")
    assert bank.list_models() == ["edges16"]
    assert bank.spec("edges16").output_shapes == ((16, 8, 8),)


def test_duplicate_id_rejected():
    bank = ModelBank()
    spec = FeatureExtractorSpec("p", 32, 3, [(3, 8, 8)])
    bank.register_surrogate(spec, "pool", out_size=8)
    with pytest.raises(RegistrationError):
        bank.register_surrogate(spec, "pool", out_size=8)


def test_multi_scale_spec_gives_three_branches():
    spec = FeatureExtractorSpec("ms", 32, 3, [(32, 8, 8), (32, 4, 4), (64,)], head_kind="multi_scale")
    assert build_head(spec).n_branches == 3


@pytest.mark.parametrize("shapes,kind", [
    ([(16, 8, 8), (64,)], "single_scale"),
    ([(16, 8, 8), (8, 4, 4)], "single_scale"),
    ([(16, 8, 8), (64,)], "multi_scale"),
    ([(16, 8, 8), (8, 4, 4)], "multi_scale"),
    ([(16, 0, 8)], "single_scale"),
    ([], "single_scale"),
])
def test_spec_invariants(shapes, kind):
    with pytest.raises(ValidationError):
        FeatureExtractorSpec("bad", 32, 3, shapes, head_kind=kind)


def test_declared_shape_must_match_module():
    bank = ModelBank()
    with pytest.raises(ValidationError):
        bank.register_surrogate(FeatureExtractorSpec("p", 32, 3, [(3, 4, 4)]), "pool", out_size=8)


def test_registered_weights_are_frozen():
    bank = desk_bank()
    for mid in bank.list_models():
        module = bank.entry(mid).module
        assert not module.training
        assert all(not p.requires_grad for p in module.parameters())


def test_preprocess_identity_is_affine_passthrough():
    spec = FeatureExtractorSpec("p", 32, 3, [(3, 8, 8)])
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    assert torch.equal(preprocess(x, spec), (x + 1) / 2)


def test_preprocess_resizes_and_normalizes():
    spec = FeatureExtractorSpec("p", 32, 3, [(3, 8, 8)], normalization=((0.5, 0.4, 0.3), (0.2, 0.25, 0.5)))
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    out = preprocess(x, spec)
    assert out.shape == (2, 3, 32, 32)
    expected = (F.avg_pool2d((x + 1) / 2, 2) - torch.tensor([0.5, 0.4, 0.3]).view(1, 3, 1, 1)) \
        / torch.tensor([0.2, 0.25, 0.5]).view(1, 3, 1, 1)
    torch.testing.assert_close(out, expected)


def test_preprocess_upsamples_and_replicates_grey():
    spec = FeatureExtractorSpec("p", 32, 3, [(3, 8, 8)])
    x = torch.rand(2, 1, 16, 16)
    out = preprocess(x, spec)
    assert out.shape == (2, 3, 32, 32)
    assert torch.equal(out[:, 0], out[:, 2])


def test_preprocess_rejects_bad_input():
    spec = FeatureExtractorSpec("p", 32, 3, [(3, 8, 8)])
    with pytest.raises(ValidationError):
        preprocess(torch.zeros(3, 32, 32), spec)
    x = torch.zeros(1, 3, 32, 32)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        preprocess(x, spec)
    with pytest.raises(ValidationError):
        preprocess(torch.zeros(1, 2, 32, 32), spec)


@pytest.mark.parametrize("size", [16, 24, 32])
def test_preprocess_gradient_matches_finite_differences(size):
    spec = FeatureExtractorSpec("p", 12, 3, [(3, 4, 4)], normalization=((0.5, 0.4, 0.3), (0.2, 0.25, 0.5)))
    torch.manual_seed(size)
    x = (torch.rand(1, 3, size, size, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    w = torch.randn(1, 3, 12, 12, dtype=torch.float64)
    f = lambda t: (preprocess(t, spec) * w).sum()
    (g,) = torch.autograd.grad(f(x), x)
    num = central_diff(f, x.detach().clone())
    assert rel_err(g, num) < 1e-4


def test_zero_and_pool_surrogates():
    bank = ModelBank()
    shapes = [(4, 2, 2), (4, 1, 1), (8,)]
    bank.register_surrogate(FeatureExtractorSpec("z", 32, 3, shapes, head_kind="multi_scale"), "zero",
                            output_shapes=shapes)
    bank.register_surrogate(FeatureExtractorSpec("p", 32, 3, [(3, 8, 8)]), "pool", out_size=8)
    x = torch.rand(5, 3, 32, 32) * 2 - 1
    z = bank.features("z", x)
    assert [tuple(f.shape) for f in z.features] == [(5, 4, 2, 2), (5, 4, 1, 1), (5, 8)]
    assert all(torch.count_nonzero(f) == 0 for f in z.features)
    p = bank.features("p", x).features[0]
    # 4x4 block means of the [0, 1]-mapped input
    oracle = ((x + 1) / 2).reshape(5, 3, 8, 4, 8, 4).mean(dim=(3, 5))
    torch.testing.assert_close(p, oracle, rtol=0, atol=1e-6)


def test_extraction_is_pure_and_leaves_weights_untouched():
    bank = desk_bank()
    before = bank.checksums()
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    for mid in bank.list_models():
        a = bank.features(mid, x).flatten()
        b = bank.features(mid, x).flatten()
        assert torch.equal(a, b)
    assert bank.checksums() == before


def test_extract_checks_shape_and_dtype():
    bank = desk_bank()
    with pytest.raises(ValidationError):
        bank.extract_features("pool8", torch.zeros(2, 3, 16, 16))
    with pytest.raises(ValidationError):
        bank.extract_features("conv_a", torch.zeros(2, 3, 32, 32, dtype=torch.float64))
    with pytest.raises(BankError):
        bank.features("missing", torch.zeros(2, 3, 32, 32))


def test_manifest_round_trip(tmp_path):
    bank = desk_bank()
    bank.save_manifest(tmp_path / "bank.json")
    loaded = ModelBank.from_manifest(tmp_path / "bank.json")
    assert loaded.list_models() == bank.list_models()
    assert loaded.checksums() == bank.checksums()
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    assert torch.equal(loaded.features("conv_ms", x).flatten(), bank.features("conv_ms", x).flatten())
    manifest = json.loads((tmp_path / "bank.json").read_text())
    entry = manifest["models"][0]
    assert {"model_id", "input_resolution", "normalization", "output_shapes", "head_kind"} <= set(entry)


def test_manifest_detects_tampered_weights(tmp_path, monkeypatch):
    bank = desk_bank()
    weights = tmp_path / "cache"
    monkeypatch.setenv("VISIONAID_MODEL_DIR", str(weights))
    bank.save_manifest(tmp_path / "bank.json")
    blob = weights / f"{bank.checksums()['conv_a']}.pt"
    assert blob.exists()
    state = torch.load(blob)
    first = next(iter(state))
    state[first] = state[first] + 1
    torch.save(state, blob)
    with pytest.raises(ValidationError):
        ModelBank.from_manifest(tmp_path / "bank.json")


def test_checksum_sees_every_weight():
    m = PoolExtractor(4)
    conv = torch.nn.Conv2d(3, 4, 3)
    a = weights_checksum(conv)
    with torch.no_grad():
        conv.weight[0, 0, 0, 0] += 1e-6
    assert weights_checksum(conv) != a
    assert weights_checksum(m) == weights_checksum(PoolExtractor(4))
