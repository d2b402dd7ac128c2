import numpy as np
import pytest

from minicnn.arch.spec import shipped_spec
from minicnn.dataio import Dataset, load_ppm
from minicnn.errors import ShapeError, SpecError
from minicnn.svm import FoldPlan, binary_metrics
from minicnn.tensor import Rng
from minicnn.training import InitPolicy, SgdConfig, init_params
from minicnn.transfer import (
    METRICS_HEADER,
    FinetunePlan,
    FusionConfig,
    MetricsRow,
    TapPoint,
    binary_target,
    export_activation_maps,
    extract_features,
    finetune_setup,
    fuse,
    handcrafted_features,
    normalize_map,
    rows_to_csv,
    rows_to_text,
    stacked_decisions,
)


@pytest.fixture
def tiny():
    spec = shipped_spec("tiny")
    return spec, init_params(spec, InitPolicy("scaled"), Rng(5))


def test_metrics_row_pools_confusions():
    a = binary_metrics([1, 1, -1, -1], [1, -1, -1, -1])
    b = binary_metrics([1, -1, -1, -1], [1, 1, -1, -1])
    row = MetricsRow.from_folds("m", [a, b])
    assert row.accuracy == pytest.approx(0.75)
    assert row.std == pytest.approx(0.0)
    # pooled: tp=2 fn=1 tn=4 fp=1
    assert row.sensitivity == pytest.approx(2 / 3)
    assert row.specificity == pytest.approx(4 / 5)
    assert row.f1 == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))


def test_csv_and_text():
    rows = [MetricsRow("raw-pixel", 0.5, 0.1, 0.25, 0.75, 0.4)]
    csv = rows_to_csv(rows).splitlines()
    assert csv[0] == ",".join(METRICS_HEADER) == "method,accuracy,std,sensitivity,specificity,f1"
    assert csv[1] == "raw-pixel,0.500000,0.100000,0.250000,0.750000,0.400000"
    assert "50.00(10.00)" in rows_to_text(rows)


def test_binary_target():
    assert binary_target([5, 6, 7, 9], (5, 6)).tolist() == [1, 1, -1, -1]


def _handcrafted_loop(img, bins=8):
    c, h, w = img.shape
    hist = []
    for ch in range(3):
        counts = [0] * bins
        for v in img[ch].ravel():
            counts[min(int(v * bins), bins - 1)] += 1
        hist += [k / (h * w) for k in counts]
    means = [img[ch].mean() for ch in range(3)]
    stds = [img[ch].std() for ch in range(3)]
    lum = img.mean(axis=0)
    steps = [(0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0), (1, -1, 2.0)]
    energy = []
    for dy, dx, norm in steps:
        vals = []
        for y in range(h):
            for x in range(w):
                y2, x2 = y + dy, x + dx
                if 0 <= y2 < h and 0 <= x2 < w:
                    vals.append((lum[y2, x2] - lum[y, x]) ** 2 / norm)
        energy.append(np.mean(vals))
    return np.array(hist + means + stds + energy)


def test_handcrafted_matches_loop(np_rng):
    imgs = np_rng.random((3, 3, 5, 6))
    imgs[0, 0, 0, 0] = 1.0
    feats = handcrafted_features(imgs)
    assert feats.shape == (3, 34)
    for i in range(3):
        np.testing.assert_allclose(feats[i], _handcrafted_loop(imgs[i]), atol=1e-12)
    with pytest.raises(ShapeError):
        handcrafted_features(np.zeros((2, 1, 4, 4)))


def test_extract_features(tiny, np_rng):
    spec, params = tiny
    x = np_rng.random((4, 1, 6, 6))
    gap = extract_features(params, spec, TapPoint("r2", "gap"), x)
    np.testing.assert_allclose(gap, extract_features(params, spec, TapPoint("g"), x), atol=1e-12)
    c1 = extract_features(params, spec, TapPoint("c1"), x)
    r1 = extract_features(params, spec, TapPoint("r1"), x)
    assert r1.shape == (4, 3 * 36)
    np.testing.assert_array_equal(r1, np.maximum(c1, 0))
    np.testing.assert_array_equal(extract_features(params, spec, TapPoint("input"), x), x.reshape(4, -1))
    with pytest.raises(SpecError):
        extract_features(params, spec, TapPoint("nope"), x)
    with pytest.raises(ShapeError):
        extract_features(params, spec, TapPoint("fc", "gap"), x)
    with pytest.raises(ValueError):
        TapPoint("g", "max")


def _toy_members(rng, n=30):
    y = np.where(np.arange(n) % 2 == 0, 1, -1)
    a = rng.normal(size=(n, 3)) + 0.8 * y[:, None]
    b = rng.normal(size=(n, 2))
    return a, b, y


def test_classifier_fusion_ignores_duplicate_members(np_rng):
    a, b, y = _toy_members(np_rng)
    plan = FoldPlan(3, 0)
    cfg = FusionConfig("classifier", c_grid=(1.0,), gamma_grid=(0.5,))
    p1, _ = stacked_decisions([a, b], y, plan, cfg)
    p2, _ = stacked_decisions([a, b, a.copy()], y, plan, cfg)
    np.testing.assert_array_equal(p1, p2)


def test_stacking_never_sees_test_rows(np_rng):
    a, b, y = _toy_members(np_rng)
    plan = FoldPlan(3, 0)
    seen = []
    stacked_decisions([a, b], y, plan, FusionConfig("classifier", c_grid=(1.0,), gamma_grid=(0.5,)), seen)
    for (train, test), logged in zip(plan.splits(a, y), seen):
        np.testing.assert_array_equal(train, logged)
        assert not set(logged) & set(test)


def test_fuse_checks(np_rng):
    a, b, y = _toy_members(np_rng)
    with pytest.raises(ValueError):
        fuse(FusionConfig(), [a], y, FoldPlan(3))
    with pytest.raises(ShapeError):
        fuse(FusionConfig(), [a, b[:-1]], y, FoldPlan(3))
    with pytest.raises(ValueError):
        FusionConfig("average")
    row = fuse(FusionConfig(c_grid=(1.0,), gamma_grid=(0.2,)), [a, b], y, FoldPlan(3))
    assert row.method == "feature-fusion" and row.accuracy > 0.6


def test_finetune_setup(tiny):
    spec, params = tiny
    params.velocity["fc.w"] = np.ones_like(params["fc.w"])
    params.velocity["c1.w"] = np.ones_like(params["c1.w"])
    plan = FinetunePlan(("fc",), head_classes=2, lr_multiplier=10.0)
    target, start, cfg = finetune_setup(params, spec, plan, SgdConfig(lr=0.01), Rng(0))
    assert start["fc.w"].shape == (4, 2) and start["fc.b"].shape == (2,)
    np.testing.assert_array_equal(start["c1.w"], params["c1.w"])
    assert "fc.w" not in start.velocity and "c1.w" in start.velocity
    assert start.spec_hash == target.hash() != spec.hash()
    assert cfg.multiplier("fc.w") == 10.0 and cfg.multiplier("c1.w") == 1.0
    with pytest.raises(ValueError):
        FinetunePlan(lr_multiplier=0)


def test_normalize_map():
    np.testing.assert_array_equal(normalize_map(np.array([[2.0, 4.0], [3.0, 2.0]])) * 255, [[0, 255], [128, 0]])
    np.testing.assert_array_equal(normalize_map(np.full((2, 2), 7.0)) * 255, np.full((2, 2), 128))


def test_export_activation_maps(tiny, tmp_path, np_rng):
    spec, params = tiny
    paths = export_activation_maps(params, spec, np_rng.random((1, 6, 6)), ["r1"], tmp_path)
    assert [p.name for p in paths] == ["r1_c000.ppm", "r1_c001.ppm", "r1_c002.ppm"]
    assert load_ppm(paths[0]).shape == (3, 6, 6)
    with pytest.raises(ShapeError):
        export_activation_maps(params, spec, np_rng.random((1, 6, 6)), ["fc"], tmp_path)
