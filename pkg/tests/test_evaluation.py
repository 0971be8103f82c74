import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectra.data import normalize, stratified_split, synth_scene
from spectra.evaluation import (
    confusion,
    evaluate,
    format_report,
    metrics,
    predict_pixels,
    read_ppm,
    render_map,
    write_report,
)
from spectra.kvtext import parse_kv
from spectra.model import CMTNet, ModelConfig


def kappa_oracle(cm):
    total = 0
    agree = 0
    for i in range(len(cm)):
        agree += cm[i][i]
        for j in range(len(cm)):
            total += cm[i][j]
    chance = 0.0
    for i in range(len(cm)):
        row = sum(cm[i][j] for j in range(len(cm)))
        col = sum(cm[j][i] for j in range(len(cm)))
        chance += row * col
    po, pe = agree / total, chance / (total * total)
    return (po - pe) / (1 - pe)


# ---------------------------------------------------------------- confusion


def test_perfect_predictions_are_diagonal():
    y = np.array([0, 1, 2, 2, 1])
    assert np.array_equal(confusion(y, y, 3), np.diag([1, 2, 2]))


def test_empty_input_gives_zeros():
    cm = confusion([], [], 4)
    assert cm.shape == (4, 4) and not cm.any()


def test_confusion_matches_tally():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 5, 1000), rng.integers(0, 5, 1000)
    tally = [[0] * 5 for _ in range(5)]
    for a, b in zip(t.tolist(), p.tolist()):
        tally[a][b] += 1
    cm = confusion(t, p, 5)
    assert cm.tolist() == tally and cm.sum() == 1000


def test_confusion_rejects_bad_input():
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion([0, 2], [0, 1], 2)


# ---------------------------------------------------------------- metrics


def test_diagonal_metrics():
    r = metrics(np.diag([2, 2]))
    assert (r.oa, r.aa, r.kappa) == (1.0, 1.0, 1.0)


def test_chance_agreement_has_zero_kappa():
    r = metrics([[1, 1], [1, 1]])
    assert r.oa == 0.5 and r.kappa == 0.0


def test_kappa_matches_formula_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cm = rng.integers(0, 40, size=(4, 4))
        assert abs(metrics(cm).kappa - kappa_oracle(cm.tolist())) <= 1e-12


def test_absent_class_is_skipped_in_aa():
    r = metrics([[3, 1, 0], [0, 0, 0], [1, 0, 1]])
    assert np.isnan(r.per_class[1])
    assert r.aa == pytest.approx((0.75 + 0.5) / 2, abs=1e-15)


def test_degenerate_chance_rule():
    assert metrics([[5, 0], [0, 0]]).kappa == 1.0
    assert metrics([[0, 5], [0, 0]]).kappa == 0.0


def test_metrics_errors():
    with pytest.raises(ValueError):
        metrics(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        metrics(np.ones((2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=60).filter(lambda x: len(set(x)) >= 2))
def test_self_agreement_is_perfect(x):
    r = metrics(confusion(x, x, 5))
    assert (r.oa, r.aa, r.kappa) == (1.0, 1.0, 1.0)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.lists(st.integers(0, 9), min_size=3, max_size=3), min_size=3, max_size=3))
def test_metric_ranges(rows):
    cm = np.array(rows)
    if cm.sum() == 0:
        return
    r = metrics(cm)
    assert 0.0 <= r.oa <= 1.0 and 0.0 <= r.aa <= 1.0
    assert r.kappa <= 1.0 + 1e-15
    diagonal = not (cm - np.diag(np.diag(cm))).any()
    assert (r.kappa == 1.0) == diagonal


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_ignore_prediction_order(seed):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    perm = rng.permutation(200)
    a, b = metrics(confusion(t, p, 4)), metrics(confusion(t[perm], p[perm], 4))
    assert (a.oa, a.aa, a.kappa) == (b.oa, b.aa, b.kappa)


def test_report_outputs(tmp_path):
    r = metrics([[8, 2], [1, 9]])
    table = format_report(r, ["water", "soil"])
    assert "water" in table and "85.00" in table
    write_report(r, tmp_path / "m.txt")
    kv = parse_kv((tmp_path / "m.txt").read_text())
    assert float(kv["oa"]) == r.oa and float(kv["class_2"]) == 0.9


# ---------------------------------------------------------------- maps


def test_single_class_raster_gives_identical_pixels(tmp_path):
    img = render_map(np.full((2, 2), 1), ["#12abef"], tmp_path / "m.ppm")
    assert img.reshape(4, 3).tolist() == [[0x12, 0xAB, 0xEF]] * 4


def test_unlabeled_pixels_are_black():
    img = render_map(np.array([[0, 1], [2, 0]]), ["#ffffff", "#ff0000"])
    assert img[0, 0].tolist() == [0, 0, 0] and img[1, 1].tolist() == [0, 0, 0]


def test_ppm_roundtrip(tmp_path):
    raster = np.random.default_rng(2).integers(0, 4, size=(7, 5))
    img = render_map(raster, ["#ff0000", "#00ff00", "#0000ff"], tmp_path / "m.ppm")
    assert (tmp_path / "m.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "m.ppm"), img)


def test_palette_must_cover_raster():
    with pytest.raises(ValueError):
        render_map(np.array([[3]]), ["#000000"])


# ---------------------------------------------------------------- model evaluation


@pytest.fixture(scope="module")
def scene():
    cube, gt, _ = synth_scene(12, 12, 9, n_classes=3, seed=4)
    cube = normalize(cube)
    split = stratified_split(gt, 0.1, 0)
    cfg = ModelConfig(bands=9, classes=3, patch_size=5, embed_dim=8, heads=2, mlp_hidden=8)
    return cube, gt, split, cfg


def test_constant_model(scene):
    cube, gt, split, cfg = scene
    model = CMTNet(cfg, seed=0)
    for head in ("transformer", "cnn", "fused"):
        model[f"head.{head}.weight"].data[...] = 0.0
        model[f"head.{head}.bias"].data[...] = [0.0, 1.0, 0.0]
    report, raster = evaluate(model, cube, gt, split)
    _, tl = split.test_arrays()
    assert report.per_class.tolist() == [0.0, 1.0, 0.0]
    assert report.oa == np.mean(tl == 2)
    assert set(np.unique(raster).tolist()) == {2}


def test_raster_agrees_with_report(scene):
    cube, gt, split, cfg = scene
    model = CMTNet(cfg, seed=1)
    report, raster = evaluate(model, cube, gt, split)
    assert np.array_equal(raster > 0, gt.labels > 0)
    tc, tl = split.test_arrays()
    again = metrics(confusion(tl - 1, raster[tc[:, 0], tc[:, 1]] - 1, 3))
    assert (again.oa, again.aa, again.kappa) == (report.oa, report.aa, report.kappa)


def test_batch_size_does_not_change_predictions(scene):
    cube, gt, split, cfg = scene
    model = CMTNet(cfg, seed=2)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        p.data[...] = rng.normal(0.0, 0.3, p.shape)
    for rs in model.stats.values():
        rs.mean = rng.normal(0.0, 0.5, rs.mean.shape)
        rs.var = rng.uniform(0.5, 2.0, rs.var.shape)
    coords = np.argwhere(gt.labels > 0)
    assert np.array_equal(predict_pixels(model, cube, coords, 1), predict_pixels(model, cube, coords, 100))
