import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectra.data import (
    GroundTruth,
    HsiCube,
    ManifestError,
    SampleSplit,
    batch_iter,
    extract_patch,
    extract_patches,
    load_cube,
    normalize,
    stratified_split,
    synth_scene,
    train_count,
    write_scene,
)

# per-class (train, test) pairs of the 550x400 LongKou scene
LONGKOU = [(172, 34339), (41, 8333), (15, 3016), (316, 62896), (20, 4131), (59, 11795), (335, 66721), (35, 7089), (26, 5203)]


def raster_with_totals(totals, width=400):
    flat = np.concatenate([np.full(t, k + 1) for k, t in enumerate(totals)])
    pad = (-len(flat)) % width
    flat = np.concatenate([flat, np.zeros(pad, int)])
    labels = flat.reshape(-1, width)
    names = [f"c{k}" for k in range(len(totals))]
    return GroundTruth(labels, names, ["#000000"] * len(names))


# ---------------------------------------------------------------- manifest I/O


def test_manifest_roundtrip(tmp_path):
    cube, gt, _ = synth_scene(8, 8, 5, n_classes=3, seed=1)
    cube = HsiCube(cube.data, np.linspace(400.0, 900.0, 5))
    path = write_scene(cube, gt, tmp_path)
    back, gt2 = load_cube(path)
    assert back.data.tobytes() == cube.data.tobytes()
    assert np.array_equal(back.wavelengths, cube.wavelengths)
    assert np.array_equal(gt2.labels, gt.labels)
    assert gt2.class_names == gt.class_names and gt2.palette == gt.palette


def test_manifest_files_are_raw_little_endian(tmp_path):
    cube, gt, _ = synth_scene(4, 3, 2, n_classes=2, seed=2)
    write_scene(cube, gt, tmp_path)
    data = np.fromfile(tmp_path / "scene.bsq", dtype="<f4")
    assert data.size == 2 * 4 * 3
    assert np.array_equal(data.reshape(2, 4, 3), cube.data.astype(np.float32))
    assert np.array_equal(np.fromfile(tmp_path / "scene_gt.u16", dtype="<u2").reshape(4, 3), gt.labels)


def test_truncated_payload_is_rejected(tmp_path):
    cube, gt, _ = synth_scene(8, 8, 5, n_classes=3, seed=1)
    path = write_scene(cube, gt, tmp_path)
    raw = (tmp_path / "scene.bsq").read_bytes()
    (tmp_path / "scene.bsq").write_bytes(raw[:-4])
    with pytest.raises(ManifestError, match="expected"):
        load_cube(path)


def test_label_beyond_class_count_is_rejected(tmp_path):
    cube, gt, _ = synth_scene(8, 8, 5, n_classes=3, seed=1)
    path = write_scene(cube, gt, tmp_path)
    labels = gt.labels.copy()
    labels[0, 0] = 4
    (tmp_path / "scene_gt.u16").write_bytes(labels.astype("<u2").tobytes())
    with pytest.raises(ManifestError, match="exceeds"):
        load_cube(path)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cube(tmp_path / "nope.manifest")
    cube, gt, _ = synth_scene(4, 4, 2, n_classes=2, seed=1)
    path = write_scene(cube, gt, tmp_path)
    (tmp_path / "scene_gt.u16").unlink()
    with pytest.raises(FileNotFoundError):
        load_cube(path)


def test_manifest_missing_key(tmp_path):
    cube, gt, _ = synth_scene(4, 4, 2, n_classes=2, seed=1)
    path = write_scene(cube, gt, tmp_path)
    text = "\n".join(line for line in path.read_text().splitlines() if not line.startswith("bands"))
    path.write_text(text)
    with pytest.raises(ManifestError, match="bands"):
        load_cube(path)


# ---------------------------------------------------------------- normalisation


def test_normalize_band():
    cube = HsiCube(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 3))
    assert normalize(cube).data.ravel().tolist() == [0.0, 0.5, 1.0]


def test_normalize_constant_band():
    cube = HsiCube(np.array([5.0, 5.0]).reshape(1, 1, 2))
    assert normalize(cube).data.ravel().tolist() == [0.0, 0.0]


def test_normalize_random_extrema():
    x = np.random.default_rng(0).normal(10, 3, size=(6, 7, 9))
    out = normalize(HsiCube(x)).data
    for b in range(6):
        vals = out[b].ravel().tolist()
        assert abs(min(vals)) <= 1e-12 and abs(max(vals) - 1.0) <= 1e-12


# ---------------------------------------------------------------- patches


def ramp(h, w):
    return HsiCube(np.arange(h * w, dtype=float).reshape(1, h, w))


def test_interior_patch_is_plain_window():
    cube = ramp(5, 6)
    assert np.array_equal(extract_patch(cube, 2, 3, 3)[0], cube.data[0, 1:4, 2:5])


def test_corner_patch_reflects_without_edge_duplicate():
    cube = ramp(4, 4)  # value = 4*r + c
    # rows/cols -1 reflect to 1
    expect = np.array([[5, 4, 5], [1, 0, 1], [5, 4, 5]], dtype=float)
    assert np.array_equal(extract_patch(cube, 0, 0, 3)[0], expect)


def test_reflection_clamps_on_tiny_cubes():
    cube = ramp(1, 2)
    patch = extract_patch(cube, 0, 0, 5)[0]
    # columns -2..2 reflect to 2, 1, 0, 1, 2 and the two 2s fold back to 0
    assert patch.tolist() == [[0.0, 1.0, 0.0, 1.0, 0.0]] * 5


def test_patch_centre_outside_cube():
    with pytest.raises(IndexError):
        extract_patch(ramp(3, 3), 3, 0, 3)


def test_patch13_defined_on_every_border_pixel_of_longkou_extent():
    h, w = 550, 400
    cube = HsiCube(np.random.default_rng(0).uniform(size=(1, h, w)) + 1.0)
    border = [(r, c) for r in (0, 1, 5, h - 6, h - 2, h - 1) for c in range(0, w, 7)]
    border += [(r, c) for c in (0, 1, w - 2, w - 1) for r in range(0, h, 11)]
    patches = extract_patches(cube, np.array(border), 13)
    assert patches.shape == (len(border), 1, 13, 13)
    assert np.all(patches >= 1.0)  # every cell came from the cube, never a fill value


@settings(max_examples=80, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), s=st.sampled_from([1, 3, 5, 7, 13]), data=st.data())
def test_patches_always_fully_populated(h, w, s, data):
    cube = HsiCube(np.arange(1, h * w + 1, dtype=float).reshape(1, h, w))
    r = data.draw(st.integers(0, h - 1))
    c = data.draw(st.integers(0, w - 1))
    p = extract_patch(cube, r, c, s)
    assert p.shape == (1, s, s) and np.all(p >= 1)
    assert p[0, s // 2, s // 2] == cube.data[0, r, c]
    assert np.array_equal(extract_patches(cube, np.array([[r, c]]), s)[0], p)


# ---------------------------------------------------------------- sampling


def test_train_count_rule():
    assert train_count(100, 0.005) == 1  # 0.5 rounds up, guard also applies
    assert train_count(1200, 0.005) == 6
    assert train_count(10, 0.005) == 1
    assert train_count(300, 0.005) == 2  # 1.5 -> 2


def test_water_spinach_row():
    gt = raster_with_totals([1194 + 6], width=100)
    split = stratified_split(gt, 0.005, seed=0)
    assert split.counts() == {1: (6, 1194)}


def test_longkou_counts_within_one():
    gt = raster_with_totals([a + b for a, b in LONGKOU])
    got = stratified_split(gt, 0.005, seed=0).counts()
    for k, (train, test) in enumerate(LONGKOU, start=1):
        assert abs(got[k][0] - train) <= 1
        assert sum(got[k]) == train + test


def test_split_partitions_labeled_pixels():
    _, gt, _ = synth_scene(seed=3)
    split = stratified_split(gt, 0.05, seed=4)
    tr, _ = split.train_arrays()
    te, _ = split.test_arrays()
    seen = {tuple(p) for p in tr} | {tuple(p) for p in te}
    assert len(seen) == len(tr) + len(te) == int((gt.labels > 0).sum())
    for k in split.train:
        for part in (split.train[k], split.test[k]):
            assert np.all(gt.labels[part[:, 0], part[:, 1]] == k)


def test_split_is_seeded():
    _, gt, _ = synth_scene(seed=3)
    a, b = stratified_split(gt, 0.05, 9), stratified_split(gt, 0.05, 9)
    for k in a.train:
        assert np.array_equal(a.train[k], b.train[k])
    c = stratified_split(gt, 0.05, 10)
    assert any(not np.array_equal(a.train[k], c.train[k]) for k in a.train)


def test_split_rejects_empty_class():
    gt = GroundTruth(np.array([[1, 1], [0, 1]]), ["a", "b"], ["#000000"] * 2)
    with pytest.raises(ValueError, match="no labeled"):
        stratified_split(gt)


# ---------------------------------------------------------------- synthetic scene


def test_noiseless_classes_are_uniform():
    cube, gt, _ = synth_scene(noise_sigma=0.0, seed=5)
    for k in range(1, 5):
        pix = cube.data[:, gt.labels == k]
        assert np.all(pix == pix[:, :1])


def test_synth_is_seeded():
    a, ga, _ = synth_scene(seed=11)
    b, gb, _ = synth_scene(seed=11)
    assert a.data.tobytes() == b.data.tobytes() and np.array_equal(ga.labels, gb.labels)


def test_default_scene_has_every_class(tmp_path):
    cube, gt, path = synth_scene(out_dir=tmp_path)
    assert cube.data.shape == (20, 32, 32)
    counts = np.bincount(gt.labels.ravel(), minlength=5)
    assert counts[0] == 0 and np.all(counts[1:] >= 1)
    back, _ = load_cube(path)
    assert back.data.tobytes() == cube.data.tobytes()


def test_synth_rejects_too_many_classes():
    with pytest.raises(ValueError):
        synth_scene(2, 2, 3, n_classes=5)


# ---------------------------------------------------------------- batches


def _split_with(n):
    """Every labeled pixel of a 1 x n strip goes to training."""
    labels = np.zeros((1, n), int) + 1
    labels[0, ::3] = 2
    gt = GroundTruth(labels, ["a", "b"], ["#000000"] * 2)
    cube = HsiCube(np.random.default_rng(0).uniform(size=(3, 1, n)))
    coords = np.argwhere(labels > 0)
    train = {k: coords[labels[coords[:, 0], coords[:, 1]] == k] for k in (1, 2)}
    test = {k: np.zeros((0, 2), np.int64) for k in (1, 2)}
    return SampleSplit(train, test, 0), cube, gt


def test_batch_sizes():
    split, cube, gt = _split_with(250)
    sizes = [len(y) for _, y in batch_iter(split, cube, gt, 100, 0, 3)]
    assert sizes == [100, 100, 50]


def test_batch_order_is_seeded_and_a_partition():
    split, cube, gt = _split_with(250)
    a = [x for x, _ in batch_iter(split, cube, gt, 64, 5, 3)]
    b = [x for x, _ in batch_iter(split, cube, gt, 64, 5, 3)]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    labels = np.concatenate([y for _, y in batch_iter(split, cube, gt, 64, 5, 3)])
    _, expect = split.train_arrays()
    assert sorted(labels.tolist()) == sorted((expect - 1).tolist())
    centres = np.concatenate([x[:, :, 1, 1] for x in a])
    assert len({c.tobytes() for c in centres}) == 250
    with pytest.raises(ValueError):
        next(batch_iter(split, cube, gt, 0, 5, 3))
