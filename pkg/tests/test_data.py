import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jctnet.data import (
    DataError,
    Sample,
    SynthSpec,
    generate_synthetic,
    kfold_split,
    load_dataset,
    load_labels_csv,
    random_crop,
    read_pnm,
    render_sample,
    save_dataset,
    train_test_split,
    write_pnm,
)


def test_empty_images_have_count_zero():
    samples = generate_synthetic(SynthSpec(count_lo=0, count_hi=0), 3)
    assert [s.count for s in samples] == [0, 0, 0]
    assert all(s.image.std() > 0 for s in samples)  # noise only


def test_generation_is_deterministic():
    a = generate_synthetic(SynthSpec(seed=3), 5)
    b = generate_synthetic(SynthSpec(seed=3), 5)
    for x, y in zip(a, b):
        assert x.count == y.count
        np.testing.assert_array_equal(x.image, y.image)


def test_mean_count_near_ten():
    counts = [s.count for s in generate_synthetic(SynthSpec(seed=7), 200)]
    assert 8 <= np.mean(counts) <= 12
    assert min(counts) >= 0 and max(counts) <= 20


def test_sample_is_regenerable_by_index():
    spec = SynthSpec(seed=11)
    np.testing.assert_array_equal(generate_synthetic(spec, 6)[5].image, render_sample(spec, 5).image)


def test_disks_do_not_overlap_and_stay_inside():
    s = render_sample(SynthSpec(count_lo=20, count_hi=20, seed=2), 0)
    assert s.count == 20 and s.centers.shape == (20, 2)
    d = np.hypot(*(s.centers[:, None] - s.centers[None]).transpose(2, 0, 1))
    assert d[np.triu_indices(20, 1)].min() > 2 * 2.0
    assert s.centers.min() >= 2.0 and s.centers.max() <= 63 - 2.0


def test_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(count_lo=5, count_hi=2)
    with pytest.raises(DataError):
        SynthSpec(height=16)
    with pytest.raises(DataError):
        render_sample(SynthSpec(height=32, width=32, count_lo=500, count_hi=500, max_tries=20), 0)


# -- PNM / labels ---------------------------------------------------------------
def test_single_pixel_pgm(tmp_path):
    path = tmp_path / "one.pgm"
    path.write_bytes(b"P5\n# comment\n1 1\n255\n\xff")
    np.testing.assert_array_equal(read_pnm(path), [[255]])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**32 - 1))
def test_pnm_round_trip(tmp_path_factory, h, w, color, seed):
    shape = (h, w, 3) if color else (h, w)
    img = np.random.default_rng(seed).integers(0, 256, shape).astype(np.uint8)
    path = tmp_path_factory.mktemp("pnm") / "img.pnm"
    write_pnm(path, img)
    np.testing.assert_array_equal(read_pnm(path), img)


@pytest.mark.parametrize(
    "payload",
    [b"P3\n1 1\n255\n0", b"P5\n2 2\n65535\n\x00\x00", b"P5\n2 2\n255\n\x00", b"P5\n2"],
)
def test_bad_pnm(tmp_path, payload):
    path = tmp_path / "bad.pgm"
    path.write_bytes(payload)
    with pytest.raises(DataError):
        read_pnm(path)


def test_labels_csv(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("filename,count\nimg1.pgm,42\n")
    assert load_labels_csv(path) == {"img1.pgm": 42}


@pytest.mark.parametrize("row", ["img2.pgm,-3", "img2.pgm,4.5", "img2.pgm", "img2.pgm,1,2"])
def test_bad_label_rows(tmp_path, row):
    path = tmp_path / "labels.csv"
    path.write_text(f"filename,count\n{row}\n")
    with pytest.raises(DataError):
        load_labels_csv(path)


def test_labels_must_reference_existing_files(tmp_path):
    (tmp_path / "labels.csv").write_text("filename,count\nmissing.pgm,3\n")
    with pytest.raises(DataError):
        load_labels_csv(tmp_path / "labels.csv", tmp_path)


def test_dataset_round_trip(tmp_path):
    samples = generate_synthetic(SynthSpec(seed=1), 4)
    save_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.count for s in loaded] == [s.count for s in samples]
    for a, b in zip(loaded, samples):
        np.testing.assert_array_equal(a.image, b.image)
    assert loaded[0].name == "synth_00000.ppm"


# -- crops and splits -------------------------------------------------------------
def test_full_size_crop_is_identity():
    s = render_sample(SynthSpec(seed=4), 0)
    c = random_crop(s, 64, 64, np.random.default_rng(0))
    np.testing.assert_array_equal(c.image, s.image)
    assert c.count == s.count


@pytest.mark.parametrize("size", [256, 512, 384])
def test_crop_sizes_satisfy_divisibility(size):
    s = Sample(np.zeros((512, 512, 3), dtype=np.uint8), 0, "blank", np.zeros((0, 2)))
    assert random_crop(s, size, size, np.random.default_rng(0)).image.shape == (size, size, 3)


def test_crop_rejects_indivisible_or_oversized():
    s = render_sample(SynthSpec(seed=4), 0)
    with pytest.raises(DataError):
        random_crop(s, 48, 32, np.random.default_rng(0))
    with pytest.raises(DataError):
        random_crop(s, 96, 32, np.random.default_rng(0))


def test_crop_offsets_deterministic_and_counts_centers():
    s = render_sample(SynthSpec(height=128, width=128, seed=5), 0)
    a = random_crop(s, 64, 64, np.random.default_rng(9))
    b = random_crop(s, 64, 64, np.random.default_rng(9))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.count == b.count == len(a.centers)
    assert np.all((a.centers >= 0) & (a.centers < 64))


def test_crop_without_positions_needs_area_scaling():
    s = Sample(np.zeros((64, 128, 3), dtype=np.uint8), 10, "x")
    with pytest.raises(DataError):
        random_crop(s, 64, 64, np.random.default_rng(0))
    assert random_crop(s, 64, 64, np.random.default_rng(0), area_scaled=True).count == 5.0


def test_kfold_sizes():
    assert sorted(len(f) for f in kfold_split(7, 5)) == [1, 1, 1, 2, 2]
    assert [len(f) for f in kfold_split(50, 5)] == [10] * 5
    with pytest.raises(DataError):
        kfold_split(3, 5)


@given(st.integers(5, 80), st.integers(1, 5), st.integers(0, 1000))
def test_kfold_is_a_partition(n, k, seed):
    folds = kfold_split(n, k, seed)
    joined = np.concatenate(folds)
    assert sorted(joined.tolist()) == list(range(n))
    assert max(map(len, folds)) - min(map(len, folds)) <= 1


def test_train_test_split():
    tr, te = train_test_split(200, 0.8, seed=0)
    assert len(tr) == 160 and len(te) == 40
    assert not set(tr) & set(te)
