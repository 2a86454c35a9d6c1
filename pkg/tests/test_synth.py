import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ihdnet.labels import ANY
from ihdnet.synth import (BRAIN_HU, SPLITS, SynthSpec, assign_splits, generate_dataset, generate_series,
                          load_dataset, read_manifest)


def test_series_deterministic():
    spec = SynthSpec(seed=5, num_series=4)
    v1, y1 = generate_series(spec, 2)
    v2, y2 = generate_series(spec, 2)
    assert v1.slices.tobytes() == v2.slices.tobytes()
    assert np.array_equal(y1, y2)


def test_series_differ_by_index_and_seed():
    a = generate_series(SynthSpec(seed=5, num_series=4), 0)[0].slices
    b = generate_series(SynthSpec(seed=5, num_series=4), 1)[0].slices
    c = generate_series(SynthSpec(seed=6, num_series=4), 0)[0].slices
    assert a.tobytes() != b.tobytes() and a.tobytes() != c.tobytes()


def test_forced_negative_has_no_blobs():
    spec = SynthSpec(seed=1, num_series=5, force_negative=True, noise_hu=0)
    for i in range(5):
        vol, y = generate_series(spec, i)
        assert not y.any()
        # without noise every pixel is air, skull or plain brain
        assert set(np.unique(vol.slices)) <= {-1000, 1000, BRAIN_HU}


def test_blob_pixels_carry_signal():
    spec = SynthSpec(seed=2, num_series=30, noise_hu=0)
    for i in range(30):
        vol, y = generate_series(spec, i)
        for k in range(vol.num_slices):
            blood = (vol.slices[k] > BRAIN_HU) & (vol.slices[k] < 1000)
            assert blood.any() == bool(y[k, :5].any())


def test_geometry_ranges():
    spec = SynthSpec(seed=0, num_series=10, slices_min=3, slices_max=5, frame_size=48)
    for i in range(10):
        vol, y = generate_series(spec, i)
        assert 3 <= vol.num_slices <= 5
        assert vol.slices.shape[1:] == (48, 48) and vol.slices.dtype == np.int16
        assert y.shape == (vol.num_slices, 6)
        assert vol.slices.min() == -1000


def test_index_out_of_range():
    with pytest.raises(IndexError):
        generate_series(SynthSpec(num_series=3), 3)


@pytest.mark.parametrize("kwargs", [{"frame_size": 16}, {"signal_hu": 0}, {"label_noise": 1.0},
                                    {"slices_min": 5, "slices_max": 4}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SynthSpec(**kwargs)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31), st.floats(0, 0.4))
def test_any_is_or_of_subtypes(seed, noise):
    spec = SynthSpec(seed=seed, num_series=3, label_noise=noise, frame_size=32)
    for i in range(3):
        _, y = generate_series(spec, i)
        assert np.array_equal(y[:, ANY], y[:, :5].max(axis=1))


def test_prevalence_matches_rates():
    n = 1000
    spec = SynthSpec(seed=11, num_series=n, frame_size=32, slices_min=4, slices_max=6)
    present = np.array([generate_series(spec, i)[1][:, :5].any(axis=0) for i in range(n)])
    rates = np.array(spec.class_rates)
    sigma = np.sqrt(n * rates * (1 - rates))
    assert np.all(np.abs(present.sum(axis=0) - n * rates) <= 3 * sigma)


def test_split_counts():
    split = assign_splits(100, (0.7, 0.1, 0.2), seed=3)
    assert [split.count(s) for s in SPLITS] == [70, 10, 20]
    assert assign_splits(9, (1, 0, 0), seed=0) == ["train"] * 9


def test_split_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        assign_splits(10, (0.5, 0.2, 0.2), seed=0)


def test_dataset_files(tmp_path):
    spec = SynthSpec(seed=4, num_series=10, frame_size=32, slices_min=3, slices_max=4)
    data = generate_dataset(spec, (0.6, 0.2, 0.2), tmp_path)
    manifest = read_manifest(tmp_path / "manifest.csv")
    answers = read_manifest(tmp_path / "answers.csv")
    assert len(manifest) == 10
    hidden = {sid for sid, (s, _) in manifest.items() if s == "unlabeled"}
    assert len(hidden) == 2 and set(answers) == hidden
    for sid, (split, y) in manifest.items():
        assert (y is None) == (split == "unlabeled")
    for sid in hidden:
        assert np.array_equal(answers[sid][1], data.hidden[sid])
    # every slice row of a series carries that series' split
    rows = (tmp_path / "manifest.csv").read_text().splitlines()[1:]
    split_of = {}
    for row in rows:
        sid, _, split = row.split(",")[:3]
        assert split_of.setdefault(sid, split) == split
    loaded = load_dataset(tmp_path)
    by_id = {r.series_id: r for r in data.records}
    for r in loaded.records:
        assert np.array_equal(r.volume.slices, by_id[r.series_id].volume.slices)


def test_dataset_is_reproducible(tmp_path):
    spec = SynthSpec(seed=8, num_series=4, frame_size=32, slices_min=2, slices_max=3)
    generate_dataset(spec, (0.5, 0.25, 0.25), tmp_path / "a")
    generate_dataset(spec, (0.5, 0.25, 0.25), tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
