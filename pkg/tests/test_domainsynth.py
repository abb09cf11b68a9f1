from dataclasses import replace

import numpy as np
import pytest

from replaylab.domainsynth import (
    BRIGHT, DARK, DomainSpec, Sample, descending_order, desk_cohort, generate_domain,
    generate_subject, reference_cohort, read_archive, read_raw, sample_patches, shuffled_order,
    split_domain, write_archive, write_raw,
)
from replaylab.errors import ConfigError, ShapeError


@pytest.fixture(scope="module")
def small_spec():
    return DomainSpec("Test", 6, BRIGHT, (1, 3), (2.0, 3.5), 0.1, 0.2, (32, 32), seed=5)


def lesion_contrast(sample):
    inside = sample.image[sample.label > 0.5].mean()
    outside = sample.image[sample.label < 0.5].mean()
    return inside - outside


def test_generation_is_deterministic(small_spec):
    a, b = generate_domain(small_spec), generate_domain(small_spec)
    for sa, sb in zip(a.train + a.test, b.train + b.test):
        assert sa.subject_id == sb.subject_id
        assert sa.image.tobytes() == sb.image.tobytes()
        assert sa.label.tobytes() == sb.label.tobytes()


def test_labels_are_soft(small_spec):
    d = generate_domain(small_spec)
    for s in d.train + d.test:
        assert s.label.min() >= 0.0 and s.label.max() <= 1.0
        assert ((s.label > 0.05) & (s.label < 0.95)).any()
        assert s.image.shape == s.label.shape


@pytest.mark.parametrize("polarity,sign", [(DARK, -1), (BRIGHT, 1)])
def test_polarity_orders_lesion_intensity(small_spec, polarity, sign):
    d = generate_domain(replace(small_spec, contrast_polarity=polarity))
    for s in d.train + d.test:
        assert np.sign(lesion_contrast(s)) == sign


def test_opposite_polarities_are_separable():
    specs = reference_cohort()
    bright = [s for s in specs if s.contrast_polarity == BRIGHT][:2]
    dark = [s for s in specs if s.contrast_polarity == DARK]
    b = [lesion_contrast(generate_subject(sp, i)) for sp in bright for i in range(6)]
    d = [lesion_contrast(generate_subject(sp, i)) for sp in dark for i in range(6)]
    assert min(b) > 0 > max(d)


def test_volume_3d():
    spec = DomainSpec("V", 2, DARK, (1, 2), (1.5, 2.5), 0.1, 0.2, (16, 16, 16), seed=1)
    s = generate_subject(spec, 0)
    assert s.image.shape == (16, 16, 16)
    assert lesion_contrast(s) < 0


def test_radius_exceeding_volume():
    with pytest.raises(ConfigError):
        generate_domain(DomainSpec("X", 4, lesion_radius_range=(2.0, 40.0), volume_shape=(32, 32)))


def test_spec_text_round_trip(small_spec):
    assert DomainSpec.from_text(small_spec.to_text()) == small_spec


def _samples(n):
    return [Sample(np.zeros((4, 4)), np.zeros((4, 4)), f"s{i:02d}") for i in range(n)]


def test_split_sizes():
    tr, te = split_domain(_samples(10), 0.8, 0)
    assert (len(tr), len(te)) == (8, 2)
    tr, te = split_domain(_samples(2), 0.8, 0)
    assert (len(tr), len(te)) == (1, 1)


def test_split_is_partition_and_seeded():
    samples = _samples(20)
    tr, te = split_domain(samples, 0.8, 3)
    ids = [s.subject_id for s in tr + te]
    assert sorted(ids) == [s.subject_id for s in samples]
    again, _ = split_domain(samples, 0.8, 3)
    assert [s.subject_id for s in again] == [s.subject_id for s in tr]
    other, _ = split_domain(samples, 0.8, 4)
    assert [s.subject_id for s in other] != [s.subject_id for s in tr]


def test_split_errors():
    with pytest.raises(ConfigError):
        split_domain(_samples(1), 0.8, 0)
    with pytest.raises(ConfigError):
        split_domain(_samples(5), 1.0, 0)


def test_reference_cohort_train_sizes():
    counts = [s.n_subjects for s in reference_cohort()]
    assert counts == [80, 51, 47, 51, 28, 13, 12, 8]
    assert [s.name for s in descending_order(reference_cohort())] == \
        ["BWH", "Karo", "Rennes", "Milan", "NIH", "Montp", "UCSF", "AMU"]


def test_shuffled_orders_differ_across_seeds():
    names = {tuple(s.name for s in shuffled_order(reference_cohort(), seed)) for seed in range(9)}
    assert len(names) == 9


def test_desk_cohort_has_one_dark_domain():
    assert [s.contrast_polarity for s in desk_cohort()].count(DARK) == 1


def test_patches_count_and_shape(small_spec):
    s = generate_subject(small_spec, 0)
    patches = sample_patches(s, 4, (16, 16), 0.75, 0)
    assert len(patches) == 4
    assert all(img.shape == (16, 16) and lab.shape == (16, 16) for img, lab in patches)


def test_patches_on_empty_label_fall_back_to_uniform():
    s = Sample(np.zeros((20, 20)), np.zeros((20, 20)), "empty")
    assert len(sample_patches(s, 5, (8, 8), 1.0, 0)) == 5


def test_foreground_patches_contain_lesion(small_spec):
    d = generate_domain(small_spec)
    for i, s in enumerate(d.train):
        for _, lab in sample_patches(s, 16, (8, 8), 1.0, i):
            assert (lab > 0.5).any()


def test_patch_larger_than_volume():
    s = Sample(np.zeros((8, 8)), np.zeros((8, 8)), "x")
    with pytest.raises(ShapeError):
        sample_patches(s, 1, (16, 16), 0.5, 0)


def test_raw_tensor_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5))
    write_raw(tmp_path / "t.f64", arr)
    assert read_raw(tmp_path / "t.f64").tobytes() == arr.tobytes()


def test_archive_round_trip_and_idempotence(tmp_path, small_spec):
    domains = [generate_domain(small_spec), generate_domain(replace(small_spec, name="Other", seed=9))]
    dirs, written = write_archive(tmp_path, domains)
    assert written == 2
    mtimes = {p: p.stat().st_mtime_ns for d in dirs for p in d.rglob("*")}
    _, written = write_archive(tmp_path, domains)
    assert written == 0
    assert mtimes == {p: p.stat().st_mtime_ns for d in dirs for p in d.rglob("*")}
    back = read_archive(tmp_path)
    for a, b in zip(domains, back):
        assert a.spec == b.spec
        assert [s.subject_id for s in a.train] == [s.subject_id for s in b.train]
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.test, b.test))
