import numpy as np

from embryoreg.suite import ATLAS_GAS, make_atlas_set, make_case

DIMS = (32, 32, 32)


def test_atlas_layout():
    aset = make_atlas_set(dims=DIMS)
    assert len(aset.atlases) == 8 and len(aset.pregnancies) == 8
    assert [a.ga_days for a in aset.atlases] == [g for pair in ATLAS_GAS for g in pair]
    assert min(a.ga_days for a in aset.atlases) == 56 and max(a.ga_days for a in aset.atlases) == 90
    assert aset.atlases[3].atlas_id == "p4_ga70"


def test_degradation_touches_only_intensities():
    clean = make_atlas_set(dims=DIMS)
    bad = make_atlas_set(dims=DIMS, degraded=4)
    for a, b in zip(clean.atlases, bad.atlases):
        assert np.array_equal(a.seg.data, b.seg.data)
        same = np.array_equal(a.volume.data, b.volume.data)
        assert same == (a.pregnancy_id != "4")
    assert np.array_equal(clean.omega.data, bad.omega.data)


def test_case_deterministic_with_truth():
    a, b = make_case(3, dims=DIMS), make_case(3, dims=DIMS)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.truth.data, b.truth.data)
    assert a.image.landmarks == a.landmarks
    assert 56 <= a.image.ga_days <= 90 and a.truth.count() > 0
