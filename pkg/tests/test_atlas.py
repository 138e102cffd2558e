import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sphere
from embryoreg.affine import AffineTransform, apply_point, compose, rotation_matrix, similarity
from embryoreg.atlas import (Atlas, AtlasSet, align_to_standard, build_atlas, build_omega_mask,
                             canonical_landmarks, load_atlas_set, save_atlas_set, select_atlases,
                             standard_transform)
from embryoreg.errors import DegenerateLandmarksError, InputError, MissingLandmarksError, SelectionError
from embryoreg.phantom import PhantomSpec, apply_known_deformation, gen_phantom
from embryoreg.volume import Landmarks, Mask, Volume, dilate
from test_volume import brute_dilate

SIDE = 16
CANON = canonical_landmarks(SIDE)


def tiny_atlas(atlas_id, pid, ga, seg=None):
    seg = seg if seg is not None else sphere((SIDE,) * 3, (8, 8, 8), 3)
    return Atlas(atlas_id, str(pid), ga, Volume(np.zeros((SIDE,) * 3)), seg, CANON)


def brute_select(atlases, ga, m):
    """Best candidate per pregnancy, then the m best pregnancies."""
    best = {}
    for a in atlases:
        key = (abs(a.ga_days - ga), a.ga_days)
        if a.pregnancy_id not in best or key < best[a.pregnancy_id][0]:
            best[a.pregnancy_id] = (key, a)
    order = sorted(best.items(), key=lambda kv: (kv[1][0], int(kv[0])))
    return [a for _, (_, a) in order[:m]]


def test_canonical_pair_at_64():
    c = canonical_landmarks(64)
    assert c.crown == (32, 12, 32) and c.rump == (32, 52, 32)


class TestSelect:
    def test_nearest(self):
        atlases = [tiny_atlas("a", 1, 56), tiny_atlas("b", 2, 70), tiny_atlas("c", 3, 84)]
        assert [a.atlas_id for a in select_atlases(atlases, 72, 1)] == ["b"]

    def test_one_per_pregnancy(self):
        atlases = [tiny_atlas(f"g{g}", p, g) for g, p in zip((56, 58, 63, 70), (1, 1, 2, 3))]
        chosen = select_atlases(atlases, 60, 2)
        assert [a.ga_days for a in chosen] == [58, 63]
        assert [a.pregnancy_id for a in chosen] == ["1", "2"]

    def test_tie_goes_to_lower_ga(self):
        atlases = [tiny_atlas("hi", 1, 62), tiny_atlas("lo", 2, 58)]
        assert select_atlases(atlases, 60, 1)[0].ga_days == 58

    def test_errors(self):
        atlases = [tiny_atlas("a", 1, 56), tiny_atlas("b", 2, 70)]
        with pytest.raises(SelectionError):
            select_atlases(atlases, 60, 3)
        with pytest.raises(SelectionError):
            select_atlases(atlases, None, 1)
        with pytest.raises(SelectionError):
            select_atlases(atlases, 60, 0)

    def test_accepts_an_atlas_set(self):
        s = AtlasSet((tiny_atlas("a", 1, 56), tiny_atlas("b", 2, 70)), CANON)
        assert select_atlases(s, 69, 1)[0].atlas_id == "b"

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 6), st.integers(56, 90)), min_size=1, max_size=12),
           st.integers(56, 90), st.data())
    def test_matches_brute_force(self, specs, ga, data):
        atlases = [tiny_atlas(f"x{i}", p, g) for i, (p, g) in enumerate(specs)]
        n_p = len({p for p, _ in specs})
        m = data.draw(st.integers(1, n_p))
        chosen = select_atlases(atlases, ga, m)
        assert len(chosen) == m
        assert len({a.pregnancy_id for a in chosen}) == m
        dist = [abs(a.ga_days - ga) for a in chosen]
        assert dist == sorted(dist)
        assert [a.atlas_id for a in chosen] == [a.atlas_id for a in brute_select(atlases, ga, m)]


class TestAtlasSet:
    def test_one_scan_per_pregnancy_week(self):
        with pytest.raises(InputError):
            AtlasSet((tiny_atlas("a", 1, 56), tiny_atlas("b", 1, 60)), CANON)
        AtlasSet((tiny_atlas("a", 1, 56), tiny_atlas("b", 1, 63)), CANON)

    def test_landmarks_must_be_canonical(self):
        bad = Atlas("a", "1", 60, Volume(np.zeros((SIDE,) * 3)), sphere((SIDE,) * 3, (8, 8, 8), 3),
                    Landmarks((8, 3, 8), (8, 14, 8)))
        with pytest.raises(InputError):
            AtlasSet((bad,), CANON)

    def test_empty_seg_rejected(self):
        with pytest.raises(InputError):
            tiny_atlas("a", 1, 60, Mask(np.zeros((SIDE,) * 3, bool)))

    def test_pregnancies_sorted_numerically(self):
        s = AtlasSet(tuple(tiny_atlas(f"p{p}", p, 60) for p in (10, 2, 1)), CANON)
        assert s.pregnancies == ["1", "2", "10"]

    def test_round_trip(self, tmp_path):
        s = AtlasSet((tiny_atlas("a", 1, 56), tiny_atlas("b", 2, 70)), CANON)
        save_atlas_set(tmp_path, s)
        t = load_atlas_set(tmp_path)
        assert [a.atlas_id for a in t.atlases] == ["a", "b"]
        assert np.array_equal(t.omega.data, s.omega.data)
        assert t.get("b").ga_days == 70 and t.canonical == CANON


class TestOmega:
    def test_one_atlas(self):
        a = tiny_atlas("a", 1, 60)
        assert np.array_equal(build_omega_mask([a]).data, dilate(a.seg, 1).data)

    def test_identical_segs(self):
        a, b = tiny_atlas("a", 1, 60), tiny_atlas("b", 2, 60)
        assert np.array_equal(build_omega_mask([a, b]).data, build_omega_mask([a]).data)

    def test_offset_spheres(self):
        s1 = sphere((SIDE,) * 3, (6, 8, 8), 3)
        s2 = sphere((SIDE,) * 3, (10, 8, 9), 3)
        om = build_omega_mask([tiny_atlas("a", 1, 60, s1), tiny_atlas("b", 2, 60, s2)])
        assert om.count() == brute_dilate(s1.data | s2.data, 1).sum()

    def test_strict_superset(self):
        a = tiny_atlas("a", 1, 60)
        om = build_omega_mask([a])
        assert np.all(om.data >= a.seg.data) and om.count() > a.seg.count()

    def test_empty(self):
        with pytest.raises(InputError):
            build_omega_mask([])


class TestStandardPose:
    def test_canonical_pose_is_identity(self):
        v = Volume(np.zeros((SIDE,) * 3), landmarks=CANON)
        _, psi = align_to_standard(v, CANON, roll_reference=(12, 5, 8))
        assert np.allclose(psi.matrix, np.eye(4), atol=1e-6)

    def test_swapped_ends(self):
        img = Landmarks(CANON.rump, CANON.crown)
        psi = standard_transform(img, CANON, roll_point=(12, 8, 8))
        assert np.allclose(apply_point(psi, CANON.crown), img.crown, atol=1e-12)
        assert np.allclose(apply_point(psi, CANON.rump), img.rump, atol=1e-12)
        assert np.linalg.det(psi.linear) > 0

    def test_no_reflection_for_random_pairs(self, rng):
        for _ in range(50):
            img = Landmarks.from_array(rng.uniform(0, 16, (2, 3)))
            psi = standard_transform(img, CANON, rng.uniform(0, 16, 3))
            assert np.linalg.det(psi.linear) > 0
            assert np.allclose(apply_point(psi, CANON.array()), img.array(), atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateLandmarksError):
            standard_transform(Landmarks((1, 1, 1), (1, 1, 1)), CANON)

    def test_missing_landmarks(self):
        with pytest.raises(MissingLandmarksError):
            align_to_standard(Volume(np.zeros((4, 4, 4))), CANON)

    def test_posed_phantom_is_undone(self):
        dims = (32, 32, 32)
        canon = canonical_landmarks(32)
        v, m, lms = gen_phantom(PhantomSpec(seed=4, ga_days=75, dims=dims))
        v = Volume(v.data, v.voxel_size, 75, lms)
        pose = similarity(1.08, rotation_matrix((1, 2, 0.5), 0.6), (1.5, -2, 0.5), (15.5,) * 3)
        pv, pm, plms, _ = apply_known_deformation(v, m, lms, pose)
        pv = Volume(pv.data, pv.voxel_size, 75, plms)
        roll = np.array([22.0, 12.0, 16.0])
        _, psi0 = align_to_standard(v, canon, roll)
        out, psi = align_to_standard(pv, canon, apply_point(pose, roll))
        resid = apply_point(psi, canon.array()) - plms.array()
        assert np.abs(resid).max() <= 1e-3
        assert out.landmarks == canon
        # with a roll reference that moves along, the pose factors out exactly
        assert np.allclose(psi.matrix, compose(pose, psi0).matrix, atol=1e-9)

    def test_roll_point_near_the_axis_is_ignored(self):
        img = Landmarks((8, 3, 8), (8, 13, 8))
        near = standard_transform(img, CANON, (8.2, 8, 8))
        assert np.allclose(near.matrix, standard_transform(img, CANON).matrix)

    def test_build_atlas_carries_seg(self):
        dims = (32, 32, 32)
        v, m, lms = gen_phantom(PhantomSpec(seed=2, ga_days=66, dims=dims))
        a = build_atlas("x", 3, Volume(v.data, v.voxel_size, 66, lms), m, canonical_landmarks(32))
        assert a.landmarks == canonical_landmarks(32) and a.seg.count() > 0
        # the intensity pose and the mask agree: the mask lies on the bright embryo
        assert a.volume.data[a.seg.data].mean() > 0.5 > a.volume.data[~a.seg.data].mean()
