import numpy as np
import numpy.testing as npt
import pytest

from lungcad.annotations import IRRELEVANT, NoduleAnnotation
from lungcad.sampling import (
    CANDIDATE_NEGATIVE, RANDOM_NEGATIVE, augment_affine, augment_flip,
    batch_to_network_input, crop_patch, make_balanced_batches, patch_box_mm,
    PatchSample, sample_negatives, sample_positives, sphere_box_overlap,
    sphere_in_box,
)
from lungcad.volume import Mask, Unit, Volume, WorldPoint

from conftest import make_volume


def lum_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(np.asarray(data, np.float32), spacing, origin, Unit.LUMINANCE)


def uniform_lum(shape, value=100.0, spacing=(1.0, 1.0, 1.0)):
    return lum_volume(np.full(shape, value, np.float32), spacing)


class TestCropPatch:
    def test_center_element(self):
        data = np.full((9, 9, 9), 7.0, np.float32)
        data[4, 4, 4] = 42.0
        v = lum_volume(data)
        patch = crop_patch(v, v.world_at(4, 4, 4), (4.0, 4.0, 4.0))
        assert patch.shape == (4, 4, 4)
        assert patch[2, 2, 2] == 42.0

    def test_outside_fill_value(self):
        v = uniform_lum((4, 4, 4), 99.0)
        patch = crop_patch(v, v.world_at(0, 0, 0), (4.0, 4.0, 4.0))
        # half the patch hangs off the volume; outside is water value 170
        assert patch[0, 0, 0] == 170.0
        assert patch[2, 2, 2] == 99.0

    def test_anisotropic_dims(self):
        v = uniform_lum((40, 40, 40), spacing=(1.0, 1.0, 2.0))
        patch = crop_patch(v, v.world_at(20, 20, 20), (32.0, 32.0, 32.0))
        assert patch.shape == (32, 32, 16)

    def test_fully_outside_rejected(self):
        v = uniform_lum((4, 4, 4))
        with pytest.raises(ValueError):
            crop_patch(v, WorldPoint(100.0, 100.0, 100.0), (4.0, 4.0, 4.0))


class TestFlips:
    def test_code_zero_identity(self, rng):
        p = rng.normal(size=(4, 5, 6))
        npt.assert_array_equal(augment_flip(p, 0), p)

    @pytest.mark.parametrize("code", range(8))
    def test_involution(self, code, rng):
        p = rng.normal(size=(4, 5, 6))
        npt.assert_array_equal(augment_flip(augment_flip(p, code), code), p)

    def test_eight_distinct_outputs(self, rng):
        p = rng.normal(size=(4, 4, 4))
        outs = [augment_flip(p, c).tobytes() for c in range(8)]
        assert len(set(outs)) == 8

    def test_group_closure_under_xor(self, rng):
        p = rng.normal(size=(3, 4, 5))
        for a in range(8):
            for b in range(8):
                lhs = augment_flip(augment_flip(p, a), b)
                npt.assert_array_equal(lhs, augment_flip(p, a ^ b))

    def test_bad_code(self, rng):
        with pytest.raises(ValueError):
            augment_flip(rng.normal(size=(2, 2, 2)), 8)


class TestAffine:
    def test_identity(self, rng):
        p = rng.uniform(0, 255, size=(8, 8, 4))
        npt.assert_allclose(augment_affine(p, 0.0, 1.0), p, atol=1e-9)

    def test_full_turn(self, rng):
        p = rng.uniform(0, 255, size=(8, 8, 4))
        npt.assert_allclose(augment_affine(p, 360.0, 1.0), p, atol=1e-6)

    def test_scale_half_doubles_ball(self):
        n = 33
        c = (n - 1) / 2
        xs = np.arange(n)
        dist2 = ((xs[:, None, None] - c) ** 2 + (xs[None, :, None] - c) ** 2
                 + (xs[None, None, :] - c) ** 2)
        ball = (dist2 <= 6.0 ** 2).astype(np.float64)
        out = augment_affine(ball, 0.0, 0.5, fill=0.0)
        # output samples input at center + 0.5*offset: ball radius ~doubles
        inner = dist2 <= 11.0 ** 2
        outer = dist2 >= 14.0 ** 2
        assert out[inner].min() > 0.5
        assert out[outer].max() < 0.5

    def test_range_preserved(self, rng):
        p = rng.uniform(0, 255, size=(10, 10, 6))
        out = augment_affine(p, 123.0, 0.9)
        assert out.min() >= 0.0 and out.max() <= 255.0

    def test_scale_out_of_bounds(self, rng):
        with pytest.raises(ValueError):
            augment_affine(rng.normal(size=(4, 4, 4)), 0.0, 0.4)


def ann(x, y, z, d, scan="s", relevance="relevant", malignancy=None):
    return NoduleAnnotation(scan, WorldPoint(x, y, z), d, "benign", malignancy, relevance)


class TestSamplePositives:
    def test_shift_bound_and_containment(self, rng):
        v = uniform_lum((40, 40, 40))
        a = ann(20.0, 20.0, 20.0, 6.0)
        for _ in range(200):
            (s,) = sample_positives(v, [a], rng, size_mm=(16.0, 16.0, 16.0))
            shift = s.center.as_array() - a.center.as_array()
            assert np.all(np.abs(shift) <= 4.0 + 1e-12)
            lo, hi = patch_box_mm(v, s.center, (16.0, 16.0, 16.0))
            assert sphere_in_box(a.center.as_array(), a.radius_mm, lo, hi)
            assert s.label == 1.0 and s.provenance == "positive"

    def test_large_nodule_accepts_only_tiny_shifts(self, rng):
        # feasible shift of the snapped patch box = half-extent - radius = 0.5 mm
        v = uniform_lum((64, 64, 64))
        a = ann(32.0, 32.0, 32.0, 31.0)
        offsets = []
        for _ in range(100):
            got = sample_positives(v, [a], rng, size_mm=(32.0, 32.0, 32.0))
            if got:
                lo, hi = patch_box_mm(v, got[0].center, (32.0, 32.0, 32.0))
                offsets.append(np.abs((lo + hi) / 2 - a.center.as_array()).max())
        assert offsets and max(offsets) <= 0.5 + 1e-9

    def test_oversized_nodule_skipped(self, rng, caplog):
        v = uniform_lum((64, 64, 64))
        a = ann(32.0, 32.0, 32.0, 40.0)
        assert sample_positives(v, [a], rng, size_mm=(32.0, 32.0, 32.0)) == []

    def test_regression_mode_centered_with_label(self, rng):
        v = uniform_lum((40, 40, 40))
        a = ann(20.0, 20.0, 20.0, 6.0, malignancy=3.5)
        (s,) = sample_positives(v, [a], rng, size_mm=(16.0, 16.0, 16.0), regression=True)
        npt.assert_allclose(s.center.as_array(), a.center.as_array())
        assert s.label == 3.5

    def test_irrelevant_skipped(self, rng):
        v = uniform_lum((40, 40, 40))
        a = ann(20.0, 20.0, 20.0, 6.0, relevance=IRRELEVANT)
        assert sample_positives(v, [a], rng) == []


class TestSampleNegatives:
    def make_scene(self):
        v = uniform_lum((40, 40, 40))
        bits = np.zeros((40, 40, 40), bool)
        bits[10:30, 10:30, 10:30] = True
        lung = Mask(bits, v.spacing_mm, v.origin_mm)
        return v, lung

    def test_counts_and_provenance(self, rng):
        v, lung = self.make_scene()
        cands = [v.world_at(15, 15, 15), v.world_at(25, 25, 25), v.world_at(20, 25, 15)]
        out = sample_negatives(v, lung, cands, [], rng, n_random=5, n_candidate=2,
                               size_mm=(8.0, 8.0, 8.0))
        provs = [s.provenance for s in out]
        assert provs.count(RANDOM_NEGATIVE) == 5
        assert provs.count(CANDIDATE_NEGATIVE) == 2

    def test_no_overlap_with_annotations(self, rng):
        v, lung = self.make_scene()
        a = ann(20.0, 20.0, 20.0, 10.0)
        out = sample_negatives(v, lung, [], [a], rng, n_random=10, n_candidate=0,
                               size_mm=(8.0, 8.0, 8.0))
        for s in out:
            lo, hi = patch_box_mm(v, s.center, (8.0, 8.0, 8.0))
            assert not sphere_box_overlap(a.center.as_array(), a.radius_mm, lo, hi)

    def test_candidate_on_nodule_rejected(self, rng):
        v, lung = self.make_scene()
        a = ann(20.0, 20.0, 20.0, 6.0)
        out = sample_negatives(v, lung, [a.center], [a], rng, n_random=0, n_candidate=5,
                               size_mm=(8.0, 8.0, 8.0))
        assert out == []

    def test_no_annotations_all_accepted(self, rng):
        v, lung = self.make_scene()
        out = sample_negatives(v, lung, [], [], rng, n_random=8, n_candidate=0,
                               size_mm=(8.0, 8.0, 8.0))
        assert len(out) == 8


class TestBalancedBatches:
    def make_pool(self, n, label):
        return [PatchSample(np.zeros((2, 2, 2), np.float32), label, "positive")
                for _ in range(n)]

    def test_even_split(self, rng):
        batches = make_balanced_batches(self.make_pool(30, 1.0), self.make_pool(50, 0.0),
                                        40, rng)
        batch = next(batches)
        labels = [s.label for s in batch]
        assert len(batch) == 40 and labels.count(1.0) == 20 and labels.count(0.0) == 20

    def test_minority_repeats(self, rng):
        pos = self.make_pool(3, 1.0)
        batches = make_balanced_batches(pos, self.make_pool(100, 0.0), 8, rng)
        batch = next(batches)
        assert [s.label for s in batch].count(1.0) == 4  # 3 positives must repeat

    def test_deterministic_under_seed(self):
        pos, neg = self.make_pool(5, 1.0), self.make_pool(9, 0.0)
        for s in pos + neg:
            s.patch.flags.writeable = True
        seq_a = [[id(s) for s in batch] for batch, _ in
                 zip(make_balanced_batches(pos, neg, 4, np.random.default_rng(3)), range(6))]
        seq_b = [[id(s) for s in batch] for batch, _ in
                 zip(make_balanced_batches(pos, neg, 4, np.random.default_rng(3)), range(6))]
        assert seq_a == seq_b

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            make_balanced_batches(self.make_pool(1, 1.0), self.make_pool(1, 0.0), 5, rng)
        with pytest.raises(ValueError):
            make_balanced_batches([], self.make_pool(1, 0.0), 4, rng)


def test_batch_standardization(rng):
    patches = [rng.uniform(0, 255, size=(4, 4, 2)).astype(np.float32) for _ in range(3)]
    x = batch_to_network_input(patches)
    assert x.shape == (3, 4, 4, 2, 1)
    assert x.min() >= 0.0 and x.max() <= 1.0
    npt.assert_allclose(x[0, :, :, :, 0], patches[0] / 255.0, rtol=1e-6)
