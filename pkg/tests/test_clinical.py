import numpy as np
import pytest
from scipy import ndimage

from gdkvm.clinical import (DiskProfile, EfPair, MaskShapeError, ProfileModeError, agreement_stats,
                            biplane_profile, ejection_fraction, extract_disks, largest_component,
                            simpson_biplane, simpson_single, spheroid_volume, volume)
from gdkvm.tensor_core import make_rng


def disk_mask(h, r, cy, cx, a=None, b=None):
    yy, xx = np.mgrid[0:h, 0:h] + 0.0
    a = a or r
    b = b or r
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1


def semicircle(n, r):
    x = -r + (np.arange(n) + 0.5) * 2 * r / n
    return 2 * np.sqrt(r * r - x * x)


class TestExtractDisks:
    def test_rectangle(self):
        m = np.zeros((30, 30), bool)
        m[5:25, 10:16] = True
        p = extract_disks(m, 4)
        assert p.length == pytest.approx(20.0, abs=1e-9)
        np.testing.assert_allclose(p.diam_4c, 6.0, atol=0.05)

    def test_circle_profile(self):
        r = 20
        m = disk_mask(64, r, 31.5, 31.5)
        p = extract_disks(m, 50)
        s = -p.length / 2 + (np.arange(50) + 0.5) * p.length / 50
        expect = 2 * np.sqrt(np.maximum(r * r - s * s, 0))
        # near the poles a chord is almost tangent, so compare boundary points there
        inner = np.abs(s) <= 0.8 * r
        assert np.max(np.abs(p.diam_4c - expect)[inner]) <= 1.0
        assert np.max(np.abs(np.hypot(p.diam_4c / 2, s) - r)) <= 1.0

    def test_rotated_rectangle(self):
        m = np.zeros((80, 80), bool)
        m[20:60, 34:46] = True
        ref = extract_disks(m, 10)
        rot = ndimage.rotate(m.astype(float), 45, reshape=False, order=1) > 0.5
        p = extract_disks(rot, 10)
        assert abs(p.length - ref.length) <= 1.0
        assert np.max(np.abs(p.diam_4c[1:-1] - ref.diam_4c[1:-1])) <= 1.0

    def test_errors(self):
        with pytest.raises(MaskShapeError):
            extract_disks(np.zeros((5, 5)))
        two = np.zeros((10, 10), bool)
        two[1:3, 1:3] = two[6:8, 6:8] = True
        with pytest.raises(MaskShapeError):
            extract_disks(two)
        with pytest.raises(ValueError):
            extract_disks(two[:3, :3], 0)

    def test_largest_component(self):
        two = np.zeros((10, 10), bool)
        two[1:3, 1:3] = True
        two[5:9, 5:9] = True
        out = largest_component(two)
        assert out.sum() == 16 and out[6, 6] and not out[1, 1]


class TestSimpson:
    def test_cylinder_and_single_disk(self):
        assert simpson_single(DiskProfile(5.0, [2.0] * 7)) == pytest.approx(np.pi / 4 * 4 * 5)
        assert simpson_single(DiskProfile(3.0, [2.0])) == pytest.approx(3 * np.pi)

    def test_sphere_convergence(self):
        r = 10.0
        exact = 4 / 3 * np.pi * r ** 3
        errs = [abs(simpson_single(DiskProfile(2 * r, semicircle(n, r))) - exact) / exact for n in (10, 50, 200)]
        assert errs[0] > errs[1] > errs[2] and errs[2] < 0.01

    def test_ellipsoid(self):
        a, b, r = 3.0, 5.0, 8.0
        prof = semicircle(200, r) / (2 * r)
        v = simpson_biplane(DiskProfile(2 * r, 2 * a * prof, 2 * b * prof))
        assert v == pytest.approx(4 / 3 * np.pi * a * b * r, rel=0.01)

    def test_biplane_degenerate(self):
        d = make_rng(1).uniform(1, 5, 12)
        assert simpson_biplane(DiskProfile(9.0, d, d)) == pytest.approx(simpson_single(DiskProfile(9.0, d)))
        assert simpson_biplane(DiskProfile(1.0, [2.0], [4.0])) == pytest.approx(2 * np.pi)

    def test_monotone(self):
        rng = make_rng(2)
        d = rng.uniform(1, 5, 10)
        base = simpson_single(DiskProfile(7.0, d))
        for i in range(10):
            bigger = d.copy()
            bigger[i] += 0.5
            assert simpson_single(DiskProfile(7.0, bigger)) >= base

    def test_mode_errors(self):
        with pytest.raises(ProfileModeError):
            simpson_single(DiskProfile(1.0, [1.0], [1.0]))
        with pytest.raises(ProfileModeError):
            simpson_biplane(DiskProfile(1.0, [1.0]))
        with pytest.raises(ProfileModeError):
            simpson_biplane(DiskProfile(1.0, [1.0, 2.0], [1.0]))
        with pytest.raises(ValueError):
            DiskProfile(0.0, [1.0])
        with pytest.raises(ValueError):
            DiskProfile(1.0, [-1.0])

    def test_mask_sphere(self):
        m = disk_mask(96, 30, 47.5, 47.5)
        v = volume(extract_disks(m, 200))
        assert v == pytest.approx(4 / 3 * np.pi * 30 ** 3, rel=0.01)

    def test_biplane_from_masks(self):
        m4 = disk_mask(96, 0, 47.5, 47.5, a=30, b=12)
        m2 = disk_mask(96, 0, 47.5, 47.5, a=30, b=18)
        v = volume(biplane_profile(m4, m2, 100))
        assert v == pytest.approx(4 / 3 * np.pi * 30 * 12 * 18, rel=0.03)


class TestEf:
    def test_examples(self):
        assert ejection_fraction(100, 40) == 60.0
        assert ejection_fraction(55.5, 55.5) == 0.0
        assert EfPair(100, 40).ef == 60.0
        with pytest.raises(ValueError):
            ejection_fraction(0, 0)

    def test_scale_invariant(self):
        for c in (0.01, 3.0, 1e6):
            assert ejection_fraction(c * 120, c * 50) == pytest.approx(ejection_fraction(120, 50), rel=1e-12)

    def test_mask_scaling(self):
        ed = disk_mask(128, 0, 63.5, 63.5, a=24, b=14)
        es = disk_mask(128, 0, 63.5, 63.5, a=20, b=10)
        ed2 = disk_mask(128, 0, 63.5, 63.5, a=48, b=28)
        es2 = disk_mask(128, 0, 63.5, 63.5, a=40, b=20)
        ef1 = ejection_fraction(volume(extract_disks(ed)), volume(extract_disks(es)))
        ef2 = ejection_fraction(volume(extract_disks(ed2)), volume(extract_disks(es2)))
        assert ef1 == pytest.approx(ef2, abs=1.5)
        truth = ejection_fraction(spheroid_volume(24, 14), spheroid_volume(20, 10))
        assert ef2 == pytest.approx(truth, abs=1.5)


class TestAgreement:
    def test_identical(self):
        x = [50.0, 60.0, 55.0, 70.0]
        assert agreement_stats(x, x) == pytest.approx((1.0, 0.0, 0.0))

    def test_offset(self):
        x = np.array([50.0, 60.0, 55.0, 70.0])
        corr, bias, sd = agreement_stats(x + 5, x)
        assert corr == pytest.approx(1.0) and bias == pytest.approx(5.0) and sd == pytest.approx(0.0, abs=1e-12)

    def test_vs_direct_formula(self):
        rng = make_rng(3)
        t = rng.uniform(30, 70, 40)
        p = t + rng.normal(0, 4, 40)
        corr, bias, sd = agreement_stats(p, t)
        assert corr == pytest.approx(np.corrcoef(p, t)[0, 1], abs=1e-12)
        d = p - t
        assert bias == pytest.approx(sum(d) / 40)
        assert sd == pytest.approx(np.sqrt(sum((d - d.mean()) ** 2) / 39))

    def test_errors(self):
        with pytest.raises(ValueError):
            agreement_stats([1.0], [1.0])
        with pytest.raises(ZeroDivisionError):
            agreement_stats([1.0, 1.0], [2.0, 3.0])
