import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lungsound.errors import EmptyDevice, EmptyStack, MissingDeviceProfile, ShapeMismatch
from lungsound.features import SpectralConfig, stft_magnitude
from lungsound.speccorr import (
    PRESETS,
    DeviceSpectrumProfile,
    SpectrumCorrector,
    apply_correction,
    correction_coefficients,
    device_profile,
    mean_spectrum_gap,
    reference_spectrum,
    resolve_reference,
    segment_mean_spectrum,
)


class TestMeanSpectrum:
    def test_single_frame(self):
        v = np.arange(5.0)
        np.testing.assert_array_equal(segment_mean_spectrum(v[:, None]), v)

    def test_two_frames(self):
        v = np.arange(5.0)
        np.testing.assert_array_equal(segment_mean_spectrum(np.stack([np.zeros(5), v], axis=1)), v / 2)

    def test_loop_oracle(self):
        m = np.random.default_rng(0).random((257, 40))
        want = [sum(m[k, t] for t in range(40)) / 40 for k in range(257)]
        np.testing.assert_allclose(segment_mean_spectrum(m), want, rtol=0, atol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyStack):
            segment_mean_spectrum(np.zeros((5, 0)))


class TestProfiles:
    def test_identical(self):
        v = np.random.default_rng(1).random(9)
        np.testing.assert_allclose(device_profile([v, v, v], "d").mean_spectrum, v, rtol=1e-15)

    def test_pair(self):
        a, b = np.arange(4.0), np.ones(4)
        np.testing.assert_array_equal(device_profile([a, b], "d").mean_spectrum, (a + b) / 2)

    def test_loop_oracle(self):
        specs = list(np.random.default_rng(2).random((100, 33)))
        want = [sum(s[k] for s in specs) / 100 for k in range(33)]
        prof = device_profile(specs, "d")
        assert prof.n_segments == 100
        np.testing.assert_allclose(prof.mean_spectrum, want, rtol=0, atol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyDevice):
            device_profile([], "d")


class TestReference:
    def test_singleton(self):
        p = DeviceSpectrumProfile("k", np.arange(3.0), 7)
        np.testing.assert_array_equal(reference_spectrum([p], ["k"]), np.arange(3.0))

    def test_unweighted_pair(self):
        u, v = np.array([1.0, 2.0]), np.array([3.0, 6.0])
        profs = [DeviceSpectrumProfile("a", u, 1), DeviceSpectrumProfile("b", v, 1000)]
        np.testing.assert_array_equal(reference_spectrum(profs, ["a", "b"]), (u + v) / 2)

    def test_four_devices(self):
        rng = np.random.default_rng(3)
        profs = [DeviceSpectrumProfile(f"d{i}", rng.random(10), i + 1) for i in range(4)]
        want = [sum(p.mean_spectrum[k] for p in profs) / 4 for k in range(10)]
        np.testing.assert_allclose(reference_spectrum(profs, [p.device for p in profs]), want, atol=1e-15)

    def test_missing_device(self):
        with pytest.raises(MissingDeviceProfile):
            reference_spectrum([DeviceSpectrumProfile("a", np.ones(2), 1)], ["b"])


class TestCoefficients:
    prof = DeviceSpectrumProfile("d", np.array([1.0, 2.0, 0.0, 4.0]), 3)

    def test_equal(self):
        cc = correction_coefficients(self.prof.mean_spectrum, self.prof)
        np.testing.assert_array_equal(cc.coeffs, np.ones(4))

    def test_double(self):
        p = DeviceSpectrumProfile("d", np.array([1.0, 2.0, 4.0]), 3)
        np.testing.assert_array_equal(correction_coefficients(2 * p.mean_spectrum, p).coeffs, 2.0)

    def test_zero_bin_is_one(self):
        cc = correction_coefficients(np.array([2.0, 2.0, 5.0, 2.0]), self.prof)
        assert cc.coeffs[2] == 1.0

    def test_clip(self):
        p = DeviceSpectrumProfile("d", np.array([1.0, 1.0]), 1)
        cc = correction_coefficients(np.array([100.0, 0.001]), p)
        np.testing.assert_array_equal(cc.coeffs, [10.0, 0.1])
        assert cc.clipped_bins == 2
        assert correction_coefficients(np.array([100.0, 0.001]), p, clip=None).clipped_bins == 0

    def test_shape(self):
        with pytest.raises(ShapeMismatch):
            correction_coefficients(np.ones(3), self.prof)

    @given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_positive_where_mean_positive(self, values):
        mean = np.array(values)
        ref = np.random.default_rng(len(values)).random(len(values)) + 0.01
        for clip in ((0.1, 10.0), None):
            cc = correction_coefficients(ref, DeviceSpectrumProfile("d", mean, 1), clip=clip)
            assert np.all(np.isfinite(cc.coeffs))
            assert np.all(cc.coeffs[mean > 0] > 0)

    def test_subnormal_bin(self):
        cc = correction_coefficients(np.array([1.0, 1.0]), DeviceSpectrumProfile("d", np.array([1.0, 5e-324]), 1),
                                     clip=None)
        np.testing.assert_array_equal(cc.coeffs, [1.0, 1.0])


class TestApply:
    def test_identity(self):
        m = np.random.default_rng(4).random((5, 7))
        np.testing.assert_array_equal(apply_correction(m, np.ones(5)), m)

    def test_round_trip(self):
        m = np.random.default_rng(5).random((5, 7))
        np.testing.assert_allclose(apply_correction(apply_correction(m, np.full(5, 0.5)), np.full(5, 2.0)), m,
                                   rtol=0, atol=1e-15)

    def test_loop_oracle(self):
        rng = np.random.default_rng(6)
        m, c = rng.random((9, 11)), rng.random(9)
        want = np.array([[m[k, t] * c[k] for t in range(11)] for k in range(9)])
        np.testing.assert_allclose(apply_correction(m, c), want, rtol=0, atol=1e-12)


def _device_audio(rng, tilt, n=8):
    from scipy.signal import lfilter
    return [lfilter([1.0, tilt], [1.0], rng.standard_normal(4096)) for _ in range(n)]


class TestCorrector:
    cfg = SpectralConfig(16000, 512, 256, 50)

    def _fit(self, clips_by_device, preset):
        corr = SpectrumCorrector(preset)
        for dev, clips in clips_by_device.items():
            for x in clips:
                corr.accumulate(dev, stft_magnitude(x, self.cfg))
        corr.fit("train")
        return corr

    def test_presets_cover_five_variants(self):
        assert set(PRESETS) == {"No-Calib", "Calib-Dev1", "Calib-Dev2", "Calib-Dev1Dev2", "Calib-AllDev"}
        assert resolve_reference("Calib-AllDev", ["b", "a", "other"]) == ("a", "b")
        assert resolve_reference("No-Calib", ["a"]) is None
        assert not SpectrumCorrector("No-Calib").enabled
        assert SpectrumCorrector(["a"]).enabled

    def test_self_calibration_exact(self):
        rng = np.random.default_rng(7)
        data = {"AKGC417L": _device_audio(rng, 0.5), "Meditron": _device_audio(rng, -0.5)}
        corr = self._fit(data, "Calib-Dev1")
        ref = corr.profiles()[0].mean_spectrum
        for dev, clips in data.items():
            fixed = [segment_mean_spectrum(corr(stft_magnitude(x, self.cfg), dev)) for x in clips]
            np.testing.assert_allclose(np.mean(fixed, axis=0), ref, rtol=1e-12)
        assert corr.coefficients["Meditron"].provenance["fit_on"] == "train"

    def test_gap_shrinks(self):
        rng = np.random.default_rng(8)
        data = {"a": _device_audio(rng, 0.7), "b": _device_audio(rng, -0.7)}
        corr = self._fit(data, "Calib-AllDev")
        raw = {d: [segment_mean_spectrum(stft_magnitude(x, self.cfg)) for x in c] for d, c in data.items()}
        fixed = {d: [segment_mean_spectrum(corr(stft_magnitude(x, self.cfg), d)) for x in c]
                 for d, c in data.items()}
        assert mean_spectrum_gap(fixed["a"], fixed["b"]) < 1e-9 * mean_spectrum_gap(raw["a"], raw["b"]) + 1e-12

    def test_other_device_excluded(self):
        corr = SpectrumCorrector("Calib-AllDev")
        corr.accumulate("other", np.ones((3, 2)))
        corr.accumulate("a", np.ones((3, 2)))
        assert [p.device for p in corr.profiles()] == ["a"]

    def test_merge_equals_serial(self):
        rng = np.random.default_rng(9)
        mags = [(d, rng.random((6, 4))) for d in "abab"]
        serial, left, right = SpectrumCorrector(), SpectrumCorrector(), SpectrumCorrector()
        for i, (d, m) in enumerate(mags):
            serial.accumulate(d, m)
            (left if i < 2 else right).accumulate(d, m)
        left.merge(right)
        for p, q in zip(serial.profiles(), left.profiles()):
            np.testing.assert_allclose(p.mean_spectrum, q.mean_spectrum, rtol=1e-14)

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(10)
        corr = self._fit({"a": _device_audio(rng, 0.3, 2), "b": _device_audio(rng, -0.3, 2)}, "Calib-AllDev")
        corr.save(tmp_path / "c.json", "abc")
        assert json.loads((tmp_path / "c.json").read_text())["config_hash"] == "abc"
        back = SpectrumCorrector.load(tmp_path / "c.json")
        m = rng.random((257, 3))
        np.testing.assert_array_equal(back(m, "a"), corr(m, "a"))
        np.testing.assert_array_equal(back(m, "zzz"), m)
