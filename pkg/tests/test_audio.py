"""Ring buffer, decimation, and log-mel front-end tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taplearn.audio import (
    LOWPASS_TAPS,
    MODEL_WINDOW_SAMPLES,
    AudioRing,
    AudioWindow,
    FeatureMatrix,
    MelConfig,
    MelExtractor,
    design_lowpass,
    downsample_16k_to_4k,
    log_mel,
    mel_filterbank,
    zscore,
)
from taplearn.errors import ConfigError, ValidationError


def naive_ring_oracle(chunks, capacity):
    """Concatenate everything, keep the last `capacity` samples, zero-pad."""
    stream = np.concatenate(chunks) if chunks else np.zeros(0)
    if len(stream) >= capacity:
        return stream[-capacity:]
    return np.concatenate([np.zeros(capacity - len(stream)), stream])


def naive_decimate_oracle(x, h):
    """Direct per-output-sample FIR + 4:1 decimation."""
    delay = (len(h) - 1) // 2
    n_out = len(x) // 4
    out = np.zeros(n_out)
    for n in range(n_out):
        acc = 0.0
        for k in range(len(h)):
            idx = 4 * n + delay - k
            if 0 <= idx < len(x):
                acc += h[k] * x[idx]
        out[n] = acc
    return out


class TestAudioRing:
    def test_empty_ring_reads_zeros(self):
        ring = AudioRing(16000)
        window = ring.read_window()
        assert len(window.samples) == MODEL_WINDOW_SAMPLES
        assert np.all(window.samples == 0.0)

    def test_one_second_of_silence_reads_all_zero(self):
        ring = AudioRing(16000)
        ring.push_frame(np.zeros(16000))
        assert np.all(ring.read_window().samples == 0.0)

    def test_fifo_semantics(self):
        ring = AudioRing(4000)
        a = np.full(15 * 4000, 0.25)
        b = np.full(4000, -0.5)
        ring.push_frame(a)
        ring.push_frame(b)
        out = ring.read_source_window()
        assert np.all(out[: 14 * 4000] == 0.25)
        assert np.all(out[14 * 4000 :] == -0.5)

    def test_chunked_pushes_match_concatenate_then_slice_oracle(self):
        rng = np.random.default_rng(7)
        ring = AudioRing(16000)
        chunk = int(0.2 * 16000)
        chunks = [rng.uniform(-1, 1, chunk) for _ in range(80)]  # 16 s total
        for c in chunks:
            ring.push_frame(c)
        expected = naive_ring_oracle(chunks, ring.capacity)
        np.testing.assert_array_equal(ring.read_source_window(), expected)

    def test_oversized_push_keeps_tail(self):
        ring = AudioRing(4000)
        big = np.arange(ring.capacity + 100, dtype=float) / 1e6
        ring.push_frame(big)
        np.testing.assert_array_equal(ring.read_source_window(), big[-ring.capacity :])

    def test_rejects_non_finite(self):
        ring = AudioRing(16000)
        with pytest.raises(ValidationError):
            ring.push_frame(np.array([0.0, np.nan]))

    def test_rejects_rate_mismatch(self):
        ring = AudioRing(16000)
        with pytest.raises(ValidationError):
            ring.push_frame(np.zeros(10), rate=8000)

    def test_rejects_unsupported_source_rate(self):
        with pytest.raises(ConfigError):
            AudioRing(44100)

    @given(
        st.lists(st.integers(min_value=1, max_value=5000), min_size=1, max_size=30),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_streaming_equals_bulk_write(self, sizes, seed):
        rng = np.random.default_rng(seed)
        stream = rng.uniform(-1, 1, sum(sizes))
        chunked = AudioRing(4000)
        pos = 0
        for s in sizes:
            chunked.push_frame(stream[pos : pos + s])
            pos += s
        bulk = AudioRing(4000)
        bulk.push_frame(stream)
        np.testing.assert_array_equal(
            chunked.read_source_window(), bulk.read_source_window()
        )


class TestDownsampling:
    def test_full_ring_window_length(self):
        ring = AudioRing(16000)
        ring.push_frame(np.random.default_rng(0).uniform(-1, 1, 16000 * 15))
        assert len(ring.read_window().samples) == 60_000

    def test_sine_keeps_dominant_peak(self):
        t = np.arange(15 * 16000) / 16000
        ring = AudioRing(16000)
        ring.push_frame(0.8 * np.sin(2 * np.pi * 500.0 * t))
        out = ring.read_window().samples
        spec = np.abs(np.fft.rfft(out))
        freqs = np.fft.rfftfreq(len(out), d=1 / 4000)
        assert abs(freqs[np.argmax(spec)] - 500.0) < 1.0

    def test_matches_naive_decimation_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, 4096)
        h = design_lowpass()
        np.testing.assert_allclose(
            downsample_16k_to_4k(x), naive_decimate_oracle(x, h), atol=1e-12
        )

    def test_lowpass_rejects_out_of_band(self):
        t = np.arange(16000) / 16000
        hi = np.sin(2 * np.pi * 3500.0 * t)  # above the 2 kHz Nyquist after 4:1
        out = downsample_16k_to_4k(hi)
        assert np.sqrt(np.mean(out**2)) < 0.02

    def test_taps_are_odd_and_dc_unity(self):
        h = design_lowpass()
        assert len(h) == LOWPASS_TAPS
        assert LOWPASS_TAPS % 2 == 1
        assert abs(h.sum() - 1.0) < 1e-12


class TestLogMel:
    def test_default_shape(self):
        window = AudioWindow(np.random.default_rng(0).uniform(-1, 1, 60_000))
        feats = log_mel(window)
        assert feats.values.shape == (64, 1498)
        assert feats.frame_rate == 100.0

    def test_zero_window_hits_log_floor(self):
        cfg = MelConfig()
        feats = log_mel(AudioWindow(np.zeros(60_000)), cfg)
        np.testing.assert_allclose(feats.values, np.log(cfg.log_floor))
        normalized = zscore(feats)
        assert np.all(normalized.values == 0.0)

    def test_white_noise_spreads_energy(self):
        window = AudioWindow(np.random.default_rng(11).uniform(-1, 1, 60_000))
        feats = log_mel(window)
        linear = np.exp(feats.values).sum(axis=1)
        assert linear.max() / linear.sum() < 0.5

    def test_every_filter_has_mass(self):
        fb = mel_filterbank(MelConfig())
        assert np.all(fb.sum(axis=1) > 0.0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            MelConfig(fmax=2500.0).validate()
        with pytest.raises(ConfigError):
            MelConfig(win_length=200, fft_size=128).validate()
        with pytest.raises(ConfigError):
            MelConfig(hop_length=200).validate()

    def test_frame_count_formula(self):
        cfg = MelConfig()
        assert cfg.n_frames(60_000) == 1 + (60_000 - 100) // 40 == 1498


class TestZscore:
    def test_constant_maps_to_zero(self):
        out = zscore(FeatureMatrix(np.ones((2, 2))))
        np.testing.assert_array_equal(out.values, np.zeros((2, 2)))

    def test_two_point_example(self):
        out = zscore(FeatureMatrix(np.array([[0.0, 2.0]])))
        np.testing.assert_allclose(out.values, [[-1.0, 1.0]])

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(8, 40))
        a = zscore(FeatureMatrix(v)).values
        b = zscore(FeatureMatrix(10.0 * v)).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_normalized_moments(self):
        rng = np.random.default_rng(6)
        out = zscore(FeatureMatrix(rng.normal(2.0, 3.0, size=(64, 100)))).values
        assert abs(out.mean()) < 1e-6
        assert abs(out.std() - 1.0) < 1e-6

    @given(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.floats(min_value=0.05, max_value=20.0),
    )
    @settings(max_examples=20, deadline=None)
    def test_amplitude_invariance_through_log_mel(self, seed, k):
        # Scaling audio by k shifts log energies by log(k^2), which the
        # z-score mean subtraction removes.
        rng = np.random.default_rng(seed)
        samples = 0.05 + 0.4 * rng.uniform(0.1, 1.0, 60_000) * np.sin(
            2 * np.pi * 180 * np.arange(60_000) / 4000
        )
        extractor = MelExtractor()
        base = zscore(extractor.log_mel(AudioWindow(samples))).values
        scaled = zscore(extractor.log_mel(AudioWindow(k * samples))).values
        np.testing.assert_allclose(scaled, base, atol=1e-6)
