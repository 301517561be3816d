import numpy as np
import pytest

from meetsep.dereverb import WPE_STFT, WpeConfig, dereverberate, stack_delayed, wpe
from meetsep.scoring import si_sdr
from meetsep.simulate import SimConfig, simulate_session
from meetsep.spectral import MultiChannelWave, Spectrogram, StftConfig, stft


def _spec(data, cfg=StftConfig(512, 128)):
    return Spectrogram(data, cfg, 16000)


def test_stack_delayed_layout():
    y = np.arange(2 * 6 * 2).reshape(2, 6, 2).astype(complex)
    out = stack_delayed(y, taps=2, delay=1)
    assert out.shape == (2, 6, 4)
    np.testing.assert_array_equal(out[:, 0], 0)
    np.testing.assert_array_equal(out[:, 3, :2], y[:, 2])
    np.testing.assert_array_equal(out[:, 3, 2:], y[:, 1])


def test_recovers_synthetic_autoregressive_tail():
    # per bin, x_t = s_t + a * x_{t-delay}: WPE with that delay removes the tail
    rng = np.random.default_rng(0)
    bins, frames, ch, delay = 9, 400, 2, 3
    s = (rng.standard_normal((bins, frames, ch)) + 1j * rng.standard_normal((bins, frames, ch)))
    s *= rng.uniform(0.2, 2.0, (1, frames, 1))  # time-varying power
    x = s.copy()
    mix = np.array([[0.5, 0.1], [0.05, 0.4]])
    for t in range(delay, frames):
        x[:, t] += x[:, t - delay] @ mix.T
    spec = _spec(np.transpose(x, (2, 1, 0)), StftConfig(16, 4))
    out, _ = wpe(spec, WpeConfig(taps=1, delay=delay, iterations=3))
    z = np.transpose(out.data, (2, 1, 0))
    rel = np.sum(np.abs(z - s) ** 2) / np.sum(np.abs(s) ** 2)
    assert rel < 1e-2


def test_objective_non_increasing_and_shape():
    sess = simulate_session(SimConfig(speakers=1, channels=4, duration=4, reverb_t60=0.4,
                                      snr=40, seed=2))
    spec = stft(sess.mixture, WPE_STFT)
    out, obj = wpe(spec)
    assert out.data.shape == spec.data.shape
    assert np.all(np.diff(obj) <= 1e-6 * np.abs(obj[:-1]))


def test_anechoic_input_barely_changes():
    sess = simulate_session(SimConfig(speakers=2, channels=4, duration=6, snr=30, seed=1))
    spec = stft(sess.mixture, WPE_STFT)
    out, _ = wpe(spec)
    rel = abs(np.sum(np.abs(out.data) ** 2) / np.sum(np.abs(spec.data) ** 2) - 1)
    assert rel < 0.05


def test_direct_to_tail_gain_on_reverberant_input():
    sess = simulate_session(SimConfig(speakers=1, channels=4, duration=8, reverb_t60=0.4,
                                      snr=60, seed=3))
    y = dereverberate(sess.mixture)
    direct = sess.direct[0].samples
    before = np.mean([si_sdr(sess.mixture.samples[c], direct[c]) for c in range(4)])
    after = np.mean([si_sdr(y.samples[c], direct[c]) for c in range(4)])
    assert after - before >= 3.0


def test_scale_equivariance():
    rng = np.random.default_rng(5)
    x = MultiChannelWave(rng.standard_normal((2, 16000)), 16000)
    spec = stft(x, WPE_STFT)
    a, _ = wpe(spec)
    b, _ = wpe(spec.replace(spec.data * 7.5))
    np.testing.assert_allclose(b.data, 7.5 * a.data, rtol=1e-4, atol=1e-6 * np.abs(a.data).max())


def test_deterministic():
    rng = np.random.default_rng(6)
    spec = stft(MultiChannelWave(rng.standard_normal((2, 16000)), 16000), WPE_STFT)
    assert wpe(spec)[0].data.tobytes() == wpe(spec)[0].data.tobytes()


def test_too_few_frames():
    spec = _spec(np.ones((2, 10, 257), dtype=complex))
    with pytest.raises(ValueError, match="frames"):
        wpe(spec)


def test_silent_bins_pass_through():
    rng = np.random.default_rng(7)
    data = rng.standard_normal((2, 50, 257)) + 0j
    data[:, :, 100] = 0.0
    out, _ = wpe(_spec(data))
    assert np.all(np.isfinite(out.data))
    assert not np.any(out.data[:, :, 100])


def test_rank_deficient_bin_is_named():
    # identical channels at one bin make R singular; tiny epsilon cannot rescue it
    rng = np.random.default_rng(8)
    data = rng.standard_normal((2, 60, 257)) + 1j * rng.standard_normal((2, 60, 257))
    data[1, :, 42] = data[0, :, 42]
    with pytest.raises(np.linalg.LinAlgError, match="bin 42"):
        wpe(_spec(data), WpeConfig(epsilon=1e-300))


@pytest.mark.parametrize("kw", [dict(taps=0), dict(delay=0), dict(iterations=0),
                                dict(epsilon=0.0), dict(psd_context=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        WpeConfig(**kw)
