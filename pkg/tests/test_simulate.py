import numpy as np
import pytest

from meetsep.sessionio import emit_rttm, parse_rttm
from meetsep.simulate import (SimConfig, ideal_ratio_mask, make_rng, measured_overlap_ratio,
                              simulate_session)
from meetsep.spectral import MultiChannelWave, Spectrogram, StftConfig, stft


def _session(**kw):
    base = dict(speakers=2, channels=2, duration=10, snr=20, seed=0)
    base.update(kw)
    return simulate_session(SimConfig(**base))


def test_same_seed_is_bitwise_identical():
    a, b = _session(overlap_ratio=0.2, reverb_t60=0.3), _session(overlap_ratio=0.2, reverb_t60=0.3)
    assert a.mixture.samples.tobytes() == b.mixture.samples.tobytes()
    assert a.annotation == b.annotation and a.words == b.words
    c = _session(overlap_ratio=0.2, reverb_t60=0.3, seed=1)
    assert c.mixture.samples.tobytes() != a.mixture.samples.tobytes()


def test_counter_based_generator():
    a = make_rng(5, 2).standard_normal(4)
    b = np.random.Generator(np.random.Philox(5).jumped(2)).standard_normal(4)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("t60", [0.0, 0.3])
def test_mixture_decomposition_exact(t60):
    sess = _session(reverb_t60=t60, overlap_ratio=0.2)
    total = sum(s.samples for s in sess.sources) + sess.noise.samples
    assert np.max(np.abs(total - sess.mixture.samples)) <= 1e-12


def test_no_overlap_rows_disjoint():
    sess = _session(speakers=3, duration=30)
    assert np.all(sess.activity.binarize().sum(axis=0) <= 1)
    assert measured_overlap_ratio(sess.activity) == 0


def test_requested_overlap_is_met():
    for seed in range(20):
        sess = simulate_session(SimConfig(speakers=3, channels=1, duration=30,
                                          overlap_ratio=0.3, seed=seed))
        assert abs(measured_overlap_ratio(sess.activity) - 0.3) <= 0.05
        # never more than two simultaneous talkers
        assert sess.activity.binarize().sum(axis=0).max() <= 2


def test_sessions_have_pauses():
    sess = _session(speakers=3, duration=30, overlap_ratio=0.2)
    silent = sess.activity.binarize().sum(axis=0) == 0
    # leading silence plus at least one pause between turns
    inner = silent[np.argmax(~silent):]
    assert inner.any()


def test_infeasible_overlap_raises():
    with pytest.raises(ValueError, match="overlap"):
        simulate_session(SimConfig(speakers=2, duration=10, overlap_ratio=0.95))
    with pytest.raises(ValueError):
        simulate_session(SimConfig(speakers=1, overlap_ratio=0.2))


def test_activity_consistent_with_source_energy():
    sess = _session(speakers=3, duration=20, overlap_ratio=0.2)
    for k, dry in enumerate(sess.dry):
        frames = dry.samples[0][:sess.activity.frames * 160].reshape(-1, 160)
        energy = np.mean(frames ** 2, axis=1)
        active = sess.activity.binarize()[k]
        assert np.all(energy[~active] == 0)
        # 10 ms ramps at turn edges are quiet but never silent
        assert np.all(energy[active] > 1e-8)


def test_realised_snr():
    sess = _session(snr=7.5, overlap_ratio=0.2)
    speech = sum(s.samples for s in sess.sources)
    snr = 10 * np.log10(np.mean(speech ** 2) / np.mean(sess.noise.samples ** 2))
    assert snr == pytest.approx(7.5, abs=1e-9)


def test_reverb_adds_a_tail():
    sess = _session(speakers=1, reverb_t60=0.4)
    img, direct, early = (sess.sources[0].samples[0], sess.direct[0].samples[0],
                          sess.early[0].samples[0])
    late = img - early
    assert np.sum(late ** 2) > 0.05 * np.sum(direct ** 2)
    anechoic = _session(speakers=1)
    np.testing.assert_array_equal(anechoic.sources[0].samples, anechoic.direct[0].samples)


def test_words_lie_inside_turns():
    sess = _session(speakers=3, duration=20, overlap_ratio=0.2)
    assert sess.words
    for w in sess.words:
        assert any(s.speaker == w.speaker and s.start <= w.start and w.end <= s.end
                   for s in sess.annotation.segments)


def test_annotation_rttm_round_trip():
    sess = _session(speakers=3, duration=20, overlap_ratio=0.2)
    assert parse_rttm(emit_rttm(sess.annotation)) == sess.annotation


def _spec(power_rows):
    data = np.sqrt(np.asarray(power_rows, dtype=float))[None].astype(complex)
    return Spectrogram(data, StftConfig(8, 2), 1000)


def test_irm_single_source_and_disjoint_support():
    s = _spec(np.abs(np.random.default_rng(0).standard_normal((6, 5))) + 1e-3)
    np.testing.assert_allclose(ideal_ratio_mask([s]).values[0], 1.0, atol=1e-6)
    a = np.zeros((6, 5))
    b = np.zeros((6, 5))
    a[:, :2] = 1.0
    b[:, 3:] = 2.0
    m = ideal_ratio_mask([_spec(a), _spec(b)]).values
    np.testing.assert_allclose(m[0], (a > 0).astype(float), atol=1e-9)
    np.testing.assert_allclose(m[1], (b > 0).astype(float), atol=1e-9)


def test_irm_sums_to_one_on_fixture():
    sess = _session(overlap_ratio=0.2)
    specs = [stft(s) for s in sess.sources]
    noise = stft(sess.noise)
    mask = ideal_ratio_mask(specs, noise)
    assert mask.class_ids == ("spk0", "spk1", "noise")
    total = sum(np.abs(s.data[0]) ** 2 for s in specs) + np.abs(noise.data[0]) ** 2
    sums = mask.values.sum(axis=0)
    assert np.all(sums <= 1 + 1e-6)
    np.testing.assert_allclose(sums[total > 1e-6], 1.0, atol=1e-3)


def test_irm_grid_mismatch():
    with pytest.raises(ValueError):
        ideal_ratio_mask([_spec(np.ones((6, 5))), _spec(np.ones((5, 5)))])


def test_config_validation():
    for kw in (dict(speakers=0), dict(channels=0), dict(duration=0), dict(overlap_ratio=1.0),
               dict(reverb_t60=-1)):
        with pytest.raises(ValueError):
            SimConfig(**kw)


def test_wave_type():
    assert isinstance(_session().mixture, MultiChannelWave)
