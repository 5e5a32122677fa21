import dataclasses

import numpy as np
import pytest

from koopmanflow import spectral, synthbench
from koopmanflow.errors import (ConfigError, CorrelationUndefined,
                                DimensionError, FormatError)
from koopmanflow.synthbench import (GenSpec, ScriptedEnv, Trajectory,
                                    dilate_events, event_correlation,
                                    frame_diff, generate_dataset, load_dataset,
                                    naive_rfft_baseline, pearson,
                                    per_step_energy, save_dataset, to_arrays)


def spec_no_texture(**kw):
    return dataclasses.replace(GenSpec(seed=0), jitter_amp=0.0, **kw)


# ---------------------------------------------------------------------------
# generator


def test_generator_deterministic():
    a = to_arrays(generate_dataset(GenSpec(seed=5), 8))
    b = to_arrays(generate_dataset(GenSpec(seed=5), 8))
    for left, right in zip(a, b):
        np.testing.assert_array_equal(left, right)


def test_generator_seed_sensitivity():
    a = to_arrays(generate_dataset(GenSpec(seed=5), 4))[0]
    b = to_arrays(generate_dataset(GenSpec(seed=6), 4))[0]
    assert np.abs(a - b).max() > 1e-6


def test_generator_prefix_stability():
    # per-trajectory derived streams: the first k trajectories do not
    # depend on how many more are generated
    a = generate_dataset(GenSpec(seed=5), 4)
    b = generate_dataset(GenSpec(seed=5), 8)
    for x, y in zip(a, b[:4]):
        np.testing.assert_array_equal(x.actions, y.actions)


def test_events_disabled():
    trajs = generate_dataset(spec_no_texture(event_rate=0.0), 16)
    assert all(t.events.sum() == 0 for t in trajs)


def test_events_sparse_cap():
    trajs = generate_dataset(GenSpec(seed=2, event_rate=0.9), 32)
    cap = int(np.ceil(16 / 4))
    assert all(t.events.sum() <= cap for t in trajs)


def test_actions_finite_and_bounded():
    actions = to_arrays(generate_dataset(GenSpec(seed=0), 64))[0]
    assert np.isfinite(actions).all()
    assert np.sqrt((actions ** 2).mean()) < 3.0


def test_slow_band_dominates_without_transients():
    spec = spec_no_texture(transient_amp=0.0, noise_std=0.01,
                           n_mid_modes=0, mid_freqs=())
    actions = to_arrays(generate_dataset(spec, 32))[0]
    spectrum = spectral.amplitude_spectrum(actions)
    energy = spectrum ** 2
    slow = energy[: int(spec.T / 8) + 1].sum()
    assert slow / energy.sum() >= 0.9


def test_ground_truth_band_separability():
    # noiseless, kick-free data is exactly recoverable from the slow bins
    spec = spec_no_texture(transient_amp=0.0, noise_std=0.0,
                           n_mid_modes=0, mid_freqs=())
    actions = to_arrays(generate_dataset(spec, 8))[0]
    keep = np.zeros(9, dtype=bool)
    keep[: int(spec.T / 8) + 1] = True
    mask = spectral.FrequencyMask(keep=keep, alpha=0.5, source_spectrum=np.ones(9))
    from koopmanflow.gradcore import DiffTensor
    recovered = spectral.fourier_filter(DiffTensor(actions), mask).x_inv.data
    rel = np.linalg.norm(recovered - actions) / np.linalg.norm(actions)
    assert rel <= 1e-3


def test_texture_confined_to_upper_band():
    quiet = spec_no_texture(transient_amp=0.0, noise_std=0.0)
    loud = dataclasses.replace(quiet, jitter_amp=1.0)
    a_quiet = to_arrays(generate_dataset(quiet, 16))[0]
    a_loud = to_arrays(generate_dataset(loud, 16))[0]
    diff_spec = spectral.amplitude_spectrum(a_loud - a_quiet)
    assert diff_spec[: loud.jitter_min_bin].max() < 1e-9


def test_genspec_validation():
    with pytest.raises(ConfigError):
        GenSpec(slow_freqs=(1.0,))  # count mismatch
    with pytest.raises(ConfigError):
        GenSpec(slow_freqs=(1.0, 5.0))  # above the quarter band
    with pytest.raises(ConfigError):
        GenSpec(jitter_min_bin=1)


def test_context_determines_banded_component():
    # the context encodes amplitude and phase of every conditioned mode,
    # so the kick-free noiseless trajectory is recoverable from it alone
    spec = spec_no_texture(transient_amp=0.0, noise_std=0.0)
    trajs = generate_dataset(spec, 4)
    n_modes = spec.n_slow_modes + spec.n_mid_modes
    for t in trajs:
        amps_cos = t.context[: n_modes * spec.D].reshape(n_modes, spec.D)
        amps_sin = t.context[n_modes * spec.D :].reshape(n_modes, spec.D)
        tau = np.arange(spec.T)[:, None, None] / spec.T
        freqs = np.asarray(spec.slow_freqs + spec.mid_freqs)[None, :, None]
        angle = 2.0 * np.pi * freqs * tau
        rebuilt = (amps_sin[None] * np.cos(angle)
                   + amps_cos[None] * np.sin(angle)).sum(axis=1)
        np.testing.assert_allclose(rebuilt, t.actions, atol=1e-9)


# ---------------------------------------------------------------------------
# persistence


def test_dataset_roundtrip_bit_exact(tmp_path):
    trajs = generate_dataset(GenSpec(seed=3), 10)
    path = tmp_path / "data.kfd"
    save_dataset(path, trajs)
    loaded = load_dataset(path)
    assert len(loaded) == 10
    for a, b in zip(trajs, loaded):
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.events, b.events)
        np.testing.assert_array_equal(a.context, b.context)


def test_dataset_empty_roundtrip(tmp_path):
    path = tmp_path / "empty.kfd"
    save_dataset(path, [])
    assert load_dataset(path) == []


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "bad.kfd"
    path.write_bytes(b"NOTDATA" + b"\0" * 64)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_dataset_truncation(tmp_path):
    path = tmp_path / "cut.kfd"
    save_dataset(path, generate_dataset(GenSpec(seed=3), 2))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_dataset(path)


# ---------------------------------------------------------------------------
# correlation metrics. Oracle for the null: permutation of one series.


def test_pearson_self_correlation(rng):
    s = rng.normal(size=200)
    assert event_correlation(s, s, dilate=1) == pytest.approx(1.0)


def test_pearson_null_distribution(rng):
    a, b = rng.normal(size=1000), rng.normal(size=1000)
    assert abs(pearson(a, b)) < 0.1


def test_event_correlation_sign(rng):
    spikes = (rng.random(400) < 0.1).astype(float)
    assert event_correlation(3.0 * spikes + 0.01, spikes, dilate=1) > 0.9
    assert event_correlation(-3.0 * spikes, spikes, dilate=1) < 0.0


def test_correlation_undefined_on_constant():
    with pytest.raises(CorrelationUndefined):
        pearson(np.ones(10), np.arange(10.0))


def test_pearson_length_mismatch():
    with pytest.raises(DimensionError):
        pearson(np.ones(3), np.ones(4))


def test_dilate_events_spreads_forward():
    events = np.array([0, 1, 0, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(dilate_events(events, 3),
                                  [0, 1, 1, 1, 0, 0, 1, 1])


def test_frame_diff_length():
    assert frame_diff(np.arange(10.0)).shape == (9,)
    np.testing.assert_array_equal(frame_diff(np.array([1.0, 4.0, 2.0])), [3.0, 2.0])


def test_per_step_energy():
    x = np.array([[3.0, 4.0], [0.0, 1.0]])
    np.testing.assert_allclose(per_step_energy(x), [25.0, 1.0])


# ---------------------------------------------------------------------------
# naive frequency-cut baseline


def low_band_mask(T=16, keep_until=2):
    keep = np.zeros(T // 2 + 1, dtype=bool)
    keep[: keep_until + 1] = True
    return spectral.FrequencyMask(keep=keep, alpha=0.5,
                                  source_spectrum=np.ones(T // 2 + 1))


def test_naive_baseline_quiet_on_pure_slow():
    spec = spec_no_texture(transient_amp=0.0, noise_std=0.0,
                           n_mid_modes=0, mid_freqs=())
    actions = generate_dataset(spec, 1)[0].actions
    profile = naive_rfft_baseline(actions, low_band_mask())
    assert profile.max() < 1e-12


def test_naive_baseline_nonnegative(rng):
    profile = naive_rfft_baseline(rng.normal(size=(16, 2)), low_band_mask())
    assert (profile >= 0).all()


def test_naive_baseline_delta_leaks_across_steps():
    # a single spike's high-band energy smears over the whole window: the
    # blind cut cannot localize it. Oracle: direct masked inverse DFT.
    actions = np.zeros((16, 2))
    actions[5, 1] = 1.0
    profile = naive_rfft_baseline(actions, low_band_mask())
    spread = (profile > 1e-6).sum()
    assert spread >= 12
    spec_full = np.fft.rfft(actions[:, 1])
    spec_full[:3] = 0.0
    direct = np.abs(np.fft.irfft(spec_full, n=16)) ** 2
    np.testing.assert_allclose(profile, direct, atol=1e-10)


# ---------------------------------------------------------------------------
# scripted environment


def test_scripted_env_padding():
    env = ScriptedEnv(events=np.ones(5), context=np.zeros(2), episode_len=5,
                      window=8)
    events, context = env.observe()
    np.testing.assert_array_equal(events, [1, 1, 1, 1, 1, 0, 0, 0])


def test_scripted_env_apply_clamps():
    env = ScriptedEnv(events=np.zeros(10), context=np.zeros(2), episode_len=4,
                      window=4)
    assert env.apply(np.zeros((3, 2))) == 3
    assert env.apply(np.zeros((3, 2))) == 1
    assert env.done
