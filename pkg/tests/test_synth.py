"""Synthetic dataset generator: schedules, timing, planted effects."""

import numpy as np
import pytest

from posdec.core import KEYS, Recording, seeded_rng
from posdec.dsp import crop_trial
from posdec.errors import ConfigError, DataError
from posdec.spectral import Band, identify_mu_band, log_bandpower
from posdec import synth


def small_profile(n_subjects=2, trials_per_session=9, resting_seconds=5.0,
                  sample_rate=125.0):
    return synth.SynthProfile(
        "small", n_subjects=n_subjects, n_sessions=1,
        trials_per_session=trials_per_session, sample_rate=sample_rate,
        channels=("C3", "Cz", "C4"), resting_seconds=resting_seconds)


# ---------------------------------------------------------------------------
# schedules and hold durations
# ---------------------------------------------------------------------------

def test_schedule_balance_and_adjacency_at_scale():
    rng = seeded_rng(12, 0)
    sessions, per_session = 1112, 90
    labels = synth.generate_schedule(rng, sessions, per_session)
    assert labels.size == sessions * per_session
    assert labels.size >= 100_000
    assert labels.min() >= 1 and labels.max() <= 9
    # no back-to-back repeats anywhere, session boundaries included
    assert (labels[1:] != labels[:-1]).all()
    # every session holds every key exactly per_session / 9 times
    per_key = labels.reshape(sessions, per_session)
    for k in KEYS:
        assert ((per_key == k).sum(axis=1) == per_session // 9).all()


def test_schedule_is_seed_deterministic():
    first = synth.generate_schedule(seeded_rng(5, 1), 3, 18)
    again = synth.generate_schedule(seeded_rng(5, 1), 3, 18)
    other = synth.generate_schedule(seeded_rng(6, 1), 3, 18)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)


def test_schedule_validates_its_shape():
    rng = seeded_rng(0, 0)
    with pytest.raises(ConfigError):
        synth.generate_schedule(rng, 0, 18)
    with pytest.raises(ConfigError):
        synth.generate_schedule(rng, 1, 0)
    with pytest.raises(ConfigError):
        synth.generate_schedule(rng, 1, 10)  # not divisible by 9


def test_completability_rule_hand_cases():
    c = synth._completable
    assert c(np.array([2, 1]), -1)      # 0,1,0 works
    assert not c(np.array([2, 1]), 0)   # every valid order starts with key 0
    assert c(np.array([2, 1]), 1)
    assert c(np.array([1, 1]), -1)
    assert not c(np.array([5, 1]), -1)  # 5 > ceil(6/2)
    assert c(np.array([3, 3]), -1)
    assert c(np.array([0, 0]), -1)      # nothing left to place


def test_hold_durations_are_uniform_on_3_to_4_seconds():
    rng = seeded_rng(2, 0)
    draws = np.array([synth.generate_hold_duration(rng)
                      for _ in range(100_000)])
    assert draws.min() >= 3.0
    assert draws.max() <= 4.0
    assert abs(draws.mean() - 3.5) < 0.01
    assert abs(draws.std() - np.sqrt(1.0 / 12.0)) < 0.01


# ---------------------------------------------------------------------------
# effect and profile definitions
# ---------------------------------------------------------------------------

def test_default_class_gains_form_a_geometric_ladder():
    gains = synth.default_class_gains()
    assert len(gains) == 9
    assert gains[0] == 1.0
    ratios = [b / a for a, b in zip(gains, gains[1:])]
    assert np.allclose(ratios, 1.15, rtol=1e-12)


def test_effect_spec_collects_all_violations():
    bad = synth.EffectSpec(class_gains=(1.0, 2.0),
                           effect_window=(2.0, 1.0),
                           burst_amplitude=-1.0,
                           noise_amplitude=0.0)
    with pytest.raises(ConfigError) as err:
        bad.validate()
    text = str(err.value)
    assert "class_gains" in text
    assert "effect_window" in text
    assert "amplitudes" in text
    assert "noise_amplitude" in text
    assert len(err.value.violations) == 4


def test_profiles_cover_the_documented_scales():
    full = synth.get_profile("full")
    assert (full.n_subjects, full.n_sessions, full.trials_per_session) \
        == (20, 15, 90)
    assert full.trials_per_subject == 1350
    assert full.sample_rate == 1000.0 and full.channels is None
    desk = synth.get_profile("desk")
    assert desk.n_subjects == 4 and desk.trials_per_subject == 180
    assert desk.sample_rate == 500.0 and len(desk.channels) == 32
    tiny = synth.get_profile("tiny")
    assert tiny.n_subjects == 3 and tiny.trials_per_subject == 18
    assert len(tiny.channels) == 12
    with pytest.raises(ConfigError):
        synth.get_profile("galaxy")


# ---------------------------------------------------------------------------
# generated datasets
# ---------------------------------------------------------------------------

def test_dataset_is_bit_reproducible_per_subject():
    profile = small_profile()
    effect = synth.EffectSpec(resting_mu_freq=10.5)
    first = list(synth.generate_dataset(31, profile, effect))
    again = list(synth.generate_dataset(31, profile, effect))
    for (rec_a, ev_a, tr_a), (rec_b, ev_b, tr_b) in zip(first, again):
        assert np.array_equal(rec_a.samples, rec_b.samples)
        assert ev_a == ev_b
        assert tr_a == tr_b
    # subject streams are independent of how many subjects are generated
    wider = list(synth.generate_dataset(31, small_profile(n_subjects=3),
                                        effect))
    assert np.array_equal(first[0][0].samples, wider[0][0].samples)
    assert np.array_equal(first[1][0].samples, wider[1][0].samples)
    # the master seed matters
    reseeded = list(synth.generate_dataset(32, profile, effect))
    assert not np.array_equal(first[0][0].samples, reseeded[0][0].samples)


def test_subject_timeline_and_truth_bookkeeping():
    profile = small_profile()
    effect = synth.EffectSpec(resting_mu_freq=10.5)
    recording, events, truth = next(synth.generate_dataset(7, profile, effect))
    fs = profile.sample_rate
    assert recording.subject_id == "S01"
    assert list(recording.channel_names) == ["C3", "Cz", "C4"]
    assert len(events) == 9
    assert events[0].onset_sample == round(profile.resting_seconds * fs)
    gaps = np.diff([ev.onset_sample for ev in events]) / fs
    assert gaps.min() >= 3.0 + profile.inter_trial_gap - 1e-9
    assert gaps.max() <= 4.0 + profile.inter_trial_gap + 1e-9
    # the last hold fits inside the recording
    assert recording.n_samples >= events[-1].onset_sample + round(3.0 * fs)
    assert truth.mu_freq == 10.5
    assert truth.n_trials == 9
    assert truth.labels_per_key == {int(k): 1 for k in KEYS}
    assert truth.seed_stream == (7, 201, 0)
    assert all(ev.session == 1 for ev in events)


def test_resting_oscillation_lands_in_the_scanned_band():
    profile = small_profile(resting_seconds=20.0, sample_rate=250.0)
    effect = synth.EffectSpec(resting_mu_freq=10.5)
    recording, events, _ = next(synth.generate_dataset(3, profile, effect))
    resting = Recording(subject_id=recording.subject_id,
                        sample_rate=recording.sample_rate,
                        channel_names=recording.channel_names,
                        samples=recording.samples[:, :events[0].onset_sample])
    band = identify_mu_band(resting, ["C3", "C4"], min_seconds=10.0)
    assert band.low <= 10.5 <= band.high


def test_subjects_draw_their_own_resting_frequency():
    profile = small_profile(n_subjects=6)
    freqs = {truth.mu_freq
             for _, _, truth in synth.generate_dataset(19, profile)}
    assert freqs <= {8.5, 9.5, 10.5, 11.5, 12.5, 13.5}
    assert len(freqs) > 1


def test_planted_burst_scales_with_the_key_and_stays_in_its_window():
    profile = small_profile(n_subjects=1, trials_per_session=18,
                            sample_rate=250.0)
    effect = synth.EffectSpec(resting_mu_freq=10.5, noise_amplitude=0.05,
                              burst_amplitude=1.0)
    recording, events, _ = next(synth.generate_dataset(11, profile, effect))
    band = Band(20.0, 30.0)
    fs = recording.sample_rate
    c3 = recording.channel_names.index("C3")
    early, late = {}, {}
    for ev in events:
        trial = crop_trial(recording, ev.onset_sample)
        n = round(1.0 * fs)
        early.setdefault(ev.label, []).append(
            log_bandpower(trial[c3, :n], fs, band))
        late.setdefault(ev.label, []).append(
            log_bandpower(trial[c3, 2 * n:3 * n], fs, band))
    mean_early = {k: np.mean(v) for k, v in early.items()}
    # amplitude ladder: key 9 carries (1.15^8)^2 more burst power than key 1
    assert mean_early[9] - mean_early[1] > 1.5
    # the burst lives in the first second only
    assert mean_early[9] - np.mean(late[9]) > 2.0
    # other channels carry no class-dependent burst
    cz = recording.channel_names.index("Cz")
    cz_power = {ev.label: log_bandpower(
        crop_trial(recording, ev.onset_sample)[cz, :n], fs, band)
        for ev in events}
    assert abs(cz_power[9] - cz_power[1]) < 1.5


def test_effect_channel_must_be_in_the_montage():
    profile = small_profile()
    effect = synth.EffectSpec(effect_channel="F3", resting_mu_freq=10.5)
    with pytest.raises(DataError):
        list(synth.generate_dataset(0, profile, effect))


def test_effect_validation_happens_before_generation():
    profile = small_profile()
    with pytest.raises(ConfigError):
        list(synth.generate_dataset(0, profile,
                                    synth.EffectSpec(burst_amplitude=-2.0)))


def test_drop_channels_and_truncate_trials():
    profile = small_profile(n_subjects=3)
    out = list(synth.generate_dataset(
        5, profile, synth.EffectSpec(resting_mu_freq=10.5),
        drop_channels={1: ("Cz",)}, truncate_trials={2: 4}))
    assert list(out[0][0].channel_names) == ["C3", "Cz", "C4"]
    assert list(out[1][0].channel_names) == ["C3", "C4"]
    assert len(out[2][1]) == 5
    with pytest.raises(ConfigError):
        list(synth.generate_dataset(
            5, profile, drop_channels={0: ("F7",)}))
    with pytest.raises(ConfigError):
        list(synth.generate_dataset(
            5, profile, truncate_trials={0: 9}))


# ---------------------------------------------------------------------------
# sidecar files
# ---------------------------------------------------------------------------

def test_events_round_trip(tmp_path):
    events = [synth.TrialEvent(1000, 3, 1), synth.TrialEvent(2400, 7, 1),
              synth.TrialEvent(4100, 1, 2)]
    path = tmp_path / "ev.tsv"
    synth.write_events(events, path)
    assert synth.read_events(path) == events


def test_events_reader_rejects_malformed_files(tmp_path):
    path = tmp_path / "ev.tsv"
    path.write_text("wrong header\n")
    with pytest.raises(DataError):
        synth.read_events(path)
    path.write_text("onset_sample\tlabel\tsession\n100\t3\n")
    with pytest.raises(DataError):
        synth.read_events(path)
    path.write_text("onset_sample\tlabel\tsession\n100\tthree\t1\n")
    with pytest.raises(DataError):
        synth.read_events(path)
    path.write_text("onset_sample\tlabel\tsession\n100\t0\t1\n")
    with pytest.raises(DataError):
        synth.read_events(path)


def test_truth_round_trip(tmp_path):
    profile = small_profile()
    effect = synth.EffectSpec(resting_mu_freq=10.5)
    truths = [truth for _, _, truth in synth.generate_dataset(9, profile,
                                                              effect)]
    path = tmp_path / "truth.json"
    synth.write_truth(path, 9, profile, effect, truths)
    doc = synth.read_truth(path)
    assert doc["master_seed"] == 9
    assert doc["profile"]["name"] == "small"
    assert doc["profile"]["n_subjects"] == 2
    assert doc["effect"]["effect_band"] == [20.0, 30.0]
    assert doc["effect"]["effect_channel"] == "C3"
    assert len(doc["subjects"]) == 2
    first = doc["subjects"][0]
    assert first["subject_id"] == "S01"
    assert first["mu_freq"] == 10.5
    assert first["labels_per_key"] == {str(k): 1 for k in KEYS}
