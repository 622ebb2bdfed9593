import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfmia import signal
from rfmia.signal import (ADVERSARY, BPSK, PROVIDER, QPSK, ChannelLink, DeviceProfile,
                          FeatureVector, NoiseSpec)


def _device(mod=QPSK, phase=0.0, power=1.0, did=0):
    return DeviceProfile(did, phase, power, mod, "authorized")


def _link(gain=1.0, phase=0.0, did=0, rx=PROVIDER):
    return ChannelLink(did, rx, gain, phase)


# ---------------------------------------------------------------- modulation

def test_qpsk_gray_map():
    assert np.allclose(signal.modulate([0, 0, 0, 1, 1, 1, 1, 0], QPSK),
                       [math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4])


def test_bpsk_map():
    assert np.allclose(signal.modulate([0, 1, 1], BPSK), [0.0, math.pi, math.pi])


def test_qpsk_needs_even_bits():
    with pytest.raises(signal.InvalidInputError):
        signal.modulate([0, 1, 1], QPSK)


@pytest.mark.parametrize("bits", [[], [0, 2], [-1, 0]])
def test_modulate_rejects_bad_bits(bits):
    with pytest.raises(signal.InvalidInputError):
        signal.modulate(bits, BPSK)


def test_qpsk_phase_repeated_per_bit():
    phases = signal.per_bit_phases([0, 1, 1, 0], QPSK)
    assert np.allclose(phases, [3 * math.pi / 4] * 2 + [7 * math.pi / 4] * 2)


# ---------------------------------------------------------------- observe

def test_observe_noiseless_hand_value():
    dev = _device(BPSK, phase=0.5)
    link = _link(gain=0.7, phase=6.0)
    fv = signal.observe(dev, link, [0, 1], NoiseSpec(0.0, 0.0), np.random.default_rng(0))
    assert np.allclose(fv.phases, [(0.5 + 6.0) % (2 * math.pi), (math.pi + 6.5) % (2 * math.pi)])
    assert np.allclose(fv.powers, [0.7, 0.7])


def test_observe_noise_within_bounds():
    dev = _device(QPSK, phase=1.0)
    link = _link(gain=2.0, phase=0.3)
    rng = np.random.default_rng(1)
    bits = [0, 0] * 8
    for _ in range(200):
        fv = signal.observe(dev, link, bits, NoiseSpec(0.1, 0.1), rng)
        centre = math.pi / 4 + 1.3
        dphi = (fv.phases - centre + math.pi) % (2 * math.pi) - math.pi
        assert np.all(np.abs(dphi) <= 0.1 + 1e-12)
        assert np.all(np.abs(fv.powers - 2.0) <= 0.1 + 1e-12)


def test_observe_rejects_mismatched_link():
    with pytest.raises(signal.InvalidInputError):
        signal.observe(_device(did=0), _link(did=1), [0, 0], NoiseSpec(), np.random.default_rng(0))


def test_snr_to_received_power():
    assert signal.snr_to_received_power(10.0, NoiseSpec(0.1, 0.1)) == pytest.approx(1.0)
    assert signal.snr_to_received_power(0.0, NoiseSpec(0.1, 0.1)) == pytest.approx(0.1)


@pytest.mark.parametrize("bad", [
    dict(phase_shift=-0.1), dict(phase_shift=2 * math.pi), dict(transmit_power=0.0),
    dict(modulation="8PSK")])
def test_device_validation(bad):
    kw = dict(device_id=0, phase_shift=0.0, transmit_power=1.0, modulation=QPSK, role="x")
    kw.update(bad)
    with pytest.raises(signal.InvalidInputError):
        DeviceProfile(**kw)


def test_link_validation():
    with pytest.raises(signal.InvalidInputError):
        ChannelLink(0, "eve", 1.0, 0.0)
    with pytest.raises(signal.InvalidInputError):
        ChannelLink(0, PROVIDER, 0.0, 0.0)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_wrap_phase_range(x):
    w = float(signal.wrap_phase(x))
    assert 0.0 <= w < 2 * math.pi


# ---------------------------------------------------------------- scenarios

def test_setting1_layout(small_setting1):
    ds = small_setting1
    train = ds.view("target_train", PROVIDER)
    assert len(train) == 600 and train.y.sum() == 300
    members = ds.by_split("mia_member")
    assert len(members) == 200
    assert all("target_train" in o.splits and o.membership == signal.MEMBER for o in members)
    # stratified: as many class-1 as class-0 training samples
    assert sum(o.class_label for o in members) == 100
    nonmembers = ds.by_split("mia_nonmember")
    assert len(nonmembers) == 200
    assert all(o.membership == signal.NONMEMBER for o in nonmembers)
    # half authorized QPSK, half QPSK from "other" devices; never BPSK
    mods = [ds.devices[o.device_id].modulation for o in nonmembers]
    assert set(mods) == {QPSK}
    assert sum(o.class_label for o in nonmembers) == 100


def test_setting1_splits_disjoint(small_setting1):
    ds = small_setting1
    ids = {s: set(ds.view(s, PROVIDER).ids.tolist())
           for s in ("target_train", "target_test", "surrogate_train", "surrogate_test",
                     "mia_nonmember")}
    names = list(ids)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert not ids[a] & ids[b], (a, b)


def test_setting2_layout(small_setting2):
    ds = small_setting2
    a = ds.view("A", PROVIDER)
    assert len(a) == 400
    assert sorted(set(a.y.tolist())) == list(range(20))
    assert np.all(np.bincount(a.y) == 20)
    assert len(ds.by_split("A1")) == 200
    assert np.all(np.bincount(ds.view("A1", PROVIDER).y) == 10)
    assert set(ds.view("A1", PROVIDER).ids) <= set(a.ids)
    d = ds.view("D_nm", PROVIDER)
    assert set(ds.view("D1", PROVIDER).ids) <= set(d.ids)
    assert np.all(ds.view("C_nm", PROVIDER).y == -1)
    # devices 0-9 QPSK, 10-19 BPSK, SNR ladder 3..10 dB in each group
    assert all(ds.devices[k].modulation == QPSK for k in range(10))
    assert all(ds.devices[k].modulation == BPSK for k in range(10, 20))
    assert [ds.snr_map[k] for k in range(10)] == pytest.approx(list(np.linspace(3, 10, 10)))


def test_same_seed_same_bytes():
    cfg = signal.scenario_config("setting2", set_size=40, subset_size=20)
    assert signal.synth_scenario(cfg, 3).to_csv() == signal.synth_scenario(cfg, 3).to_csv()
    assert signal.synth_scenario(cfg, 3).to_csv() != signal.synth_scenario(cfg, 4).to_csv()


def test_csv_round_trip_exact(tmp_path, small_setting2):
    path = tmp_path / "d.csv"
    small_setting2.write_csv(path)
    back = signal.read_csv(path, small_setting2.config, small_setting2.seed)
    for split in ("A", "D_nm", "A1"):
        for obs in (PROVIDER, ADVERSARY):
            v1, v2 = small_setting2.view(split, obs), back.view(split, obs)
            assert np.array_equal(v1.X, v2.X)
            assert np.array_equal(v1.ids, v2.ids)
    assert back.to_csv() == small_setting2.to_csv()


def test_csv_header(small_setting2):
    header = small_setting2.to_csv().splitlines()[0].split(",")
    assert header[:2] == ["observation_id", "observer"]
    assert header[2:34] == [f"feature_{k}" for k in range(32)]
    assert header[34:37] == ["class_label", "membership", "device_id"]


def test_power_tracks_snr(small_setting1):
    ds = small_setting1
    for d in ds.devices:
        link = next(l for l in ds.links if l.tx_device_id == d.device_id and l.rx_id == PROVIDER)
        p_rx = signal.snr_to_received_power(ds.snr_map[d.device_id], ds.config.noise)
        assert 0.9 * p_rx - 1e-12 <= link.gain <= 1.1 * p_rx + 1e-12


def test_scenario_config_validation():
    with pytest.raises(signal.ConfigError):
        signal.scenario_config("nope")
    with pytest.raises(signal.ConfigError):
        signal.scenario_config("setting1-strong", mia_member=10_000)
    with pytest.raises(signal.ConfigError):
        signal.scenario_config("setting2", set_size=30)
    with pytest.raises(signal.ConfigError):
        signal.ScenarioConfig.from_dict({"name": "x", "setting": 1, "bogus": 1})


def test_scenario_config_dict_round_trip():
    cfg = signal.scenario_config("setting1-weak")
    assert signal.scenario_config(cfg.to_dict()) == cfg
    assert cfg.authorized_snr_db == 3.0 and cfg.other_snr_db == 10.0


# ---------------------------------------------------------------- perturbations

@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 2.0), st.integers(0, 2**32 - 1))
def test_perturbation_level_is_norm(level, seed):
    ranges = np.random.default_rng(seed).uniform(0.1, 3.0, 32)
    off = signal.perturbation_offsets(level, ranges, 5, np.random.default_rng(seed))
    assert np.allclose(np.linalg.norm(off / ranges, axis=1), level)


def test_perturbation_rejects_zero_level_and_range():
    with pytest.raises(signal.InvalidInputError):
        signal.perturbation_offsets(0.0, np.ones(4), 1, np.random.default_rng(0))
    with pytest.raises(signal.DegenerateRangeError):
        signal.perturbation_offsets(0.1, np.array([1.0, 0.0]), 1, np.random.default_rng(0))


def test_perturb_features_wraps_phase():
    fv = FeatureVector(np.full(4, 6.2), np.ones(4))
    out = signal.perturb_features(fv, 0.9, np.full(8, 2.0), 20, np.random.default_rng(0))
    assert len(out) == 20
    for v in out:
        assert np.all((v.phases >= 0) & (v.phases < 2 * math.pi))


def test_perturb_matrix_shape_and_wrap():
    X = np.hstack([np.full((3, 16), 0.01), np.ones((3, 16))])
    V = signal.perturb_matrix(X, 0.5, np.ones(32), 10, np.random.default_rng(0))
    assert V.shape == (3, 10, 32)
    assert np.all((V[..., :16] >= 0) & (V[..., :16] < 2 * math.pi))


def test_feature_ranges():
    X = np.array([[0.0, 1.0], [2.0, 5.0], [1.0, 3.0]])
    assert np.array_equal(signal.feature_ranges(X), [2.0, 4.0])
