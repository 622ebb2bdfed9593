"""Phase/power fingerprint synthesis for the provider and adversary receivers.

Each transmission is observed twice: once over the device's link to the
service provider and once over its link to the eavesdropping adversary.  A
receiver records, for every transmitted bit, the received phase and power,
so ``n`` bits give ``2n`` features (phases first, then powers).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from rfmia.rng import stream

TWO_PI = 2.0 * math.pi

BPSK = "BPSK"
QPSK = "QPSK"
MODULATIONS = (BPSK, QPSK)

PROVIDER = "provider"
ADVERSARY = "adversary"
OBSERVERS = (PROVIDER, ADVERSARY)

MEMBER = "member"
NONMEMBER = "nonmember"
UNUSED = "unused"

# Gray-coded QPSK constellation phases keyed by bit pair.
QPSK_PHASES = {
    (0, 0): math.pi / 4,
    (0, 1): 3 * math.pi / 4,
    (1, 1): 5 * math.pi / 4,
    (1, 0): 7 * math.pi / 4,
}
BPSK_PHASES = {0: 0.0, 1: math.pi}


class InvalidInputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateRangeError(ValueError):
    pass


def wrap_phase(phase):
    """Wrap radians into ``[0, 2*pi)``."""
    wrapped = np.mod(phase, TWO_PI)
    # np.mod can round a tiny negative input up to exactly 2*pi
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    phase_shift: float
    transmit_power: float
    modulation: str
    role: str  # authorized | other | nonmember-generator

    def __post_init__(self):
        if not 0.0 <= self.phase_shift < TWO_PI:
            raise InvalidInputError(f"phase_shift {self.phase_shift} outside [0, 2pi)")
        if self.transmit_power <= 0:
            raise InvalidInputError("transmit_power must be positive")
        if self.modulation not in MODULATIONS:
            raise InvalidInputError(f"unknown modulation {self.modulation!r}")


@dataclass(frozen=True)
class ChannelLink:
    tx_device_id: int
    rx_id: str
    gain: float
    phase_offset: float

    def __post_init__(self):
        if self.rx_id not in OBSERVERS:
            raise InvalidInputError(f"unknown receiver {self.rx_id!r}")
        if self.gain <= 0:
            raise InvalidInputError("gain must be positive")
        if not 0.0 <= self.phase_offset < TWO_PI:
            raise InvalidInputError(f"phase_offset {self.phase_offset} outside [0, 2pi)")


@dataclass(frozen=True)
class NoiseSpec:
    """Half-widths of the uniform measurement noise on phase and power."""

    phase_bound: float = 0.1
    power_bound: float = 0.1

    def __post_init__(self):
        if self.phase_bound < 0 or self.power_bound < 0:
            raise InvalidInputError("noise bounds must be non-negative")


@dataclass(frozen=True)
class FeatureVector:
    phases: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        if len(self.phases) != len(self.powers):
            raise InvalidInputError("phases and powers differ in length")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.phases, self.powers])

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "FeatureVector":
        values = np.asarray(values, dtype=float)
        n = len(values) // 2
        return cls(values[:n].copy(), values[n:].copy())


@dataclass(frozen=True)
class PairedObservation:
    observation_id: int
    bits: np.ndarray
    provider_features: FeatureVector
    adversary_features: FeatureVector
    class_label: int
    membership: str
    device_id: int
    splits: tuple = ()

    def features(self, observer: str) -> FeatureVector:
        if observer == PROVIDER:
            return self.provider_features
        if observer == ADVERSARY:
            return self.adversary_features
        raise InvalidInputError(f"unknown observer {observer!r}")


def modulate(bits: Sequence[int], modulation: str) -> np.ndarray:
    """Map bits to constellation phases, one phase per symbol."""
    bits = [int(b) for b in bits]
    if not bits:
        raise InvalidInputError("empty bit array")
    if any(b not in (0, 1) for b in bits):
        raise InvalidInputError("bits must be 0 or 1")
    if modulation == BPSK:
        return np.array([BPSK_PHASES[b] for b in bits])
    if modulation == QPSK:
        if len(bits) % 2:
            raise InvalidInputError("QPSK needs an even number of bits")
        return np.array([QPSK_PHASES[(bits[i], bits[i + 1])] for i in range(0, len(bits), 2)])
    raise InvalidInputError(f"unknown modulation {modulation!r}")


def per_bit_phases(bits: Sequence[int], modulation: str) -> np.ndarray:
    """Constellation phase repeated so there is one entry per bit."""
    symbols = modulate(bits, modulation)
    return np.repeat(symbols, 2) if modulation == QPSK else symbols


def observe(device: DeviceProfile, link: ChannelLink, bits: Sequence[int],
            noise: NoiseSpec, rng: np.random.Generator) -> FeatureVector:
    if link.tx_device_id != device.device_id:
        raise InvalidInputError(
            f"link is for device {link.tx_device_id}, not {device.device_id}")
    base = per_bit_phases(bits, device.modulation)
    n = len(base)
    phase_noise = rng.uniform(-noise.phase_bound, noise.phase_bound, n)
    power_noise = rng.uniform(-noise.power_bound, noise.power_bound, n)
    phases = wrap_phase(base + device.phase_shift + link.phase_offset + phase_noise)
    powers = link.gain * device.transmit_power + power_noise
    return FeatureVector(phases, powers)


def snr_to_received_power(snr_db: float, noise: NoiseSpec) -> float:
    if noise.power_bound <= 0:
        raise InvalidInputError("power_bound must be positive to define SNR")
    return noise.power_bound * 10.0 ** (snr_db / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to regenerate a scenario from a seed.

    Setting 1 uses the ``n_*`` device counts and the per-split sample counts;
    setting 2 uses ``classes_per_modulation``, ``snr_range_db`` and the set
    sizes.  Unused fields are ignored.
    """

    name: str
    setting: int
    n_bits: int = 16
    phase_bound: float = 0.1
    power_bound: float = 0.1
    transmit_power: float = 1.0
    gain_jitter: float = 0.1
    adversary_snr_offset_db: float = 0.0
    # setting 1
    n_authorized: int = 3
    n_other_bpsk: int = 3
    n_other_qpsk: int = 3
    authorized_snr_db: float = 10.0
    other_snr_db: float = 3.0
    target_train: int = 8000
    target_test: int = 10000
    surrogate_train: int = 1000
    surrogate_test: int = 1000
    mia_member: int = 1000
    mia_nonmember: int = 1000
    # setting 2
    classes_per_modulation: int = 10
    snr_range_db: tuple = (3.0, 10.0)
    set_size: int = 2000
    subset_size: int = 1000
    extra_snr_db: float | None = None

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.phase_bound, self.power_bound)

    @property
    def n_classes(self) -> int:
        return 2 if self.setting == 1 else 2 * self.classes_per_modulation

    def validate(self) -> None:
        if self.setting not in (1, 2):
            raise ConfigError(f"unknown setting {self.setting}")
        if self.n_bits < 2 or self.n_bits % 2:
            raise ConfigError("n_bits must be a positive even number")
        if self.setting == 1:
            if min(self.n_authorized, self.n_other_bpsk, self.n_other_qpsk) < 1:
                raise ConfigError("setting 1 needs at least one device per group")
            if self.mia_member > self.target_train:
                raise ConfigError("MIA member subset larger than the training set")
            counts = (self.target_train, self.target_test, self.surrogate_train,
                      self.surrogate_test, self.mia_member, self.mia_nonmember)
            if any(c < 2 or c % 2 for c in counts):
                raise ConfigError("setting 1 split sizes must be positive and even")
        else:
            k = self.n_classes
            if self.classes_per_modulation < 1:
                raise ConfigError("need at least one device per modulation")
            if self.set_size < k or self.set_size % k:
                raise ConfigError(f"set_size {self.set_size} cannot cover {k} classes evenly")
            if self.subset_size > self.set_size or self.subset_size % k:
                raise ConfigError("subset_size must divide evenly across classes and fit in a set")
            if self.set_size % 2:
                raise ConfigError("set_size must be even")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "snr_range_db" in d:
            d["snr_range_db"] = tuple(d["snr_range_db"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "setting1-strong": ScenarioConfig("setting1-strong", 1),
    "setting1-weak": ScenarioConfig("setting1-weak", 1, authorized_snr_db=3.0, other_snr_db=10.0),
    "setting2": ScenarioConfig("setting2", 2, gain_jitter=0.05),
}


def scenario_config(name_or_dict, **overrides) -> ScenarioConfig:
    if isinstance(name_or_dict, ScenarioConfig):
        cfg = name_or_dict
    elif isinstance(name_or_dict, str):
        if name_or_dict not in PRESETS:
            raise ConfigError(f"unknown scenario {name_or_dict!r}")
        cfg = PRESETS[name_or_dict]
    else:
        d = dict(name_or_dict)
        if "snr_range_db" in d:
            d["snr_range_db"] = tuple(d["snr_range_db"])
        base = PRESETS.get(d.get("name", ""))
        cfg = replace(base, **{k: v for k, v in d.items() if k != "name"}) if base \
            else ScenarioConfig.from_dict(d)
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class FeatureView:
    """Stacked features of one receiver for a group of observations."""

    observer: str
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    membership: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class Dataset:
    observations: list
    snr_map: dict
    seed: int
    config: ScenarioConfig
    devices: list = field(default_factory=list)
    links: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {o.observation_id: i for i, o in enumerate(self.observations)}

    def __len__(self):
        return len(self.observations)

    def by_split(self, split: str) -> list:
        return [o for o in self.observations if split in o.splits]

    def get(self, observation_id: int) -> PairedObservation:
        return self.observations[self._index[observation_id]]

    def view(self, split: str, observer: str) -> FeatureView:
        return make_view(self.by_split(split), observer)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n_feat = 2 * self.config.n_bits
        writer.writerow(["observation_id", "observer"]
                        + [f"feature_{k}" for k in range(n_feat)]
                        + ["class_label", "membership", "device_id", "splits"])
        for o in self.observations:
            for observer in OBSERVERS:
                values = o.features(observer).flat()
                writer.writerow([o.observation_id, observer] + [repr(float(v)) for v in values]
                                + [o.class_label, o.membership, o.device_id, "|".join(o.splits)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def make_view(observations: Sequence[PairedObservation], observer: str) -> FeatureView:
    if not observations:
        raise InvalidInputError("no observations in view")
    X = np.stack([o.features(observer).flat() for o in observations])
    y = np.array([o.class_label for o in observations], dtype=int)
    ids = np.array([o.observation_id for o in observations], dtype=int)
    membership = np.array([o.membership for o in observations])
    return FeatureView(observer, X, y, ids, membership)


def read_csv(path, config: ScenarioConfig, seed: int) -> Dataset:
    """Load a dataset written by :meth:`Dataset.write_csv`.

    Bits are not persisted, so loaded observations carry an empty bit array.
    """
    rows: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            oid = int(row["observation_id"])
            feats = [float(v) for k, v in row.items() if k.startswith("feature_")]
            entry = rows.setdefault(oid, {"meta": row})
            entry[row["observer"]] = FeatureVector.from_flat(feats)
    observations = []
    for oid, entry in rows.items():
        meta = entry["meta"]
        observations.append(PairedObservation(
            observation_id=oid, bits=np.zeros(0, dtype=int),
            provider_features=entry[PROVIDER], adversary_features=entry[ADVERSARY],
            class_label=int(meta["class_label"]), membership=meta["membership"],
            device_id=int(meta["device_id"]),
            splits=tuple(s for s in meta["splits"].split("|") if s)))
    return Dataset(observations, snr_map={}, seed=seed, config=config)


# --------------------------------------------------------------------------
# scenario synthesis


def _draw_links(device: DeviceProfile, snr_db: float, cfg: ScenarioConfig,
                rng: np.random.Generator) -> list:
    links = []
    for rx in OBSERVERS:
        snr = snr_db + (cfg.adversary_snr_offset_db if rx == ADVERSARY else 0.0)
        p_rx = snr_to_received_power(snr, cfg.noise)
        u = rng.uniform(1.0 - cfg.gain_jitter, 1.0 + cfg.gain_jitter)
        gain = p_rx * u / device.transmit_power
        links.append(ChannelLink(device.device_id, rx, gain, float(wrap_phase(rng.uniform(0, TWO_PI)))))
    return links


class _Emitter:
    """Generates paired observations with sequential ids."""

    def __init__(self, devices, links, noise, n_bits, rng):
        self.devices = {d.device_id: d for d in devices}
        self.links = {(l.tx_device_id, l.rx_id): l for l in links}
        self.noise = noise
        self.n_bits = n_bits
        self.rng = rng
        self.observations = []

    def emit(self, device_id, class_label, membership, splits):
        device = self.devices[device_id]
        bits = self.rng.integers(0, 2, self.n_bits)
        prov = observe(device, self.links[device_id, PROVIDER], bits, self.noise, self.rng)
        adv = observe(device, self.links[device_id, ADVERSARY], bits, self.noise, self.rng)
        obs = PairedObservation(len(self.observations), bits, prov, adv, int(class_label),
                                membership, device_id, tuple(splits))
        self.observations.append(obs)
        return obs

    def emit_many(self, device_ids: Iterable[int], labels: Iterable[int], membership, splits):
        return [self.emit(d, c, membership, splits) for d, c in zip(device_ids, labels)]


def _round_robin(device_ids: Sequence[int], count: int) -> list:
    return [device_ids[k % len(device_ids)] for k in range(count)]


def _setting1(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple:
    devices, links, snr_of = [], [], {}
    groups = [("authorized", QPSK, cfg.n_authorized, cfg.authorized_snr_db),
              ("other", BPSK, cfg.n_other_bpsk, cfg.other_snr_db),
              ("other", QPSK, cfg.n_other_qpsk, cfg.other_snr_db)]
    ids_by_group = []
    for role, mod, count, snr in groups:
        ids = []
        for _ in range(count):
            d = DeviceProfile(len(devices), float(wrap_phase(rng.uniform(0, TWO_PI))),
                              cfg.transmit_power, mod, role)
            devices.append(d)
            links.extend(_draw_links(d, snr, cfg, rng))
            snr_of[d.device_id] = snr
            ids.append(d.device_id)
        ids_by_group.append(ids)
    auth, other_bpsk, other_qpsk = ids_by_group

    em = _Emitter(devices, links, cfg.noise, cfg.n_bits, rng)

    def balanced(count, membership, splits):
        half = count // 2
        em.emit_many(_round_robin(auth, half), [1] * half, membership, splits)
        return em.emit_many(_round_robin(other_bpsk, half), [0] * half, membership, splits)

    balanced(cfg.target_train, MEMBER, ["target_train"])
    train = list(em.observations)
    balanced(cfg.target_test, UNUSED, ["target_test"])
    balanced(cfg.surrogate_train, UNUSED, ["surrogate_train"])
    balanced(cfg.surrogate_test, UNUSED, ["surrogate_test"])

    # representative member subset, stratified by class
    half = cfg.mia_member // 2
    pos = [o.observation_id for o in train if o.class_label == 1]
    neg = [o.observation_id for o in train if o.class_label == 0]
    chosen = set(rng.choice(pos, half, replace=False).tolist()) | \
        set(rng.choice(neg, half, replace=False).tolist())
    for k, o in enumerate(em.observations):
        if o.observation_id in chosen:
            em.observations[k] = replace(o, splits=o.splits + ("mia_member",))

    half = cfg.mia_nonmember // 2
    em.emit_many(_round_robin(auth, half), [1] * half, NONMEMBER, ["mia_nonmember"])
    em.emit_many(_round_robin(other_qpsk, half), [0] * half, NONMEMBER, ["mia_nonmember"])
    return devices, links, snr_of, em.observations


def _setting2(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple:
    devices, links, snr_of = [], [], {}
    k = cfg.classes_per_modulation
    snrs = np.linspace(cfg.snr_range_db[0], cfg.snr_range_db[1], k)
    for role, mod in (("authorized", QPSK), ("other", BPSK)):
        for j in range(k):
            d = DeviceProfile(len(devices), float(wrap_phase(rng.uniform(0, TWO_PI))),
                              cfg.transmit_power, mod, role)
            devices.append(d)
            links.extend(_draw_links(d, float(snrs[j]), cfg, rng))
            snr_of[d.device_id] = float(snrs[j])
    n_classes = len(devices)

    # one extra radio at a new location emitting both modulations
    extra_phase = float(wrap_phase(rng.uniform(0, TWO_PI)))
    extra_snr = cfg.extra_snr_db if cfg.extra_snr_db is not None \
        else float(rng.uniform(*cfg.snr_range_db))
    extra = []
    template = None
    for mod in (QPSK, BPSK):
        d = DeviceProfile(len(devices), extra_phase, cfg.transmit_power, mod, "nonmember-generator")
        if template is None:
            template = _draw_links(d, extra_snr, cfg, rng)
        links.extend(replace(l, tx_device_id=d.device_id) for l in template)
        devices.append(d)
        snr_of[d.device_id] = extra_snr
        extra.append(d.device_id)

    em = _Emitter(devices, links, cfg.noise, cfg.n_bits, rng)
    classes = list(range(n_classes))

    def per_class(count, membership, splits):
        return em.emit_many(_round_robin(classes, count), _round_robin(classes, count),
                            membership, splits)

    def from_extra(count, splits):
        return em.emit_many(_round_robin(extra, count), [-1] * count, NONMEMBER, splits)

    set_a = per_class(cfg.set_size, MEMBER, ["A"])
    per_class(cfg.set_size, UNUSED, ["B"])
    from_extra(cfg.set_size, ["C_nm"])
    set_d = from_extra(cfg.set_size, ["D_nm"])

    per = cfg.subset_size // n_classes
    a1 = set()
    for c in classes:
        ids = [o.observation_id for o in set_a if o.class_label == c]
        a1 |= set(rng.choice(ids, per, replace=False).tolist())
    d1 = set()
    for dev in extra:
        ids = [o.observation_id for o in set_d if o.device_id == dev]
        d1 |= set(rng.choice(ids, cfg.subset_size // len(extra), replace=False).tolist())
    for i, o in enumerate(em.observations):
        if o.observation_id in a1:
            em.observations[i] = replace(o, splits=o.splits + ("A1",))
        elif o.observation_id in d1:
            em.observations[i] = replace(o, splits=o.splits + ("D1",))
    return devices, links, snr_of, em.observations


def synth_scenario(config, seed: int) -> Dataset:
    """Draw devices, static links and every labelled observation for a scenario."""
    cfg = scenario_config(config)
    rng = stream(seed, f"synth:{cfg.name}")
    builder = _setting1 if cfg.setting == 1 else _setting2
    devices, links, snr_of, observations = builder(cfg, rng)
    return Dataset(observations, snr_map=snr_of, seed=int(seed), config=cfg,
                   devices=devices, links=links)


def load_scenario_file(path) -> ScenarioConfig:
    return scenario_config(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# noisy variations


def feature_ranges(X: np.ndarray) -> np.ndarray:
    """Per-feature max - min over a pool of flattened feature vectors."""
    X = np.atleast_2d(X)
    return X.max(axis=0) - X.min(axis=0)


def perturbation_offsets(total_level: float, ranges: np.ndarray, count: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Random feature changes whose relative-level vector has norm ``total_level``.

    Row ``k`` satisfies ``|| offsets[k] / ranges ||_2 == total_level``.
    """
    ranges = np.asarray(ranges, dtype=float)
    if not total_level > 0:
        raise InvalidInputError("total_level must be positive; level 0 is the original sample")
    if np.any(ranges <= 0):
        raise DegenerateRangeError("every feature needs a strictly positive range")
    direction = rng.standard_normal((count, len(ranges)))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return total_level * direction * ranges


def perturb_features(original: FeatureVector, total_level: float, ranges: np.ndarray,
                     count: int, rng: np.random.Generator) -> list:
    flat = original.flat()
    if len(ranges) != len(flat):
        raise InvalidInputError("ranges length does not match feature length")
    offsets = perturbation_offsets(total_level, ranges, count, rng)
    n = len(original.phases)
    out = []
    for delta in offsets:
        v = flat + delta
        out.append(FeatureVector(wrap_phase(v[:n]), v[n:]))
    return out


def perturb_matrix(X: np.ndarray, total_level: float, ranges: np.ndarray, count: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`perturb_features` over flattened rows.

    Returns an array of shape ``(len(X), count, n_features)``.
    """
    X = np.atleast_2d(X)
    n = X.shape[1] // 2
    offsets = np.stack([perturbation_offsets(total_level, ranges, count, rng) for _ in X])
    V = X[:, None, :] + offsets
    V[..., :n] = wrap_phase(V[..., :n])
    return V
