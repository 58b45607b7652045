"""Ground-truth drop scenarios turned into ADC streams and triggered records."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import circuit
from .device import DeviceConfig
from .firmware import run_acquisition
from .optics import shaded_fraction_array
from .records import WaveformRecord

SPECIES = ("Sz", "Rd", "Tc", "Os", "Cp")
REFERENCE_SEQ_BASE = 900_000


class Scenario(str, enum.Enum):
    NORMAL_SINGLE = "NormalSingle"
    SPAN_TWO_CYCLES = "SpanTwoCycles"
    DEBRIS_NO_PEST = "DebrisNoPest"
    CONSECUTIVE_DOUBLE = "ConsecutiveDouble"
    FLUCTUATION_NO_PEST = "FluctuationNoPest"


SCENARIO_COUNT = {
    Scenario.NORMAL_SINGLE: 1,
    Scenario.SPAN_TWO_CYCLES: 1,
    Scenario.DEBRIS_NO_PEST: 0,
    Scenario.CONSECUTIVE_DOUBLE: 2,
    Scenario.FLUCTUATION_NO_PEST: 0,
}


@dataclass(frozen=True)
class SpeciesProfile:
    name: str
    body_length: float
    occluder_ratio: float = 0.35
    fall_speed_mean: float = 1.0
    fall_speed_sd: float = 0.2
    tumble_amplitude: float = 0.05

    @property
    def lateral_radius(self) -> float:
        return self.body_length * self.occluder_ratio / 2

    @property
    def vertical_radius(self) -> float:
        # pests drop lengthwise through the beam plane
        return self.body_length / 2


PROFILES = {
    "Sz": SpeciesProfile("Sz", 3.6),
    "Rd": SpeciesProfile("Rd", 3.0),
    "Tc": SpeciesProfile("Tc", 3.5),
    "Os": SpeciesProfile("Os", 2.7),
    "Cp": SpeciesProfile("Cp", 1.6),
    "BlackSphere": SpeciesProfile("BlackSphere", 3.5, occluder_ratio=1.0, tumble_amplitude=0.0),
    "Debris": SpeciesProfile("Debris", 5.0, occluder_ratio=0.8, tumble_amplitude=0.2),
}

DEFAULT_SPECIES_MIX = {"Sz": 0.23, "Rd": 0.21, "Tc": 0.24, "Os": 0.24, "Cp": 0.08}
# zero : one : two pest waveforms in the collected data are 140 : 12389 : 103
_N0, _N1, _N2 = 140, 12389, 103
_TOTAL = _N0 + _N1 + _N2
DEFAULT_SCENARIO_MIX = {
    "NormalSingle": (_N1 / _TOTAL) - 0.01,
    "SpanTwoCycles": 0.01,
    "DebrisNoPest": _N0 / _TOTAL * 0.55,
    "FluctuationNoPest": _N0 / _TOTAL * 0.45,
    "ConsecutiveDouble": _N2 / _TOTAL,
}


@dataclass(frozen=True)
class DropEvent:
    profile: SpeciesProfile
    entry_t: float
    entry_r: float
    speed: float
    scenario: Scenario = Scenario.NORMAL_SINGLE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.speed <= 0:
            raise ValueError("speed must be positive")


@dataclass(frozen=True)
class CampaignConfig:
    n_events: int = 200
    species_mix: dict = field(default_factory=lambda: dict(DEFAULT_SPECIES_MIX))
    scenario_mix: dict = field(default_factory=lambda: dict(DEFAULT_SCENARIO_MIX))
    n_devices: int = 3
    seed: int = 0
    event_spacing: float = 5.0
    reference_drops: int = 100

    def __post_init__(self):
        for name, mix in (("species_mix", self.species_mix), ("scenario_mix", self.scenario_mix)):
            if abs(sum(mix.values()) - 1.0) > 1e-6:
                raise ValueError(f"{name} must sum to 1, got {sum(mix.values()):.6f}")
            if any(v < 0 for v in mix.values()):
                raise ValueError(f"{name} has negative weights")
        for s in self.scenario_mix:
            Scenario(s)
        for s in self.species_mix:
            if s not in PROFILES:
                raise ValueError(f"unknown species {s!r}")


def uniform_disc(rng, R: float) -> tuple[float, float]:
    rad = R * math.sqrt(rng.random())
    ang = 2 * math.pi * rng.random()
    return rad * math.cos(ang), rad * math.sin(ang)


def draw_speed(rng, profile: SpeciesProfile) -> float:
    return max(0.3, rng.normal(profile.fall_speed_mean, profile.fall_speed_sd))


@dataclass
class _Pass:
    """One occluder crossing the beam plane."""

    profile: SpeciesProfile
    t: float
    r: float
    speed: float
    onset: float  # sample index where the leading edge reaches the beam
    stall: int = 0
    tumble_freq: float = 50.0
    tumble_phase: float = 0.0

    def samples_in_beam(self, dt: float) -> float:
        return 2 * self.profile.vertical_radius / (self.speed * dt * 1000.0) + self.stall

    def end(self, dt: float) -> float:
        return self.onset + self.samples_in_beam(dt)

    def chord_radius(self, n: np.ndarray, dt: float) -> np.ndarray:
        step = self.speed * dt * 1000.0  # mm per sample
        rv = self.profile.vertical_radius
        k_mid = rv / step
        el = n - self.onset
        el = np.where(el > k_mid, np.maximum(k_mid, el - self.stall), el)
        z = rv - step * el
        frac = np.clip(1.0 - (z / rv) ** 2, 0.0, None)
        rho = self.profile.lateral_radius * (
            1 + self.profile.tumble_amplitude * np.sin(2 * np.pi * self.tumble_freq * n * dt + self.tumble_phase)
        )
        return rho * np.sqrt(frac)


def synth_event(event: DropEvent, device: DeviceConfig, *, occluder: bool = True):
    """Two-channel ADC count stream for one scenario plus its ground truth.

    Returns ``(stream, truth)`` where ``stream`` has shape ``(2, n_samples)``.
    With ``occluder=False`` the same random draws produce the bare baseline
    process.
    """
    rng = np.random.default_rng(event.seed)
    dt = device.sample_period
    h = device.samples_per_half
    lead = 2 * h
    geom, circ = device.geometry, device.circuit
    lsb = circ.vcc / circ.full_scale

    # all draws happen in a fixed order regardless of scenario
    onset_any = lead + int(rng.integers(0, 2 * h))
    onset_early = lead + int(rng.integers(0, 24))
    stall = int(rng.integers(130, 190))
    gap = int(rng.integers(4, 25))
    t2, r2 = uniform_disc(rng, geom.dropzone_radius_R)
    speed2 = draw_speed(rng, event.profile)
    tumble = rng.uniform(30.0, 80.0, size=2), rng.uniform(0, 2 * np.pi, size=2)
    wander_phase = rng.uniform(0, 2 * np.pi)
    burst_len = int(rng.integers(2, 6))
    burst_amp = rng.uniform(0.5, 1.5) * (device.trigger.delta_off1 + device.trigger.jump1)
    burst_ch = int(rng.integers(0, 3))  # 0, 1 or both (2)

    sc = event.scenario
    passes: list[_Pass] = []
    if sc is Scenario.CONSECUTIVE_DOUBLE:
        p1 = _Pass(event.profile, event.entry_t, event.entry_r, event.speed, onset_early,
                   tumble_freq=tumble[0][0], tumble_phase=tumble[1][0])
        p2 = _Pass(event.profile, t2, r2, speed2, math.ceil(p1.end(dt)) + gap,
                   tumble_freq=tumble[0][1], tumble_phase=tumble[1][1])
        passes = [p1, p2]
    elif sc is Scenario.FLUCTUATION_NO_PEST:
        passes = []
    else:
        profile = PROFILES["Debris"] if sc is Scenario.DEBRIS_NO_PEST else event.profile
        passes = [_Pass(profile, event.entry_t, event.entry_r, event.speed, onset_any,
                        stall=stall if sc is Scenario.SPAN_TWO_CYCLES else 0,
                        tumble_freq=tumble[0][0], tumble_phase=tumble[1][0])]

    activity_end = max([p.end(dt) for p in passes] + [onset_any + burst_len])
    n_total = int(math.ceil((activity_end + 3 * h) / h)) * h
    n = np.arange(n_total, dtype=float)
    noise = rng.standard_normal((2, n_total))

    shade = np.zeros((2, n_total))
    if occluder:
        for ps in passes:
            rho = ps.chord_radius(n, dt)
            for c in range(2):
                shade[c] = np.maximum(shade[c], shaded_fraction_array(rho, ps.t, ps.r, geom, c + 1))
    e_e = circuit.emitter_intensity(circ)
    u, _ = circuit.receiver_voltage(circuit.received_intensity(e_e, shade, circ), circ)
    u0 = circuit.unshaded_voltage(circ)
    gain, offset = device.individuality()
    wander = device.wander_amplitude * np.sin(2 * np.pi * n * dt / device.wander_period + wander_phase)
    u = u0 + gain[:, None] * (u - u0) + (offset[:, None] + wander[None, :]) * lsb
    u = np.stack([circuit.rc_response(u[c], circ, dt) for c in range(2)])
    u = u + device.noise_sd * lsb * noise
    if sc is Scenario.FLUCTUATION_NO_PEST and occluder:
        chans = [0, 1] if burst_ch == 2 else [burst_ch]
        for c in chans:
            u[c, onset_any : onset_any + burst_len] += burst_amp * lsb
    counts, _ = circuit.adc_quantize(u, circ)

    truth = {
        "scenario": sc.value,
        "species": event.profile.name,
        "count": SCENARIO_COUNT[sc],
        "pulses": [[int(math.floor(p.onset)), int(math.ceil(p.end(dt)))] for p in passes],
    }
    return counts, truth


def make_devices(n: int, seed: int, template: DeviceConfig | None = None) -> list[DeviceConfig]:
    template = template or DeviceConfig()
    return [
        replace(template, device_id=f"pm{k + 1}", seed=int(np.random.default_rng([seed, 7919, k]).integers(2**31)))
        for k in range(n)
    ]


def draw_event(rng, species: str, scenario: Scenario, R: float) -> DropEvent:
    profile = PROFILES[species]
    t, r = uniform_disc(rng, R)
    return DropEvent(profile, t, r, draw_speed(rng, profile), scenario, int(rng.integers(2**63)))


def _choice(rng, mix: dict) -> str:
    keys = list(mix)
    p = np.array([mix[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def simulate_campaign(cfg: CampaignConfig, devices: list[DeviceConfig] | None = None):
    """Run ``cfg.n_events`` drops through the acquisition loop.

    Events are spread round-robin over the devices and spaced
    ``event_spacing`` seconds apart on each device's clock. Every event's
    randomness derives only from ``(cfg.seed, event index)``.

    Returns ``(records, truth_rows)``.
    """
    devices = devices or make_devices(cfg.n_devices, cfg.seed)
    next_seq = {d.device_id: 0 for d in devices}
    slot = {d.device_id: 0 for d in devices}
    records: list[WaveformRecord] = []
    truth_rows = []
    for i in range(cfg.n_events):
        rng = np.random.default_rng([cfg.seed, i])
        species = _choice(rng, cfg.species_mix)
        scenario = Scenario(_choice(rng, cfg.scenario_mix))
        dev = devices[i % len(devices)]
        event = draw_event(rng, species, scenario, dev.geometry.dropzone_radius_R)
        stream, truth = synth_event(event, dev)
        recs = run_acquisition(
            stream,
            dev.trigger,
            dev.device_id,
            buffer_len=dev.buffer_len,
            start_time=slot[dev.device_id] * cfg.event_spacing,
            seq_start=next_seq[dev.device_id],
        )
        slot[dev.device_id] += 1
        next_seq[dev.device_id] += len(recs)
        tag = {"event_id": i, "scenario": scenario.value, "species": species, "count": truth["count"]}
        for rec in recs:
            rec.truth = dict(tag)
        records.extend(recs)
        truth_rows.append(
            {
                "event_id": i,
                "device_id": dev.device_id,
                "scenario": scenario.value,
                "species": species,
                "count": truth["count"],
                "record_ids": [r.record_id for r in recs],
            }
        )
    return records, truth_rows


def build_reference_drops(device: DeviceConfig, n: int = 100, seed: int = 0) -> list[WaveformRecord]:
    """``n`` centre drops of the black reference sphere through ``device``."""
    if n < 1:
        raise ValueError("need at least one reference drop")
    profile = PROFILES["BlackSphere"]
    out: list[WaveformRecord] = []
    k = 0
    while len(out) < n:
        if k >= 3 * n:
            raise RuntimeError(f"reference drops on {device.device_id} keep failing to trigger")
        rng = np.random.default_rng([seed, device.seed, 4241, k])
        event = DropEvent(profile, 0.0, 0.0, draw_speed(rng, profile), Scenario.NORMAL_SINGLE,
                          int(rng.integers(2**63)))
        stream, _ = synth_event(event, device)
        recs = run_acquisition(stream, device.trigger, device.device_id, buffer_len=device.buffer_len,
                               start_time=k * 5.0, seq_start=REFERENCE_SEQ_BASE + len(out))
        k += 1
        if recs:
            rec = recs[0]
            rec.truth = {"reference": True, "species": "BlackSphere", "scenario": "NormalSingle", "count": 1}
            out.append(rec)
    return out


TRUTH_COLUMNS = ["event_id", "device_id", "scenario", "species", "count", "record_ids"]


def write_truth_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for row in rows:
            w.writerow([row["event_id"], row["device_id"], row["scenario"], row["species"],
                        row["count"], ";".join(row["record_ids"])])


def read_truth_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            row["event_id"] = int(row["event_id"])
            row["count"] = int(row["count"])
            row["record_ids"] = [x for x in row["record_ids"].split(";") if x]
            out.append(row)
        return out
