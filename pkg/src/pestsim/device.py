"""Full description of one simulated probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .circuit import CircuitParams
from .firmware import TriggerConfig
from .optics import BeamGeometry


@dataclass(frozen=True)
class DeviceConfig:
    device_id: str = "dev0"
    seed: int = 0
    geometry: BeamGeometry = field(default_factory=BeamGeometry)
    circuit: CircuitParams = field(default_factory=CircuitParams)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    buffer_len: int = 256
    # baseline process, in ADC counts
    noise_sd: float = 2.0
    wander_amplitude: float = 8.0
    wander_period: float = 20.0
    # production spread: lognormal channel gain, normal offset (counts)
    gain_sigma: float = 0.15
    offset_sd: float = 60.0
    # explicit per-channel overrides of the seeded draws
    channel_gain: tuple[float, float] | None = None
    channel_offset: tuple[float, float] | None = None

    @property
    def sample_period(self) -> float:
        return self.trigger.sample_period

    @property
    def samples_per_half(self) -> int:
        return self.buffer_len // 4

    @property
    def samples_per_record(self) -> int:
        return self.buffer_len // 2

    def individuality(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (gain, offset in counts), fixed by the device seed."""
        rng = np.random.default_rng([self.seed, 0xD5])
        gain = np.exp(rng.normal(0.0, self.gain_sigma, size=2))
        offset = rng.normal(0.0, self.offset_sd, size=2)
        if self.channel_gain is not None:
            gain = np.asarray(self.channel_gain, dtype=float)
        if self.channel_offset is not None:
            offset = np.asarray(self.channel_offset, dtype=float)
        return gain, offset
