"""Emitter/receiver drive circuit, RC response and ADC quantisation.

Shading lowers the received intensity, which lowers the receiver current and
therefore raises the receiver terminal voltage: pest pulses point upward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

E12 = (1.0, 1.2, 1.5, 1.8, 2.2, 2.7, 3.3, 3.9, 4.7, 5.6, 6.8, 8.2)

# Junction capacitance reference voltage and floor for C_j ~ 1/sqrt(U_pd).
V_REF = 1.0
V_MIN = 0.05


class TuningError(ValueError):
    """No resistor pair on the ladder satisfies the tuning constraints."""

    def __init__(self, constraint: str, detail: str):
        super().__init__(f"infeasible {constraint}: {detail}")
        self.constraint = constraint


@dataclass(frozen=True)
class CircuitParams:
    vcc: float = 3.3
    r_e: float = 100.0
    r_r: float = 10_000.0
    k1: float = 1.0
    c1: float = 0.0
    a: float = 100.0
    # Places the unshaded operating point at VCC/2 for the default resistors.
    k2: float = 1.65e-4
    c2: float = 0.0
    ambient_e: float = 0.0
    c0: float = 10e-9
    adc_bits: int = 12

    def __post_init__(self):
        if min(self.k1, self.k2, self.a) <= 0:
            raise ValueError("k1, k2 and a must be positive")
        if min(self.vcc, self.r_e, self.r_r) <= 0:
            raise ValueError("vcc, r_e and r_r must be positive")

    @property
    def full_scale(self) -> int:
        return 2**self.adc_bits - 1

    def counts_to_mv(self, counts):
        return np.asarray(counts, dtype=float) * self.vcc / self.full_scale * 1000.0


def emitter_intensity(p: CircuitParams) -> float:
    return p.k1 * (p.a / p.r_e) + p.c1


def received_intensity(e_e, shade, p: CircuitParams):
    shade = np.asarray(shade, dtype=float)
    if np.any((shade < 0) | (shade > 1)):
        raise ValueError("shade must lie in [0, 1]")
    out = e_e * (1.0 - shade) + p.ambient_e
    return float(out) if out.ndim == 0 else out


def receiver_voltage(e_r, p: CircuitParams):
    """Terminal voltage ``VCC - R_r (k2 E_r + c2)`` clamped to ``[0, VCC]``.

    Returns ``(voltage, saturated)``; ``saturated`` flags samples where the
    photodiode left its linear region.
    """
    e_r = np.asarray(e_r, dtype=float)
    if np.any(e_r < 0):
        raise ValueError("received intensity must be non-negative")
    u = p.vcc - p.r_r * (p.k2 * e_r + p.c2)
    sat = (u < 0) | (u > p.vcc)
    u = np.clip(u, 0.0, p.vcc)
    if u.ndim == 0:
        return float(u), bool(sat)
    return u, sat


def junction_tau(u_pd, p: CircuitParams, r_r: float | None = None):
    r = p.r_r if r_r is None else r_r
    c_j = p.c0 * np.sqrt(V_REF / np.maximum(u_pd, V_MIN))
    return r * c_j


def rc_response(u_target, p: CircuitParams, dt: float, v0: float | None = None) -> np.ndarray:
    """First-order low-pass of a uniformly sampled target voltage.

    The time constant follows the junction capacitance at the current output
    voltage. ``v0`` defaults to the first target sample (steady state); the
    last output sample is the state to pass as ``v0`` for a continuation.
    """
    u = np.asarray(u_target, dtype=float)
    out = np.empty_like(u)
    if u.size == 0:
        return out
    v = float(u[0]) if v0 is None else float(v0)
    c = p.c0 * math.sqrt(V_REF)
    for n in range(u.size):
        out[n] = v
        tau = p.r_r * c / math.sqrt(max(v, V_MIN))
        v += (1.0 - math.exp(-dt / tau)) * (u[n] - v)
    return out


def adc_quantize(u, p: CircuitParams):
    """Round-half-up quantisation to ``adc_bits``. Returns ``(counts, saturated)``."""
    u = np.asarray(u, dtype=float)
    sat = (u < 0) | (u > p.vcc)
    uc = np.clip(u, 0.0, p.vcc)
    counts = np.floor(uc / p.vcc * p.full_scale + 0.5).astype(np.int64)
    if counts.ndim == 0:
        return int(counts), bool(sat)
    return counts, sat


def e12_ladder(lo: float, hi: float) -> list[float]:
    """E12 resistor values in ``[lo, hi]``, ascending."""
    out = []
    decade = 10.0 ** math.floor(math.log10(lo))
    while decade <= hi:
        for m in E12:
            v = round(m * decade, 10)
            if lo <= v <= hi:
                out.append(v)
        decade *= 10
    return out


def response_time(p: CircuitParams, r_r: float, u_pd: float) -> float:
    """10%-90% rise time of the receiver at photodiode voltage ``u_pd``."""
    return float(junction_tau(u_pd, p, r_r)) * math.log(9.0)


def unshaded_voltage(p: CircuitParams) -> float:
    e_r = received_intensity(emitter_intensity(p), 0.0, p)
    return p.vcc - p.r_r * (p.k2 * e_r + p.c2)


def tune_components(
    p: CircuitParams,
    max_response_time: float,
    linearity_margin: float,
    r_r_ladder=None,
    r_e_ladder=None,
) -> tuple[float, float]:
    """Pick the receiver resistor first, then the emitter resistor.

    The receiver resistor is the largest ladder value whose rise time stays
    within ``max_response_time`` at the lowest admissible photodiode voltage
    (``linearity_margin``, where the junction capacitance is largest). The
    emitter resistor is then the smallest ladder value keeping the unshaded
    photodiode voltage at or above ``linearity_margin``. If no emitter value
    works, the next smaller receiver resistor is tried.
    """
    r_r_ladder = sorted(r_r_ladder or e12_ladder(1e3, 1e6))
    r_e_ladder = sorted(r_e_ladder or e12_ladder(10.0, 10e3))
    fast = [r for r in r_r_ladder if response_time(p, r, linearity_margin) <= max_response_time]
    if not fast:
        raise TuningError(
            "max_response_time",
            f"smallest receiver resistor {r_r_ladder[0]:g} ohm needs "
            f"{response_time(p, r_r_ladder[0], linearity_margin):.3g} s > {max_response_time:g} s",
        )
    for r_r in reversed(fast):
        for r_e in r_e_ladder:
            if unshaded_voltage(replace(p, r_r=r_r, r_e=r_e)) >= linearity_margin:
                return r_r, r_e
    raise TuningError(
        "linearity_margin",
        f"no emitter resistor keeps the photodiode above {linearity_margin:g} V",
    )
