"""Acquisition loop of the probe: interleaved DMA ring, trigger checks, capture.

Windows passed to the three buffer routines are half-open ``[i, j)`` with even
endpoints; even ring indices hold channel 1 and odd indices channel 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .records import WaveformRecord

JUMP_SPAN = 8  # ring-index distance between the two ends of a jump test


@dataclass
class RingBuffer:
    data: np.ndarray = field(default_factory=lambda: np.zeros(256, dtype=np.int64))
    write_cursor: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.size % 2:
            raise ValueError("ring length must be even")

    @property
    def L(self) -> int:
        return self.data.size

    def linearized(self) -> np.ndarray:
        """Chronological copy, oldest sample first, ending at the cursor."""
        c = self.write_cursor % self.L
        return np.concatenate([self.data[c:], self.data[:c]])


@dataclass
class WaveList:
    rows: np.ndarray
    m: int = 0

    @classmethod
    def empty(cls, M: int = 8, L: int = 256) -> "WaveList":
        return cls(np.zeros((M, L), dtype=np.int64), 0)

    @property
    def M(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class TriggerConfig:
    theta1: int | None = None
    theta2: int | None = None
    delta_off1: int = 40
    delta_off2: int = 40
    jump1: int = 30
    jump2: int = 30
    refresh_period: float = 60.0
    sample_period: float = 200e-6

    def __post_init__(self):
        if self.jump1 <= 0 or self.jump2 <= 0:
            raise ValueError("jump ranges must be positive")
        if self.sample_period <= 0:
            raise ValueError("sample period must be positive")


def _buf(buf) -> np.ndarray:
    return buf.data if isinstance(buf, RingBuffer) else np.asarray(buf)


def _check_window(i: int, j: int, L: int) -> None:
    if i % 2 or j % 2:
        raise ValueError(f"window endpoints must be even, got [{i}, {j})")
    if not 0 <= i < j <= L:
        raise ValueError(f"empty or out-of-range window [{i}, {j}) for L={L}")


def transfer_data(buf, i: int, j: int, wl: WaveList) -> WaveList:
    """Deinterleave ``buf[i:j]`` into row ``wl.m``, right-aligned per channel half."""
    data = _buf(buf)
    L = data.size
    _check_window(i, j, L)
    if wl.rows.shape[1] != L:
        raise ValueError("wave list row length must equal the ring length")
    n = (j - i) // 2
    row = wl.rows[wl.m]
    row[L // 2 - n : L // 2] = data[i:j:2]
    row[L - n : L] = data[i + 1 : j : 2]
    wl.m = (wl.m + 1) % wl.M
    return wl


def adaptive_threshold(buf, i: int, j: int, cfg: TriggerConfig) -> tuple[int, int]:
    data = _buf(buf)
    _check_window(i, j, data.size)
    n = (j - i) // 2
    ch1_sum = int(data[i:j:2].sum())
    ch2_sum = int(data[i + 1 : j : 2].sum())
    return ch1_sum // n + cfg.delta_off1, ch2_sum // n + cfg.delta_off2


def check_threshold(buf, i: int, j: int, cfg: TriggerConfig) -> int | None:
    """First ring index holding a qualifying jump, or ``None``.

    A channel qualifies at ``l`` when its sample reaches the threshold and
    differs from the sample ``JUMP_SPAN`` ring slots later by at least the jump
    range, in either direction. Channel 1 is tested before channel 2 at each
    ``l``.
    """
    data = _buf(buf)
    if cfg.theta1 is None or cfg.theta2 is None:
        raise ValueError("thresholds are not initialised")
    th1, th2, d1, d2 = cfg.theta1, cfg.theta2, cfg.jump1, cfg.jump2
    end = j - JUMP_SPAN
    if i >= end:
        return None
    for l in range(i, end, 2):
        a, b = data[l], data[l + 8]
        if a >= th1 and (a + d1 <= b or a >= b + d1):
            return l
        a, b = data[l + 1], data[l + 9]
        if a >= th2 and (a + d2 <= b or a >= b + d2):
            return l + 1
    return None


def run_acquisition(
    signal,
    cfg: TriggerConfig,
    device_id: str = "dev0",
    *,
    buffer_len: int = 256,
    start_time: float = 0.0,
    seq_start: int = 0,
    n_rows: int = 8,
) -> list[WaveformRecord]:
    """Replay a two-channel count stream through the interrupt-driven loop.

    At every half or full DMA completion the completed half is checked. A hit
    arms a capture that runs at the next completion, so each record holds the
    triggering half followed by the next one. Triggers in the half that ends a
    capture are folded into that record. The first completed half only seeds
    the thresholds; afterwards they are refreshed every ``refresh_period``
    seconds from the most recent half without a trigger.
    """
    sig = np.asarray(signal, dtype=np.int64)
    if sig.ndim != 2 or sig.shape[0] != 2:
        raise ValueError("signal must have shape (2, n_samples)")
    ring = RingBuffer(np.zeros(buffer_len, dtype=np.int64))
    wl = WaveList.empty(n_rows, buffer_len)
    L, half = buffer_len, buffer_len // 2
    pairs_per_half = half // 2
    dt = cfg.sample_period
    state = replace(cfg)
    seeded = cfg.theta1 is not None and cfg.theta2 is not None
    last_refresh = start_time
    quiet_snapshot: tuple[np.ndarray, int, int] | None = None
    pending: tuple[int, int] | None = None  # (trigger ring index, half start)
    records: list[WaveformRecord] = []
    seq = seq_start
    n_total = sig.shape[1]

    for k0 in range(0, n_total, pairs_per_half):
        k1 = min(k0 + pairs_per_half, n_total)
        c = ring.write_cursor
        npair = k1 - k0
        ring.data[c : c + 2 * npair : 2] = sig[0, k0:k1]
        ring.data[c + 1 : c + 2 * npair : 2] = sig[1, k0:k1]
        ring.write_cursor = (c + 2 * npair) % L
        if npair < pairs_per_half:
            break
        i, j = c, c + half
        t_now = start_time + k1 * dt

        captured = False
        if pending is not None:
            p, half_start = pending
            transfer_data(ring.linearized(), 0, L, wl)
            row = wl.rows[(wl.m - 1) % wl.M]
            n_ch = L // 2
            records.append(
                WaveformRecord(
                    device_id=device_id,
                    seq=seq,
                    trigger_pos=(p - half_start) // 2,
                    ch1=row[:n_ch].copy(),
                    ch2=row[n_ch:].copy(),
                    timestamp=round(t_now - n_ch * dt, 9),
                )
            )
            seq += 1
            pending = None
            captured = True

        if not seeded:
            th = adaptive_threshold(ring, i, j, state)
            state = replace(state, theta1=th[0], theta2=th[1])
            seeded = True
            last_refresh = t_now
            quiet_snapshot = (ring.data.copy(), i, j)
            continue

        p = check_threshold(ring, i, j, state)
        if p is None:
            quiet_snapshot = (ring.data.copy(), i, j)
        elif not captured:
            pending = (p, i)

        if t_now - last_refresh >= cfg.refresh_period and quiet_snapshot is not None:
            th = adaptive_threshold(*quiet_snapshot, state)
            state = replace(state, theta1=th[0], theta2=th[1])
            last_refresh = t_now
    return records
