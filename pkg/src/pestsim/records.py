"""Waveform record type and its JSON-lines / packed binary encodings."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BIN_MAGIC = b"PSTW"
BIN_VERSION = 1


@dataclass
class WaveformRecord:
    device_id: str
    seq: int
    trigger_pos: int | None
    ch1: np.ndarray
    ch2: np.ndarray
    timestamp: float = 0.0
    truth: dict | None = None

    def __post_init__(self):
        self.ch1 = np.asarray(self.ch1, dtype=np.int64)
        self.ch2 = np.asarray(self.ch2, dtype=np.int64)
        if self.ch1.shape != self.ch2.shape:
            raise ValueError("channels must have equal length")

    @property
    def record_id(self) -> str:
        return f"{self.device_id}-{self.seq:06d}"

    @property
    def n_samples(self) -> int:
        return self.ch1.size

    def as_array(self) -> np.ndarray:
        """Samples as a ``(T, 2)`` float array."""
        return np.stack([self.ch1, self.ch2], axis=1).astype(float)

    def duration(self, sample_period: float) -> float:
        return self.n_samples * sample_period

    def to_json(self) -> str:
        obj = {
            "device_id": self.device_id,
            "seq": int(self.seq),
            "trigger_pos": None if self.trigger_pos is None else int(self.trigger_pos),
            "timestamp": float(self.timestamp),
            "ch1": [int(v) for v in self.ch1],
            "ch2": [int(v) for v in self.ch2],
        }
        if self.truth is not None:
            obj["truth"] = self.truth
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "WaveformRecord":
        obj = json.loads(line)
        return cls(
            device_id=obj["device_id"],
            seq=obj["seq"],
            trigger_pos=obj.get("trigger_pos"),
            ch1=obj["ch1"],
            ch2=obj["ch2"],
            timestamp=obj.get("timestamp", 0.0),
            truth=obj.get("truth"),
        )


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[WaveformRecord]:
    with open(path, encoding="utf-8") as fh:
        return [WaveformRecord.from_json(line) for line in fh if line.strip()]


def write_binary(records, path) -> None:
    """Header: magic, version byte, u32 record count, u16 samples per channel.

    Each record follows as little-endian u16 counts, channel 1 then channel 2.
    """
    records = list(records)
    n = records[0].n_samples if records else 0
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<BIH", BIN_VERSION, len(records), n))
        for rec in records:
            if rec.n_samples != n:
                raise ValueError("binary format needs a fixed record length")
            block = np.concatenate([rec.ch1, rec.ch2])
            if block.min(initial=0) < 0 or block.max(initial=0) > 0xFFFF:
                raise ValueError("counts do not fit in u16")
            fh.write(block.astype("<u2").tobytes())


def read_binary(path) -> np.ndarray:
    """Return counts as an array of shape ``(n_records, 2, n_samples)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != BIN_MAGIC:
        raise ValueError("not a PSTW record file")
    version, count, n = struct.unpack_from("<BIH", raw, 4)
    if version != BIN_VERSION:
        raise ValueError(f"unsupported PSTW version {version}")
    body = np.frombuffer(raw, dtype="<u2", offset=4 + struct.calcsize("<BIH"))
    if body.size != count * 2 * n:
        raise ValueError("truncated PSTW file")
    return body.reshape(count, 2, n).astype(np.int64)
