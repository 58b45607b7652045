"""Infrared beam geometry: radial intensity profile, shaded range, and layout coverage.

Coordinates live in the drop-zone cross-section. The origin is the zone
centre; for pair 1 the emitter sits at ``t = -D`` on the transverse axis and
the receiver at ``t = +receiver_distance``. Pair 2 is pair 1 rotated about the
origin by ``second_pair_rotation``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Highest power first; coefficients kept exactly as fitted, odd terms included.
RRI_COEFFS = (0.0027, 4e-12, -0.4593, 2e-10, -1.4844, 3e-9, 100.11)
# The polynomial was fitted to samples out to 3 mm on the radial axis.
RRI_FIT_SPAN = 3.0


class Layout(str, enum.Enum):
    SYMMETRIC = "Symmetric"
    ASYMMETRIC_ORTHOGONAL = "AsymmetricOrthogonal"


# Conventional layouts mount the receiver right against the passage wall.
SYMMETRIC_WALL_STANDOFF = 1.0


@dataclass(frozen=True)
class BeamGeometry:
    emitter_distance_D: float = 19.13
    dropzone_radius_R: float = 2.0
    emitter_half_power_angle: float = 10.0
    receiver_half_angle: float = 10.0
    layout: Layout = Layout.ASYMMETRIC_ORTHOGONAL
    second_pair_rotation: float = 90.0
    # None selects the layout default (see ``receiver_dist``).
    receiver_distance: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        D, R = self.emitter_distance_D, self.dropzone_radius_R
        if not (D > R > 0):
            raise ValueError(f"need D > R > 0, got D={D}, R={R}")
        if not 0 < self.emitter_half_power_angle < 90:
            raise ValueError("emitter_half_power_angle must lie in (0, 90)")
        if not 0 < self.receiver_half_angle <= 90:
            raise ValueError("receiver_half_angle must lie in (0, 90]")
        if self.receiver_distance is not None and self.receiver_distance <= R:
            raise ValueError("receiver must sit outside the drop zone")

    @property
    def receiver_dist(self) -> float:
        if self.receiver_distance is not None:
            return float(self.receiver_distance)
        if self.layout is Layout.ASYMMETRIC_ORTHOGONAL:
            return self.emitter_distance_D - self.dropzone_radius_R
        return self.dropzone_radius_R + SYMMETRIC_WALL_STANDOFF

    @property
    def aperture_rad(self) -> float:
        return math.radians(self.receiver_half_angle)


@dataclass(frozen=True)
class Occluder:
    radius_rho: float
    transverse_t: float
    radial_r: float

    def check(self, geom: BeamGeometry) -> None:
        if self.radius_rho <= 0:
            raise ValueError("occluder radius must be positive")
        R = geom.dropzone_radius_R
        if self.transverse_t**2 + self.radial_r**2 > R**2 * (1 + 1e-12):
            raise ValueError(
                f"occluder at ({self.transverse_t}, {self.radial_r}) lies outside the drop zone"
            )


@dataclass(frozen=True)
class CoverageReport:
    both_pairs: float
    one_pair: float
    blind: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["both_pairs", "one_pair", "blind"])
            w.writerow([f"{self.both_pairs:.6f}", f"{self.one_pair:.6f}", f"{self.blind:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "CoverageReport":
        with open(Path(path), newline="") as fh:
            row = next(csv.DictReader(fh))
        return cls(float(row["both_pairs"]), float(row["one_pair"]), float(row["blind"]))


def rri_radial(r, limit: float = RRI_FIT_SPAN):
    """Relative radiant intensity (percent) at radial offset ``r`` in mm.

    Accepts scalars or arrays. Raises ``ValueError`` when ``|r|`` exceeds
    ``limit``; the default limit is the span the polynomial was fitted on.
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(np.abs(r_arr) > limit + 1e-12):
        raise ValueError(f"radial coordinate outside [-{limit}, {limit}] mm")
    out = np.polyval(RRI_COEFFS, r_arr)
    return float(out) if out.ndim == 0 else out


def rsr(t, geom: BeamGeometry = BeamGeometry()):
    """Relative shaded range of a unit-radius occluder at transverse ``t``."""
    t_arr = np.asarray(t, dtype=float)
    D, R = geom.emitter_distance_D, geom.dropzone_radius_R
    if np.any(np.abs(t_arr) > R + 1e-12):
        raise ValueError("transverse coordinate outside the drop zone")
    out = np.arctan(1.0 / (D + t_arr)) / np.arctan(1.0 / (D - R))
    return float(out) if out.ndim == 0 else out


def to_pair_frame(t, r, geom: BeamGeometry, pair_index: int):
    """Rotate zone coordinates into the local frame of ``pair_index``."""
    if pair_index == 1:
        return t, r
    if pair_index != 2:
        raise ValueError("pair_index must be 1 or 2")
    a = math.radians(geom.second_pair_rotation)
    c, s = math.cos(a), math.sin(a)
    return t * c + r * s, -t * s + r * c


def reach_halfwidth(t_local, geom: BeamGeometry):
    """Half-width of a receiver's acceptance cone at local transverse ``t``.

    The cone has its apex at the receiver and opens toward the emitter.
    """
    d = geom.receiver_dist
    ang = geom.receiver_half_angle
    span = np.maximum(d - np.asarray(t_local, dtype=float), 0.0)
    if ang >= 90.0:
        return np.where(span > 0, np.inf, 0.0)
    return span * math.tan(math.radians(ang))


def _interval_overlap(lo1, hi1, lo2, hi2):
    return np.maximum(np.minimum(hi1, hi2) - np.maximum(lo1, lo2), 0.0)


def shaded_fraction_array(rho, t, r, geom: BeamGeometry, pair_index: int):
    """Vectorised :func:`shaded_fraction` without occluder validation.

    ``rho`` may be zero (no shading). Positions are zone coordinates.
    """
    rho = np.asarray(rho, dtype=float)
    tl, rl = to_pair_frame(np.asarray(t, dtype=float), np.asarray(r, dtype=float), geom, pair_index)
    D = geom.emitter_distance_D
    angle = np.arctan(rho / (D + tl))
    weight = rri_radial(np.clip(rl, -RRI_FIT_SPAN, RRI_FIT_SPAN)) / 100.0
    w = reach_halfwidth(tl, geom)
    overlap = _interval_overlap(rl - rho, rl + rho, -w, w)
    denom = np.minimum(2 * rho, 2 * w)
    with np.errstate(divide="ignore", invalid="ignore"):
        inside = np.where(denom > 0, overlap / denom, 0.0)
    out = np.clip(angle / geom.aperture_rad * weight * inside, 0.0, 1.0)
    return np.where(rho > 0, out, 0.0)


def shaded_fraction(occ: Occluder, geom: BeamGeometry, pair_index: int) -> float:
    """Fraction of a receiver's aperture blocked by ``occ``.

    The shaded angle seen from the emitter, relative to the receiver
    aperture, weighted by the radial intensity profile and by how much of the
    occluder falls inside the receiver's acceptance cone. Clamped to [0, 1].
    """
    occ.check(geom)
    return float(
        shaded_fraction_array(occ.radius_rho, occ.transverse_t, occ.radial_r, geom, pair_index)
    )


def pair_reaches(t, r, geom: BeamGeometry, pair_index: int):
    tl, rl = to_pair_frame(np.asarray(t, dtype=float), np.asarray(r, dtype=float), geom, pair_index)
    return np.abs(rl) <= reach_halfwidth(tl, geom)


def coverage_grid(geom: BeamGeometry, grid_step: float):
    """Cell centres of the rasterised drop zone and how many pairs reach each."""
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    R = geom.dropzone_radius_R
    n = int(math.ceil(R / grid_step))
    axis = (np.arange(-n, n) + 0.5) * grid_step
    tt, rr = np.meshgrid(axis, axis, indexing="ij")
    inside = tt**2 + rr**2 <= R**2
    tt, rr = tt[inside], rr[inside]
    hits = pair_reaches(tt, rr, geom, 1).astype(int) + pair_reaches(tt, rr, geom, 2).astype(int)
    return tt, rr, hits


def coverage_map(geom: BeamGeometry, grid_step: float = 0.05) -> CoverageReport:
    _, _, hits = coverage_grid(geom, grid_step)
    n = hits.size
    return CoverageReport(
        both_pairs=float(np.count_nonzero(hits == 2)) / n,
        one_pair=float(np.count_nonzero(hits == 1)) / n,
        blind=float(np.count_nonzero(hits == 0)) / n,
    )
