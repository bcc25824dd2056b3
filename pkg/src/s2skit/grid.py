"""Lat-lon grid geometry, latitude weighting, climatology, and regions.

Everything downstream (embedding losses, verification metrics, transport
diagnostics) leans on the conventions fixed here:

* latitudes run north to south, longitudes eastward from 0 and wrap mod 360;
* latitude weights are cos(lat) normalized to mean 1 over latitude rows, so a
  latitude-constant error has identical weighted and unweighted RMSE;
* calendar days live on a 366-slot circular axis (slot 59 is Feb 29); in
  non-leap years that slot is simply never indexed;
* channels carry a sphere tag that splits a state into the atmospheric block
  (``atmosphere``) and the boundary block (``ocean``/``land``/``flux``);
* ocean-only channels may carry an explicit validity mask, and every spatial
  reduction renormalizes weights over unmasked cells.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0

ATMOSPHERE_SPHERES = ("atmosphere",)
BOUNDARY_SPHERES = ("ocean", "land", "flux")
SPHERES = ATMOSPHERE_SPHERES + BOUNDARY_SPHERES

#: Slots on the circular calendar axis (leap-year day count).
CALENDAR_SLOTS = 366


class Channel(NamedTuple):
    name: str
    sphere: str


@dataclass(frozen=True)
class GridSpec:
    """Regular lat-lon grid, ordered north to south and eastward."""

    n_lat: int
    n_lon: int
    lat_start_deg: float = 90.0
    lat_step_deg: float = -1.5
    lon_start_deg: float = 0.0
    lon_step_deg: float = 1.5

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise ValueError(f"grid must have at least one row and column, got {self.n_lat}x{self.n_lon}")
        lats = self.latitudes
        if np.any(np.abs(lats) > 90.0 + 1e-9):
            raise ValueError("grid latitudes must lie in [-90, 90]")

    @property
    def latitudes(self) -> np.ndarray:
        return self.lat_start_deg + self.lat_step_deg * np.arange(self.n_lat)

    @property
    def longitudes(self) -> np.ndarray:
        """Longitudes wrapped into [0, 360)."""
        return np.mod(self.lon_start_deg + self.lon_step_deg * np.arange(self.n_lon), 360.0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)


def paper_grid() -> GridSpec:
    """The 1.5-degree global grid (121 x 240)."""
    return GridSpec(n_lat=121, n_lon=240, lat_start_deg=90.0, lat_step_deg=-1.5,
                    lon_start_deg=0.0, lon_step_deg=1.5)


def desk_grid() -> GridSpec:
    """Scaled-down 6-degree global grid (31 x 60) for fast runs and CI."""
    return GridSpec(n_lat=31, n_lon=60, lat_start_deg=90.0, lat_step_deg=-6.0,
                    lon_start_deg=0.0, lon_step_deg=6.0)


def latitude_weights(grid: GridSpec) -> np.ndarray:
    """Per-row latitude weights, cos(lat) normalized to mean 1.

    Polar rows legitimately get near-zero weight.  A grid whose rows all sit
    at the poles carries no usable weight and is rejected.
    """
    raw = np.cos(np.deg2rad(grid.latitudes))
    mean = raw.mean()
    if mean <= 0.0:
        raise ValueError("all latitude weights are zero; grid has no usable rows")
    return raw / mean


@dataclass
class FieldSet:
    """Channel-stacked state on a grid at one valid time.

    ``values`` has shape [channel, n_lat, n_lon].  ``mask`` (optional, same
    shape, True = valid) marks cells excluded from every spatial reduction;
    masked cells may hold any payload including NaN.
    """

    grid: GridSpec
    channels: tuple[Channel, ...]
    values: np.ndarray
    valid_time: dt.date | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.channels = tuple(Channel(*c) for c in self.channels)
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        for c in self.channels:
            if c.sphere not in SPHERES:
                raise ValueError(f"unknown sphere tag {c.sphere!r} on channel {c.name!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (len(self.channels),) + self.grid.shape
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} does not match {expected}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != expected:
                raise ValueError(f"mask shape {self.mask.shape} does not match {expected}")
        check = self.values if self.mask is None else np.where(self.mask, self.values, 0.0)
        if not np.all(np.isfinite(check)):
            raise ValueError("field values must be finite outside masked cells")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def channel_index(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(f"no channel named {name!r}")

    def block_indices(self, block: str) -> np.ndarray:
        """Channel indices of the atmospheric ('a') or boundary ('b') block."""
        spheres = ATMOSPHERE_SPHERES if block == "a" else BOUNDARY_SPHERES
        return np.array([i for i, c in enumerate(self.channels) if c.sphere in spheres], dtype=int)

    def block(self, which: str) -> "FieldSet":
        idx = self.block_indices(which)
        if idx.size == 0:
            raise ValueError(f"field set has no channels in block {which!r}")
        return FieldSet(
            grid=self.grid,
            channels=tuple(self.channels[i] for i in idx),
            values=self.values[idx],
            valid_time=self.valid_time,
            mask=None if self.mask is None else self.mask[idx],
        )


def weighted_mean(field: np.ndarray, lat_weights: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Latitude-weighted mean over the trailing [..., n_lat, n_lon] axes.

    With a mask, weights renormalize over valid cells so masked cells can
    never influence the result.
    """
    field = np.asarray(field, dtype=np.float64)
    w = np.asarray(lat_weights, dtype=np.float64)[:, None]
    w = np.broadcast_to(w, field.shape[-2:])
    w = np.broadcast_to(w, field.shape)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), field.shape)
        w = np.where(mask, w, 0.0)
        field = np.where(mask, field, 0.0)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("no unmasked weight remains in spatial reduction")
    return float((field * w).sum() / total)


def day_slot(date: dt.date) -> int:
    """Slot of a calendar day on the 366-day circular axis (0-based; Feb 29 is 59)."""
    return (dt.date(2000, date.month, date.day) - dt.date(2000, 1, 1)).days


def slot_name(slot: int) -> str:
    d = dt.date(2000, 1, 1) + dt.timedelta(days=int(slot))
    return d.strftime("%b-%d")


@dataclass
class Climatology:
    """Per-calendar-day mean fields built with a centered circular window."""

    day_values: np.ndarray  # [366, channel, n_lat, n_lon]
    grid: GridSpec
    channels: tuple[Channel, ...]
    reference_period: tuple[int, int]
    window_halfwidth_days: int
    day_counts: np.ndarray = field(default=None)  # [366] samples per window

    def day(self, date: dt.date) -> np.ndarray:
        s = day_slot(date)
        vals = self.day_values[s]
        if self.day_counts is not None and self.day_counts[s] == 0:
            raise ValueError(f"climatology has no entry for calendar day {s} ({slot_name(s)})")
        return vals


def build_climatology(samples: Sequence[FieldSet], halfwidth: int = 15) -> Climatology:
    """Mean field per calendar day over a +-halfwidth circular window.

    Every sample whose calendar slot lies within ``halfwidth`` days of the
    target slot (circularly on the 366-day axis) contributes to that day's
    mean.  Deterministic given the inputs; any day with an empty window is an
    error naming the day.
    """
    if len(samples) == 0:
        raise ValueError("cannot build a climatology from zero samples")
    ref = samples[0]
    nslots = CALENDAR_SLOTS
    sums = np.zeros((nslots,) + ref.values.shape, dtype=np.float64)
    counts = np.zeros(nslots, dtype=np.int64)
    years = []
    for s in samples:
        if s.grid != ref.grid:
            raise ValueError("all climatology samples must share one grid")
        if s.channels != ref.channels:
            raise ValueError("all climatology samples must share one channel list")
        if s.valid_time is None:
            raise ValueError("climatology samples need a valid_time")
        slot = day_slot(s.valid_time)
        sums[slot] += s.values
        counts[slot] += 1
        years.append(s.valid_time.year)

    # Circular windowed sums via a padded cumulative sum: one pass, fixed order.
    window = 2 * halfwidth + 1
    pad_sums = np.concatenate([sums[-halfwidth:], sums, sums[:halfwidth]], axis=0)
    pad_counts = np.concatenate([counts[-halfwidth:], counts, counts[:halfwidth]])
    csum = np.cumsum(pad_sums, axis=0)
    ccnt = np.cumsum(pad_counts)

    def windowed(c, i):
        return c[i + window - 1] - (c[i - 1] if i > 0 else 0)

    day_values = np.empty_like(sums)
    day_counts = np.empty(nslots, dtype=np.int64)
    for s in range(nslots):
        n = windowed(ccnt, s)
        if n == 0:
            raise ValueError(f"no samples in the climatology window for calendar day {s} ({slot_name(s)})")
        day_values[s] = windowed(csum, s) / n
        day_counts[s] = n

    return Climatology(
        day_values=day_values,
        grid=ref.grid,
        channels=ref.channels,
        reference_period=(min(years), max(years)),
        window_halfwidth_days=halfwidth,
        day_counts=day_counts,
    )


def anomaly(x: FieldSet, clim: Climatology) -> FieldSet:
    """Field minus its calendar-day climatology; preserves channel masks."""
    if x.grid != clim.grid:
        raise ValueError("field and climatology grids differ")
    if x.channels != clim.channels:
        raise ValueError("field and climatology channel lists differ")
    if x.valid_time is None:
        raise ValueError("anomaly needs the field's valid_time")
    base = clim.day(x.valid_time)
    vals = x.values - base
    if x.mask is not None:
        vals = np.where(x.mask, vals, 0.0)
    return FieldSet(grid=x.grid, channels=x.channels, values=vals,
                    valid_time=x.valid_time, mask=x.mask)


def great_circle_km(p1, p2) -> float | np.ndarray:
    """Haversine distance in km (Earth radius 6371). Broadcasts over arrays."""
    lat1, lon1 = np.deg2rad(np.asarray(p1[0], dtype=np.float64)), np.deg2rad(np.asarray(p1[1], dtype=np.float64))
    lat2, lon2 = np.deg2rad(np.asarray(p2[0], dtype=np.float64)), np.deg2rad(np.asarray(p2[1], dtype=np.float64))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


@dataclass(frozen=True)
class RegionBox:
    """Lat-lon box; the longitude interval may wrap across 0 degrees."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ValueError("region box needs lat_min < lat_max")


def region_mask(grid: GridSpec, box: RegionBox) -> np.ndarray:
    """Boolean [n_lat, n_lon] mask of grid points inside the box."""
    lats = grid.latitudes
    lons = grid.longitudes
    lat_in = (lats >= box.lat_min) & (lats <= box.lat_max)
    lo = np.mod(box.lon_min, 360.0)
    hi = np.mod(box.lon_max, 360.0)
    if lo <= hi:
        lon_in = (lons >= lo) & (lons <= hi)
    else:
        lon_in = (lons >= lo) | (lons <= hi)
    mask = lat_in[:, None] & lon_in[None, :]
    if not mask.any():
        raise ValueError("region box selects no grid cells")
    return mask
