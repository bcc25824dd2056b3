"""Grouped vector-quantized embedding.

Atmospheric and boundary channel blocks are embedded separately, each through
its own encoder and codebook, onto a fixed 30 x 60 latent grid.  Losses here
are pure evaluators: reconstruction error is latitude weighted, codebook
alignment is not, and the two add up (an optional commitment term is off by
default).  The reference coder is an untrained, seeded patch-linear map whose
decoder is the Moore-Penrose pseudoinverse, so the whole pipeline runs without
any learned weights.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .grid import FieldSet, GridSpec, latitude_weights, weighted_mean

LATENT_SHAPE = (30, 60)

#: Default codebook size and latent channel counts (configuration, not claims).
DEFAULT_K = 512
DEFAULT_C_ZA = 16
DEFAULT_C_ZB = 8


@dataclass
class Codebook:
    """K entries of dimension d for one sphere group."""

    entries: np.ndarray  # [K, d]
    sphere: str = "atmosphere"

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ValueError("codebook entries must be a [K, d] array with K, d >= 1")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]


def random_codebook(seed: int, K: int = DEFAULT_K, d: int = DEFAULT_C_ZA, sphere: str = "atmosphere") -> Codebook:
    """Seeded standard-normal codebook used by tests and the reference pipeline."""
    rng = np.random.default_rng(seed)
    return Codebook(entries=rng.standard_normal((K, d)), sphere=sphere)


@dataclass
class LatentState:
    """Quantized latent pair on the 30 x 60 grid with the selected code indices."""

    za: np.ndarray  # [C_ZA, 30, 60]
    zb: np.ndarray  # [C_ZB, 30, 60]
    codes_a: np.ndarray  # [30, 60] int
    codes_b: np.ndarray  # [30, 60] int
    valid_time: dt.date | None = None

    def __post_init__(self):
        for z in (self.za, self.zb):
            if z.shape[1:] != LATENT_SHAPE:
                raise ValueError(f"latent spatial shape must be {LATENT_SHAPE}, got {z.shape[1:]}")
        for codes in (self.codes_a, self.codes_b):
            if codes.shape != LATENT_SHAPE:
                raise ValueError(f"code maps must have shape {LATENT_SHAPE}")

    def stacked(self) -> np.ndarray:
        """Channel-stacked latent [C_ZA + C_ZB, 30, 60]."""
        return np.concatenate([self.za, self.zb], axis=0)


def quantize(features: np.ndarray, book: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Snap per-site feature vectors to their nearest codebook entries.

    Parameters
    ----------
    features : [d, H, W] array
    book : Codebook with matching d

    Returns
    -------
    (values, codes) where values[:, i, j] is the selected entry and
    codes[i, j] its index.  Ties break to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[0] != book.d:
        raise ValueError(f"features must be [d={book.d}, H, W], got {features.shape}")
    d, h, w = features.shape
    flat = features.reshape(d, -1).T  # [sites, d]
    # Direct squared distances: exact for symmetric tie cases, no cancellation.
    diffs = flat[:, None, :] - book.entries[None, :, :]
    dist2 = np.einsum("skd,skd->sk", diffs, diffs)
    codes = np.argmin(dist2, axis=1)  # argmin returns the first (lowest) index on ties
    values = book.entries[codes].T.reshape(d, h, w)
    return values, codes.reshape(h, w)


def codebook_loss(features: np.ndarray, book: Codebook) -> float:
    """Mean over sites of the squared distance to the nearest entry."""
    features = np.asarray(features, dtype=np.float64)
    values, _ = quantize(features, book)
    per_site = ((features - values) ** 2).sum(axis=0)
    return float(per_site.mean())


def reconstruction_loss(original: FieldSet, reconstructed: np.ndarray,
                        weights: np.ndarray | None = None) -> float:
    """Latitude-weighted mean squared reconstruction error over a block."""
    recon = np.asarray(reconstructed, dtype=np.float64)
    if recon.shape != original.values.shape:
        raise ValueError(f"reconstruction shape {recon.shape} does not match {original.values.shape}")
    if weights is None:
        weights = latitude_weights(original.grid)
    return weighted_mean((original.values - recon) ** 2, weights, original.mask)


@dataclass
class PatchLinearCoder:
    """Seeded random linear projection of spatial patches; decode is its pseudoinverse.

    The physical grid is tiled into patches so the latent grid is exactly
    30 x 60.  A grid with 30k + 1 latitude rows first averages its two
    polar-most rows (rows 0 and 1) down to 30k rows; decode duplicates that
    merged row back out.
    """

    weight: np.ndarray      # [d, channels * ph * pw]
    pinv: np.ndarray        # [channels * ph * pw, d]
    n_channels: int
    grid: GridSpec
    patch: tuple[int, int]
    merge_polar_rows: bool
    seed: int

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    def _reduce_rows(self, values: np.ndarray) -> np.ndarray:
        if not self.merge_polar_rows:
            return values
        top = 0.5 * (values[:, 0:1, :] + values[:, 1:2, :])
        return np.concatenate([top, values[:, 2:, :]], axis=1)

    def _expand_rows(self, values: np.ndarray) -> np.ndarray:
        if not self.merge_polar_rows:
            return values
        return np.concatenate([values[:, 0:1, :], values], axis=1)

    def encode(self, values: np.ndarray) -> np.ndarray:
        """[C, n_lat, n_lon] block values -> [d, 30, 60] features."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.n_channels or values.shape[1:] != self.grid.shape:
            raise ValueError(f"expected block shaped [{self.n_channels}, {self.grid.n_lat}, {self.grid.n_lon}]")
        ph, pw = self.patch
        reduced = self._reduce_rows(values)
        c = self.n_channels
        patches = reduced.reshape(c, 30, ph, 60, pw).transpose(1, 3, 0, 2, 4).reshape(30, 60, c * ph * pw)
        feats = patches @ self.weight.T  # [30, 60, d]
        return feats.transpose(2, 0, 1)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """[d, 30, 60] latent -> [C, n_lat, n_lon] block values."""
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != (self.d, 30, 60):
            raise ValueError(f"expected latent shaped [{self.d}, 30, 60], got {latent.shape}")
        ph, pw = self.patch
        c = self.n_channels
        patches = latent.transpose(1, 2, 0) @ self.pinv.T  # [30, 60, c*ph*pw]
        reduced = patches.reshape(30, 60, c, ph, pw).transpose(2, 0, 3, 1, 4).reshape(c, 30 * ph, 60 * pw)
        return self._expand_rows(reduced)


def reference_coder(seed: int, channel_count: int, d: int, grid: GridSpec | None = None) -> PatchLinearCoder:
    """Deterministic patch-linear encoder/decoder pair for a given grid.

    Requires n_lon divisible by 60 and n_lat equal to 30k or 30k + 1 (the
    latter triggers the polar-row merge).
    """
    if grid is None:
        from .grid import paper_grid
        grid = paper_grid()
    if grid.n_lon % 60 != 0:
        raise ValueError(f"n_lon={grid.n_lon} is not divisible by the 60-column latent grid")
    if grid.n_lat % 30 == 0:
        merge = False
        rows = grid.n_lat
    elif (grid.n_lat - 1) % 30 == 0:
        merge = True
        rows = grid.n_lat - 1
    else:
        raise ValueError(f"n_lat={grid.n_lat} cannot be tiled onto the 30-row latent grid")
    ph, pw = rows // 30, grid.n_lon // 60
    rng = np.random.default_rng(seed)
    k = channel_count * ph * pw
    weight = rng.standard_normal((d, k)) / np.sqrt(k)
    return PatchLinearCoder(
        weight=weight,
        pinv=np.linalg.pinv(weight),
        n_channels=channel_count,
        grid=grid,
        patch=(ph, pw),
        merge_polar_rows=merge,
        seed=seed,
    )


def stage1_loss(original: FieldSet, book: Codebook, coder: PatchLinearCoder,
                commitment_coef: float = 0.0) -> float:
    """Embedding objective for one block: reconstruction plus codebook terms.

    ``commitment_coef`` scales an optional commitment term (numerically equal
    to the codebook term for a pure evaluator); it defaults to 0.
    """
    feats = coder.encode(original.values)
    values, _ = quantize(feats, book)
    recon = coder.decode(values)
    rec = reconstruction_loss(original, recon)
    cb = codebook_loss(feats, book)
    return rec + cb + commitment_coef * cb


def embed(x: FieldSet, coder_a: PatchLinearCoder, coder_b: PatchLinearCoder,
          book_a: Codebook, book_b: Codebook) -> LatentState:
    """Grouped embedding: atmosphere through (coder_a, book_a), boundary through (coder_b, book_b)."""
    a = x.block("a")
    b = x.block("b")
    za, codes_a = quantize(coder_a.encode(a.values), book_a)
    zb, codes_b = quantize(coder_b.encode(b.values), book_b)
    return LatentState(za=za, zb=zb, codes_a=codes_a, codes_b=codes_b, valid_time=x.valid_time)


def reconstruct(latent_stacked: np.ndarray, c_za: int, coder_a: PatchLinearCoder,
                coder_b: PatchLinearCoder, channels, grid: GridSpec,
                valid_time: dt.date | None = None) -> FieldSet:
    """Decode a stacked latent back to a physical FieldSet in channel order."""
    za = latent_stacked[:c_za]
    zb = latent_stacked[c_za:]
    a_vals = coder_a.decode(za)
    b_vals = coder_b.decode(zb)
    from .grid import ATMOSPHERE_SPHERES
    channels = tuple(channels)
    out = np.empty((len(channels),) + grid.shape, dtype=np.float64)
    ia = ib = 0
    for i, c in enumerate(channels):
        if c.sphere in ATMOSPHERE_SPHERES:
            out[i] = a_vals[ia]
            ia += 1
        else:
            out[i] = b_vals[ib]
            ib += 1
    if ia != a_vals.shape[0] or ib != b_vals.shape[0]:
        raise ValueError("channel list does not match decoded block sizes")
    return FieldSet(grid=grid, channels=channels, values=out, valid_time=valid_time)
