"""Cartesian MRI encoding: sampling masks, coil sensitivities, E and E^H.

The encoding operator maps an image to measured k-space per coil:
coil-sensitivity weighting, unitary 2D Fourier transform, then removal of
whole phase-encode rows. Stored k-space is centered along the row
(phase-encode) axis — DC sits at row height//2 — so a mask's central rows
are the low-frequency profiles, matching the scanner convention. k-space
is kept dense with zeros at unsampled rows. The centering shift is a
permutation, so with root-sum-of-squares-normalised coils E^H remains the
exact adjoint of E, and for a single unit-modulus coil E is a partial
isometry, which makes the data-consistency step in the solver an exact
projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import fft2_unitary, ifft2_unitary

__all__ = [
    "SamplingMask",
    "CoilSensitivities",
    "KSpaceData",
    "make_mask",
    "simulate_coils",
    "apply_E",
    "apply_EH",
]


@dataclass(frozen=True)
class SamplingMask:
    """Set of acquired phase-encode rows for one Cartesian acquisition."""

    height: int
    width: int
    r_nominal: float
    kept_rows: np.ndarray  # sorted unique row indices
    seed: int | None = None

    def __post_init__(self):
        rows = np.asarray(self.kept_rows, dtype=np.int64)
        if rows.size == 0:
            raise ValueError("mask keeps no rows")
        if rows.size != np.unique(rows).size:
            raise ValueError("kept_rows contains duplicates")
        if rows.min() < 0 or rows.max() >= self.height:
            raise ValueError("kept_rows out of range")
        object.__setattr__(self, "kept_rows", np.sort(rows))

    def row_selector(self) -> np.ndarray:
        """Boolean (height,) array, True at acquired rows."""
        sel = np.zeros(self.height, dtype=bool)
        sel[self.kept_rows] = True
        return sel

    def to_json(self) -> str:
        doc = {
            "height": self.height,
            "width": self.width,
            "R": self.r_nominal,
            "seed": self.seed,
            "kept_rows": [int(r) for r in self.kept_rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "SamplingMask":
        doc = json.loads(text)
        return SamplingMask(
            height=int(doc["height"]),
            width=int(doc["width"]),
            r_nominal=float(doc["R"]),
            kept_rows=np.asarray(doc["kept_rows"], dtype=np.int64),
            seed=None if doc.get("seed") is None else int(doc["seed"]),
        )


def center_rows(height: int, n_center: int) -> np.ndarray:
    """Indices of the fully sampled central block of phase-encode rows."""
    start = (height - n_center + 1) // 2
    return np.arange(start, start + n_center, dtype=np.int64)


def make_mask(
    height: int,
    width: int,
    r: float,
    n_center: int = 15,
    seed: int = 0,
) -> SamplingMask:
    """Random Cartesian row mask with a fully sampled central block.

    Keeps round(height / r) rows in total: the n_center central rows
    always, the rest drawn uniformly without replacement from the
    remaining rows (deterministic per seed).
    """
    if r < 1:
        raise ValueError(f"acceleration factor must be >= 1, got {r}")
    if n_center > height:
        raise ValueError("n_center exceeds image height")
    n_keep = int(round(height / r))
    if n_keep < n_center:
        raise ValueError(
            f"round(height/R) = {n_keep} is smaller than the {n_center} central rows"
        )
    center = center_rows(height, n_center)
    outside = np.setdiff1d(np.arange(height, dtype=np.int64), center)
    n_extra = n_keep - n_center
    rng = np.random.default_rng(seed)
    extra = rng.choice(outside, size=n_extra, replace=False) if n_extra else np.empty(0, np.int64)
    rows = np.union1d(center, extra.astype(np.int64))
    return SamplingMask(height=height, width=width, r_nominal=float(r), kept_rows=rows, seed=seed)


@dataclass(frozen=True)
class CoilSensitivities:
    """Per-coil complex sensitivity maps, RSS-normalised to 1 everywhere."""

    maps: np.ndarray  # (n_coils, height, width) complex128

    def __post_init__(self):
        arr = np.asarray(self.maps, dtype=np.complex128)
        if arr.ndim != 3:
            raise ValueError(f"maps must be (n_coils, H, W), got shape {arr.shape}")
        object.__setattr__(self, "maps", arr)

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]

    def rss(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.maps) ** 2, axis=0))


def simulate_coils(
    height: int,
    width: int,
    n_coils: int,
    profile_sigma: float | None = None,
    phase_amplitude: float = 0.5,
) -> CoilSensitivities:
    """Smooth synthetic receive coils, RSS-normalised.

    Each coil is a Gaussian magnitude profile centered at one of n equally
    spaced points on a circle around the image, with a smooth low-order
    phase ramp. n_coils = 1 yields a unit-modulus map (pure phase), for
    which the encoding operator is an exact partial isometry.
    """
    if n_coils < 1:
        raise ValueError("need at least one coil")
    if profile_sigma is None:
        profile_sigma = 0.6 * max(height, width)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    radius = 0.6 * float(np.hypot(height, width))
    maps = np.zeros((n_coils, height, width), dtype=np.complex128)
    for c in range(n_coils):
        ang = 2.0 * np.pi * c / n_coils
        py, px = cy + radius * np.sin(ang), cx + radius * np.cos(ang)
        dist2 = (yy - py) ** 2 + (xx - px) ** 2
        mag = np.exp(-0.5 * dist2 / profile_sigma**2)
        phase = phase_amplitude * (
            np.cos(ang) * (yy - cy) / max(height, 1)
            + np.sin(ang) * (xx - cx) / max(width, 1)
            + 0.15 * np.cos(ang + 1.0)
        )
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= rss
    return CoilSensitivities(maps=maps)


@dataclass(frozen=True)
class KSpaceData:
    """Measured multi-coil k-space; rows outside the mask are exactly zero."""

    coil_data: np.ndarray  # (n_coils, height, width) complex128
    mask: SamplingMask

    def __post_init__(self):
        arr = np.asarray(self.coil_data, dtype=np.complex128)
        if arr.ndim != 3:
            raise ValueError(f"coil_data must be (n_coils, H, W), got {arr.shape}")
        if arr.shape[1:] != (self.mask.height, self.mask.width):
            raise ValueError("coil_data shape disagrees with mask dimensions")
        sel = self.mask.row_selector()
        if np.any(arr[:, ~sel, :] != 0):
            raise ValueError("k-space has nonzero samples at unacquired rows")
        object.__setattr__(self, "coil_data", arr)

    @property
    def n_coils(self) -> int:
        return self.coil_data.shape[0]


def _check_shapes(x: np.ndarray, coils: CoilSensitivities, mask: SamplingMask | None = None):
    if x.shape != coils.shape:
        raise ValueError(f"image shape {x.shape} != coil map shape {coils.shape}")
    if mask is not None and (mask.height, mask.width) != coils.shape:
        raise ValueError("mask dimensions disagree with coil maps")


def apply_E(x: np.ndarray, coils: CoilSensitivities, mask: SamplingMask) -> KSpaceData:
    """Forward encoding: per coil, mask ∘ row-centered fft2_unitary(S_c * x)."""
    arr = np.asarray(x, dtype=np.complex128)
    _check_shapes(arr, coils, mask)
    sel = mask.row_selector()
    out = np.zeros((coils.n_coils,) + coils.shape, dtype=np.complex128)
    for c in range(coils.n_coils):
        k = np.fft.fftshift(fft2_unitary(coils.maps[c] * arr), axes=0)
        out[c, sel, :] = k[sel, :]
    return KSpaceData(coil_data=out, mask=mask)


def apply_EH(y: KSpaceData, coils: CoilSensitivities) -> np.ndarray:
    """Adjoint encoding: sum_c conj(S_c) * ifft2_unitary(row-uncentered y_c)."""
    _check_shapes(np.empty(y.coil_data.shape[1:]), coils)
    if y.n_coils != coils.n_coils:
        raise ValueError(f"k-space has {y.n_coils} coils, maps have {coils.n_coils}")
    out = np.zeros(coils.shape, dtype=np.complex128)
    for c in range(coils.n_coils):
        out += np.conj(coils.maps[c]) * ifft2_unitary(np.fft.ifftshift(y.coil_data[c], axes=0))
    return out
