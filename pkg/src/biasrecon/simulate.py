"""Synthetic ground truth: phantoms, bias fields, noisy undersampled data.

Phantoms are nested ellipses warped by a seeded smooth deformation, one
intensity level per tissue plus a gentle smooth texture, all in [0, 1],
optionally with a low-order polynomial phase. Bias fields are built
directly in the cubic B-spline space (random control coefficients,
Gaussian-smoothed in the coefficient domain) so the smoothness contract
of BiasField holds exactly; amplitudes follow the 10-20% fluctuation
scale typical of the fields being modelled. Acquisition applies the coil
encoding to the biased image and adds seeded complex Gaussian noise on
the sampled rows only.

A dataset is a directory of per-sample containers plus a JSON manifest;
a disjointly seeded test set can carry reciprocal-style bias fields
(the inverse of a training-style field, renormalized) to model fields
unlike those the priors saw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .bias import BiasField
from .encoding import CoilSensitivities, KSpaceData, SamplingMask, apply_E, make_mask, simulate_coils
from .numerics import _bspline_basis, derive_seed, lowpass_gaussian

__all__ = [
    "PhantomSpec",
    "BiasSynthConfig",
    "NoiseConfig",
    "make_phantom",
    "synth_bias",
    "reciprocal_field",
    "simulate_acquisition",
    "make_dataset",
    "read_manifest",
    "read_sample",
]


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and contrast of one synthetic brain-like slice."""

    height: int
    width: int
    n_tissues: int = 3
    tissue_levels: tuple[float, ...] | None = None
    seed: int = 0
    texture_amplitude: float = 0.03
    phase_amplitude: float = 0.0  # radians, at most pi/4
    brain_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("phantom needs height and width >= 32")
        if self.n_tissues < 1:
            raise ValueError("n_tissues must be >= 1")
        levels = self.tissue_levels
        if levels is None:
            levels = tuple(np.linspace(0.4, 0.95, self.n_tissues))
            object.__setattr__(self, "tissue_levels", levels)
        levels = tuple(float(v) for v in levels)
        if len(levels) != self.n_tissues:
            raise ValueError("need one intensity level per tissue")
        if any(not 0.0 <= v <= 1.0 for v in levels):
            raise ValueError("tissue levels must lie in [0, 1]")
        if len(set(levels)) != len(levels):
            raise ValueError("tissue levels must be distinct")
        object.__setattr__(self, "tissue_levels", levels)
        if not 0.0 <= self.phase_amplitude <= math.pi / 4:
            raise ValueError("phase_amplitude must lie in [0, pi/4]")
        if not 0.0 <= self.texture_amplitude < 0.5:
            raise ValueError("texture_amplitude must lie in [0, 0.5)")
        if self.brain_mask is not None:
            m = np.asarray(self.brain_mask)
            if m.shape != (self.height, self.width):
                raise ValueError("brain_mask shape mismatch")
            if not m.any():
                raise ValueError("brain_mask is empty")


@dataclass(frozen=True)
class BiasSynthConfig:
    """Amplitude (fractional deviation from 1) and length-scale of a field."""

    amplitude: float = 0.15
    length_scale: float = 32.0  # pixels between spline control points
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.amplitude < 0.5:
            raise ValueError("amplitude must lie in (0, 0.5)")
        if self.length_scale < 2:
            raise ValueError("length_scale must be >= 2 pixels")


@dataclass(frozen=True)
class NoiseConfig:
    """Complex Gaussian noise level on sampled points."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _smooth_unit_field(shape: tuple[int, int], rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Seeded low-pass noise rescaled to max |.| = 1 (zero map if flat)."""
    field = lowpass_gaussian(rng.standard_normal(shape), sigma)
    field -= field.mean()
    peak = np.max(np.abs(field))
    return field / peak if peak > 0 else field


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render the phantom; returns (complex image, boolean brain mask).

    Tissues occupy equal-area elliptical rings of a head ellipse (tissue
    0 innermost), all warped by a seeded smooth deformation of a few
    pixels. Each tissue's intensity is its level times a gentle
    (1 + texture) modulation, clipped to [0, 1]. If phase_amplitude > 0 a
    seeded quadratic phase ramp is applied inside the mask.
    """
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)

    cy = h / 2.0 + rng.uniform(-0.02, 0.02) * h
    cx = w / 2.0 + rng.uniform(-0.02, 0.02) * w
    ay = 0.38 * h * (1.0 + rng.uniform(-0.05, 0.05))
    ax = 0.34 * w * (1.0 + rng.uniform(-0.05, 0.05))

    warp_sigma = min(h, w) / 8.0
    warp_amp = 0.03 * min(h, w)
    dy = warp_amp * _smooth_unit_field((h, w), rng, warp_sigma)
    dx = warp_amp * _smooth_unit_field((h, w), rng, warp_sigma)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rho = np.sqrt(((yy + dy - cy) / ay) ** 2 + ((xx + dx - cx) / ax) ** 2)

    mask = rho <= 1.0
    if spec.brain_mask is not None:
        mask &= np.asarray(spec.brain_mask).astype(bool)
    if not mask.any():
        raise ValueError("degenerate geometry: empty brain mask")

    n = spec.n_tissues
    inner = np.sqrt(np.arange(1, n) / n)  # equal-area ring boundaries, ascending
    tissue = np.searchsorted(inner, rho)  # 0 = innermost region, n-1 = outer ring

    mag = np.zeros((h, w))
    for t, level in enumerate(spec.tissue_levels):
        region = mask & (tissue == t)
        if not region.any():
            continue
        texture = _smooth_unit_field((h, w), rng, min(h, w) / 16.0)
        mag[region] = level * (1.0 + spec.texture_amplitude * texture[region])
    mag = np.clip(mag, 0.0, 1.0)

    img = mag.astype(np.complex128)
    if spec.phase_amplitude > 0:
        yn = (yy - h / 2.0) / (h / 2.0)
        xn = (xx - w / 2.0) / (w / 2.0)
        coef = rng.uniform(-1.0, 1.0, size=5)
        phase = (
            coef[0] * yn + coef[1] * xn
            + coef[2] * yn * yn + coef[3] * yn * xn + coef[4] * xn * xn
        )
        peak = np.max(np.abs(phase[mask]))
        if peak > 0:
            phase *= spec.phase_amplitude / peak
        img = mag * np.exp(1j * phase)
    return img, mask


def synth_bias(cfg: BiasSynthConfig, dims: tuple[int, int]) -> BiasField:
    """Smooth positive field with the requested fractional deviation.

    Random control coefficients on the spline grid at `length_scale`
    spacing are Gaussian-smoothed in the coefficient domain, evaluated
    through the spline basis, rescaled in the log domain, exponentiated
    and normalized to mean 1. The log-range width is solved so that the
    largest deviation of the normalized field from 1 equals `amplitude`
    (mean normalization would otherwise skew an endpoint-anchored range
    off the target whenever the draw is lopsided). The log-field is an
    exact member of the spline space at that spacing.
    """
    h, w = int(dims[0]), int(dims[1])
    basis_y = _bspline_basis(h, cfg.length_scale)
    basis_x = _bspline_basis(w, cfg.length_scale)
    rng = np.random.default_rng(cfg.seed)
    coef = rng.standard_normal((basis_y.shape[1], basis_x.shape[1]))
    coef = lowpass_gaussian(coef, 1.0)
    g = basis_y @ coef @ basis_x.T

    lo, hi = float(g.min()), float(g.max())
    a = cfg.amplitude
    if hi - lo <= 0:
        field = np.ones((h, w))
    else:
        shape = (g - lo) / (hi - lo)  # fixed profile in [0, 1]
        width = np.log1p(a) - np.log1p(-a)
        field = np.ones((h, w))
        for _ in range(40):
            field = np.exp(shape * width)
            field /= field.mean()
            dev = max(field.max() - 1.0, 1.0 - field.min())
            if abs(dev - a) <= 1e-12 * a:
                break
            width *= a / dev
    field /= field.mean()
    return BiasField(field=field, support_mask=np.ones((h, w), dtype=bool))


def reciprocal_field(bias: BiasField) -> BiasField:
    """Pointwise inverse of a field, renormalized to in-mask mean 1."""
    inv = 1.0 / bias.field
    inv /= inv[bias.support_mask].mean()
    return BiasField(field=inv, support_mask=bias.support_mask)


def simulate_acquisition(
    x: np.ndarray,
    bias: BiasField | np.ndarray | None,
    coils: CoilSensitivities,
    mask: SamplingMask,
    noise: NoiseConfig,
) -> KSpaceData:
    """Measure y = E(B x) + eta on the sampled rows.

    `bias=None` means B = 1. The noise is i.i.d. complex Gaussian per
    sampled k-space point with total standard deviation `noise.sigma`
    (sigma/sqrt(2) per real component), zero on unsampled rows, drawn
    from `noise.seed`.
    """
    arr = np.asarray(x, dtype=np.complex128)
    if bias is None:
        biased = arr
    else:
        field = bias.field if isinstance(bias, BiasField) else np.asarray(bias, dtype=np.float64)
        if field.shape != arr.shape:
            raise ValueError(f"bias shape {field.shape} != image shape {arr.shape}")
        biased = field * arr
    y = apply_E(biased, coils, mask)
    if noise.sigma == 0:
        return y
    rng = np.random.default_rng(noise.seed)
    rows = mask.kept_rows
    shape = (coils.n_coils, len(rows), mask.width)
    eta = (noise.sigma / np.sqrt(2.0)) * (
        rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    )
    data = y.coil_data.copy()
    data[:, rows, :] += eta
    return KSpaceData(coil_data=data, mask=mask)


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------


def _sample_name(index: int) -> str:
    return f"s{index:03d}"


def make_dataset(
    directory: str | Path,
    n_samples: int,
    accelerations: tuple[int, ...] = (2, 3, 4, 5),
    height: int = 128,
    width: int = 128,
    n_coils: int = 1,
    n_tissues: int = 3,
    bias_amplitude: float = 0.15,
    bias_length_scale: float = 32.0,
    noise_sigma: float = 0.0,
    phase_amplitude: float = 0.0,
    n_center_rows: int = 15,
    reciprocal_bias: bool = False,
    bias_base_seed: int | None = None,
    bias_base_weight: float = 0.75,
    seed: int = 0,
) -> dict:
    """Write a seeded dataset; returns the manifest dictionary.

    Per sample: ground-truth image x, bias field, brain mask, coil maps,
    and per acceleration a sampling mask (JSON) plus measured k-space y.

    With `bias_base_seed` set, every sample's log-field is the
    `bias_base_weight`-weighted mix of one shared field (drawn from that
    seed) and a per-sample field: images then share a common nonuniformity
    profile with individual variation, the way one scanner setup imprints
    a similar field on every acquisition. Datasets built with the same
    `bias_base_seed` share the profile even if their master seeds differ.

    With `reciprocal_bias=True` every field is the renormalized pointwise
    inverse of the field drawn as above, mimicking a test set whose
    nonuniformity was inverted relative to training data.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0.0 <= bias_base_weight <= 1.0:
        raise ValueError("bias_base_weight must lie in [0, 1]")
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    accelerations = tuple(int(r) for r in accelerations)

    coils = simulate_coils(height, width, n_coils)
    base_field = None
    if bias_base_seed is not None:
        base_field = synth_bias(
            BiasSynthConfig(
                amplitude=bias_amplitude, length_scale=bias_length_scale,
                seed=bias_base_seed,
            ),
            (height, width),
        )
    manifest: dict = {
        "n_samples": n_samples,
        "height": height,
        "width": width,
        "n_coils": n_coils,
        "n_tissues": n_tissues,
        "accelerations": list(accelerations),
        "bias_amplitude": bias_amplitude,
        "bias_length_scale": bias_length_scale,
        "noise_sigma": noise_sigma,
        "phase_amplitude": phase_amplitude,
        "n_center_rows": n_center_rows,
        "reciprocal_bias": reciprocal_bias,
        "bias_base_seed": bias_base_seed,
        "bias_base_weight": bias_base_weight,
        "seed": seed,
        "samples": [_sample_name(i) for i in range(n_samples)],
    }

    for i in range(n_samples):
        sdir = root / "samples" / _sample_name(i)
        sdir.mkdir(parents=True, exist_ok=True)
        spec = PhantomSpec(
            height=height, width=width, n_tissues=n_tissues,
            seed=derive_seed(seed, i, 0), phase_amplitude=phase_amplitude,
        )
        x, brain = make_phantom(spec)
        bias = synth_bias(
            BiasSynthConfig(
                amplitude=bias_amplitude, length_scale=bias_length_scale,
                seed=derive_seed(seed, i, 1),
            ),
            (height, width),
        )
        if base_field is not None:
            mixed = np.exp(
                bias_base_weight * np.log(base_field.field)
                + (1.0 - bias_base_weight) * np.log(bias.field)
            )
            bias = BiasField(
                field=mixed / mixed.mean(), support_mask=bias.support_mask
            )
        if reciprocal_bias:
            bias = reciprocal_field(bias)
        io.write_array(sdir / "x.brc", x)
        io.write_array(sdir / "bias.brc", bias.field)
        io.write_array(sdir / "brain_mask.brc", brain.astype(np.float64))
        io.write_array(sdir / "coils.brc", coils.maps)
        for r in accelerations:
            smask = make_mask(
                height, width, r, n_center=n_center_rows,
                seed=derive_seed(seed, i, 2, r),
            )
            y = simulate_acquisition(
                x, bias, coils, smask,
                NoiseConfig(sigma=noise_sigma, seed=derive_seed(seed, i, 3, r)),
            )
            (sdir / f"mask_R{r}.json").write_text(smask.to_json())
            io.write_array(sdir / f"y_R{r}.brc", y.coil_data)

    io.write_json(root / "manifest.json", manifest)
    return manifest


def read_manifest(directory: str | Path) -> dict:
    return io.read_json(Path(directory) / "manifest.json")


def read_sample_dir(sample_dir: str | Path, r: int | None = None) -> dict:
    """Load one sample directory; includes k-space for acceleration `r`."""
    sdir = Path(sample_dir)
    if not sdir.is_dir():
        raise FileNotFoundError(f"no sample directory {sdir}")
    brain = io.read_array(sdir / "brain_mask.brc").astype(bool)
    out = {
        "name": sdir.name,
        "x": io.read_array(sdir / "x.brc"),
        "bias": BiasField(field=io.read_array(sdir / "bias.brc"), support_mask=brain),
        "brain_mask": brain,
        "coils": CoilSensitivities(maps=io.read_array(sdir / "coils.brc")),
    }
    if r is not None:
        smask = SamplingMask.from_json((sdir / f"mask_R{r}.json").read_text())
        out["mask"] = smask
        out["y"] = KSpaceData(coil_data=io.read_array(sdir / f"y_R{r}.brc"), mask=smask)
    return out


def read_sample(directory: str | Path, index: int, r: int | None = None) -> dict:
    """Load sample `index` of a dataset written by make_dataset."""
    return read_sample_dir(Path(directory) / "samples" / _sample_name(index), r)
