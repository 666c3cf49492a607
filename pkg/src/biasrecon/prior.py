"""Patch-wise VAE prior and its gradient-ascent projection.

A small MLP variational autoencoder models the density of magnitude
patches (28x28 by default). The evidence lower bound is evaluated with a
seeded single-sample reparameterisation draw by default, so every quantity
here is deterministic given a seed. Backpropagation is written by hand in
numpy, both with respect to the network parameters (training) and with
respect to the input patches (the reconstruction-time ascent direction).

The prior projection applies a fixed number of ascent steps on the summed
patch ELBO of the image magnitude, with gradients of overlapping patches
averaged per pixel; the image phase is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .numerics import derive_seed

__all__ = [
    "PatchVAEParams",
    "TrainConfig",
    "PatchGrid",
    "init_params",
    "elbo",
    "elbo_terms",
    "elbo_grad_input",
    "train_vae",
    "make_patch_grid",
    "extract_patches",
    "assemble_patches",
    "p_prior",
    "save_params",
    "load_params",
]

_WEIGHT_NAMES = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "enc_w_mu", "enc_b_mu", "enc_w_lv", "enc_b_lv",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2",
    "dec_w_out", "dec_b_out",
)


@dataclass
class PatchVAEParams:
    """Weights of the patch VAE (two hidden layers on each side)."""

    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    enc_w_mu: np.ndarray
    enc_b_mu: np.ndarray
    enc_w_lv: np.ndarray
    enc_b_lv: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray
    dec_w_out: np.ndarray
    dec_b_out: np.ndarray
    latent_dim: int
    patch_size: int
    likelihood_sigma: float

    def __post_init__(self):
        d = self.patch_size * self.patch_size
        h1 = self.enc_w1.shape[1]
        h2 = self.enc_w2.shape[1]
        expected = {
            "enc_w1": (d, h1), "enc_b1": (h1,),
            "enc_w2": (h1, h2), "enc_b2": (h2,),
            "enc_w_mu": (h2, self.latent_dim), "enc_b_mu": (self.latent_dim,),
            "enc_w_lv": (h2, self.latent_dim), "enc_b_lv": (self.latent_dim,),
            "dec_w1": (self.latent_dim, self.dec_w1.shape[1]),
            "dec_b1": (self.dec_w1.shape[1],),
            "dec_w2": (self.dec_w1.shape[1], self.dec_w2.shape[1]),
            "dec_b2": (self.dec_w2.shape[1],),
            "dec_w_out": (self.dec_w2.shape[1], d), "dec_b_out": (d,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        if self.likelihood_sigma <= 0:
            raise ValueError("likelihood_sigma must be positive")

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _WEIGHT_NAMES}


@dataclass(frozen=True)
class TrainConfig:
    """Stochastic training settings; all randomness flows from `seed`."""

    n_iterations: int
    batch_size: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    patch_size: int = 28
    latent_dim: int = 32
    hidden_width: int = 256
    likelihood_sigma: float = 0.1
    n_mc: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.n_iterations < 1:
            raise ValueError("batch_size and n_iterations must be >= 1")


def init_params(
    patch_size: int = 28,
    latent_dim: int = 32,
    hidden_width: int = 256,
    likelihood_sigma: float = 0.1,
    seed: int = 0,
) -> PatchVAEParams:
    """Seeded 1/sqrt(fan_in) Gaussian weight init, zero biases."""
    rng = np.random.default_rng(seed)
    d, h = patch_size * patch_size, hidden_width

    def w(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    return PatchVAEParams(
        enc_w1=w(d, h), enc_b1=np.zeros(h),
        enc_w2=w(h, h), enc_b2=np.zeros(h),
        enc_w_mu=w(h, latent_dim), enc_b_mu=np.zeros(latent_dim),
        enc_w_lv=w(h, latent_dim), enc_b_lv=np.zeros(latent_dim),
        dec_w1=w(latent_dim, h), dec_b1=np.zeros(h),
        dec_w2=w(h, h), dec_b2=np.zeros(h),
        dec_w_out=w(h, d), dec_b_out=np.zeros(d),
        latent_dim=latent_dim, patch_size=patch_size,
        likelihood_sigma=likelihood_sigma,
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_patch_batch(patches: np.ndarray, params: PatchVAEParams) -> np.ndarray:
    d = params.patch_size * params.patch_size
    arr = np.asarray(patches, dtype=np.float64).reshape(-1, d)
    if not np.all(np.isfinite(arr)):
        raise ValueError("patch batch contains non-finite values")
    return arr


def draw_latent_noise(seed: int, n_mc: int, batch: int, latent_dim: int) -> np.ndarray:
    """Reparameterisation draws, shape (n_mc, batch, latent_dim).

    Exactly `np.random.default_rng(seed).standard_normal(shape)`; fixed here
    so that callers (and independent reimplementations) can reproduce the
    Monte-Carlo sample that elbo/elbo_grad_input consume for a given seed.
    """
    return np.random.default_rng(seed).standard_normal((n_mc, batch, latent_dim))


def _forward(p: np.ndarray, params: PatchVAEParams, eps: np.ndarray) -> dict:
    n_mc, batch, _ = eps.shape
    d = p.shape[1]
    a1 = p @ params.enc_w1 + params.enc_b1
    h1 = _softplus(a1)
    a2 = h1 @ params.enc_w2 + params.enc_b2
    h2 = _softplus(a2)
    mu = h2 @ params.enc_w_mu + params.enc_b_mu
    lv = h2 @ params.enc_w_lv + params.enc_b_lv
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
        raise RuntimeError("VAE encoder produced non-finite activations (diverged)")
    std = np.exp(0.5 * lv)
    z = (mu[None] + std[None] * eps).reshape(n_mc * batch, -1)
    d1 = z @ params.dec_w1 + params.dec_b1
    g1 = _softplus(d1)
    d2 = g1 @ params.dec_w2 + params.dec_b2
    g2 = _softplus(d2)
    m = g2 @ params.dec_w_out + params.dec_b_out
    if not np.all(np.isfinite(m)):
        raise RuntimeError("VAE decoder produced non-finite activations (diverged)")
    sig2 = params.likelihood_sigma**2
    resid = np.tile(p, (n_mc, 1)) - m
    log_norm = -0.5 * d * np.log(2.0 * np.pi * sig2)
    recon = log_norm - np.sum(resid**2, axis=1) / (2.0 * sig2)
    recon = recon.reshape(n_mc, batch).mean(axis=0)
    kl = 0.5 * np.sum(np.exp(lv) + mu**2 - 1.0 - lv, axis=1)
    return dict(
        p=p, eps=eps, a1=a1, h1=h1, a2=a2, h2=h2, mu=mu, lv=lv, std=std,
        z=z, d1=d1, g1=g1, d2=d2, g2=g2, resid=resid,
        recon=recon, kl=kl, n_mc=n_mc, batch=batch,
    )


def _backward(
    cache: dict,
    params: PatchVAEParams,
    upstream: np.ndarray,
    recon_scale: float = 1.0,
    kl_scale: float = 1.0,
    want_param_grads: bool = False,
    want_input_grad: bool = True,
):
    """Gradients of sum_b upstream[b] * (recon_scale*recon_b - kl_scale*kl_b)."""
    n_mc, batch = cache["n_mc"], cache["batch"]
    sig2 = params.likelihood_sigma**2
    w_mc = np.tile(upstream, n_mc)[:, None] / n_mc

    # reconstruction term through the decoder output
    dm = recon_scale * w_mc * cache["resid"] / sig2  # d(obj)/dm
    dg2 = dm @ params.dec_w_out.T
    dd2 = dg2 * _sigmoid(cache["d2"])
    dg1 = dd2 @ params.dec_w2.T
    dd1 = dg1 * _sigmoid(cache["d1"])
    dz = (dd1 @ params.dec_w1.T).reshape(n_mc, batch, -1)

    dmu = dz.sum(axis=0)
    dlv = 0.5 * np.sum(dz * cache["eps"], axis=0) * cache["std"]
    # KL term (closed form, no Monte-Carlo)
    dmu -= kl_scale * upstream[:, None] * cache["mu"]
    dlv -= kl_scale * upstream[:, None] * 0.5 * (np.exp(cache["lv"]) - 1.0)

    dh2 = dmu @ params.enc_w_mu.T + dlv @ params.enc_w_lv.T
    da2 = dh2 * _sigmoid(cache["a2"])
    dh1 = da2 @ params.enc_w2.T
    da1 = dh1 * _sigmoid(cache["a1"])

    grad_input = None
    if want_input_grad:
        # encoder path plus the direct dependence of the Gaussian likelihood
        # on the patch values: d/dp of -(p-m)^2/(2 sig2) is -(p-m)/sig2
        grad_input = da1 @ params.enc_w1.T - dm.reshape(n_mc, batch, -1).sum(axis=0)

    param_grads = None
    if want_param_grads:
        p, z = cache["p"], cache["z"]
        param_grads = {
            "dec_w_out": cache["g2"].T @ dm, "dec_b_out": dm.sum(axis=0),
            "dec_w2": cache["g1"].T @ dd2, "dec_b2": dd2.sum(axis=0),
            "dec_w1": z.T @ dd1, "dec_b1": dd1.sum(axis=0),
            "enc_w_mu": cache["h2"].T @ dmu, "enc_b_mu": dmu.sum(axis=0),
            "enc_w_lv": cache["h2"].T @ dlv, "enc_b_lv": dlv.sum(axis=0),
            "enc_w2": cache["h1"].T @ da2, "enc_b2": da2.sum(axis=0),
            "enc_w1": p.T @ da1, "enc_b1": da1.sum(axis=0),
        }
    return grad_input, param_grads


def elbo(patches: np.ndarray, params: PatchVAEParams, n_mc: int = 1, seed: int = 0) -> np.ndarray:
    """Per-patch ELBO with a seeded Monte-Carlo expectation.

    ELBO = E_q[log p(patch | z)] - KL(q(z | patch) || N(0, I)) with a fixed
    Gaussian likelihood width; the KL is closed-form. Deterministic per seed.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    p = _as_patch_batch(patches, params)
    eps = draw_latent_noise(seed, n_mc, p.shape[0], params.latent_dim)
    cache = _forward(p, params, eps)
    return cache["recon"] - cache["kl"]


def elbo_terms(
    patches: np.ndarray, params: PatchVAEParams, n_mc: int = 1, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """(reconstruction term, KL term) per patch, same draws as `elbo`."""
    p = _as_patch_batch(patches, params)
    eps = draw_latent_noise(seed, n_mc, p.shape[0], params.latent_dim)
    cache = _forward(p, params, eps)
    return cache["recon"], cache["kl"]


def elbo_grad_input(
    patches: np.ndarray,
    params: PatchVAEParams,
    n_mc: int = 1,
    seed: int = 0,
    component: str = "total",
) -> np.ndarray:
    """Exact gradient of the seeded-MC ELBO w.r.t. the input patch values.

    Uses the same draws as `elbo` for the same seed. `component` selects
    "total", "recon" or "kl" (the KL reaches the input through the encoder).
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if component not in ("total", "recon", "kl"):
        raise ValueError(f"unknown component {component!r}")
    p = _as_patch_batch(patches, params)
    eps = draw_latent_noise(seed, n_mc, p.shape[0], params.latent_dim)
    cache = _forward(p, params, eps)
    recon_scale = 0.0 if component == "kl" else 1.0
    kl_scale = 0.0 if component == "recon" else 1.0
    grad, _ = _backward(
        cache, params, np.ones(p.shape[0]), recon_scale, kl_scale,
        want_param_grads=False, want_input_grad=True,
    )
    return grad.reshape(np.asarray(patches).shape)


def train_vae(
    images: np.ndarray, config: TrainConfig
) -> tuple[PatchVAEParams, np.ndarray]:
    """Train the patch VAE on random patches drawn with replacement.

    `images` is (n_images, H, W) of magnitudes. Per iteration a batch of
    patch locations is sampled uniformly, one bias-corrected adaptive
    moment update is applied to every parameter, and the batch-mean ELBO
    is appended to the returned trace. Deterministic per config.seed.
    """
    stack = np.asarray(images, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.size == 0:
        raise ValueError("images must be (n_images, H, W) and nonempty")
    n_img, h, w = stack.shape
    ps = config.patch_size
    if h < ps or w < ps:
        raise ValueError(f"images {h}x{w} are smaller than the patch size {ps}")

    params = init_params(
        patch_size=ps,
        latent_dim=config.latent_dim,
        hidden_width=config.hidden_width,
        likelihood_sigma=config.likelihood_sigma,
        seed=derive_seed(config.seed, 0),
    )
    rng = np.random.default_rng(derive_seed(config.seed, 1))
    names = list(params.weights())
    m_acc = {n: np.zeros_like(getattr(params, n)) for n in names}
    v_acc = {n: np.zeros_like(getattr(params, n)) for n in names}
    b1, b2, eps_opt = config.adam_beta1, config.adam_beta2, config.adam_eps
    trace = np.zeros(config.n_iterations)

    for it in range(config.n_iterations):
        idx = rng.integers(0, n_img, size=config.batch_size)
        oy = rng.integers(0, h - ps + 1, size=config.batch_size)
        ox = rng.integers(0, w - ps + 1, size=config.batch_size)
        batch = np.stack(
            [stack[i, y : y + ps, x : x + ps].ravel() for i, y, x in zip(idx, oy, ox)]
        )
        eps = rng.standard_normal((config.n_mc, config.batch_size, config.latent_dim))
        cache = _forward(batch, params, eps)
        mean_elbo = float(np.mean(cache["recon"] - cache["kl"]))
        if not np.isfinite(mean_elbo):
            raise RuntimeError(f"training diverged (non-finite ELBO) at iteration {it}")
        trace[it] = mean_elbo
        _, grads = _backward(
            cache, params, np.full(config.batch_size, 1.0 / config.batch_size),
            want_param_grads=True, want_input_grad=False,
        )
        if config.learning_rate != 0.0:
            t = it + 1
            for n in names:
                g = grads[n]
                m_acc[n] = b1 * m_acc[n] + (1 - b1) * g
                v_acc[n] = b2 * v_acc[n] + (1 - b2) * g * g
                m_hat = m_acc[n] / (1 - b1**t)
                v_hat = v_acc[n] / (1 - b2**t)
                # ascent: the objective is the ELBO itself
                getattr(params, n)[...] += config.learning_rate * m_hat / (np.sqrt(v_hat) + eps_opt)
    return params, trace


# ---------------------------------------------------------------------------
# overlapping patch grid and the prior projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Stride-regular overlapping patch cover of an image."""

    height: int
    width: int
    patch_size: int
    stride: int
    origins_y: np.ndarray
    origins_x: np.ndarray
    weight: np.ndarray  # per-pixel patch multiplicity, > 0 everywhere

    @property
    def n_patches(self) -> int:
        return len(self.origins_y) * len(self.origins_x)


def _axis_origins(n: int, ps: int, stride: int) -> np.ndarray:
    origins = list(range(0, n - ps + 1, stride))
    if origins[-1] != n - ps:
        origins.append(n - ps)
    return np.asarray(origins, dtype=np.int64)


def make_patch_grid(height: int, width: int, patch_size: int, stride: int | None = None) -> PatchGrid:
    """Build the overlap grid; default stride is half the patch size."""
    if stride is None:
        stride = max(1, patch_size // 2)
    if patch_size > height or patch_size > width:
        raise ValueError(f"patch size {patch_size} exceeds image {height}x{width}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oy = _axis_origins(height, patch_size, stride)
    ox = _axis_origins(width, patch_size, stride)
    weight = np.zeros((height, width))
    for y in oy:
        for x in ox:
            weight[y : y + patch_size, x : x + patch_size] += 1.0
    return PatchGrid(
        height=height, width=width, patch_size=patch_size, stride=stride,
        origins_y=oy, origins_x=ox, weight=weight,
    )


def extract_patches(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Gather all grid patches, shape (n_patches, ps, ps)."""
    arr = np.asarray(img)
    if arr.shape != (grid.height, grid.width):
        raise ValueError(f"image shape {arr.shape} != grid shape {(grid.height, grid.width)}")
    ps = grid.patch_size
    out = np.empty((grid.n_patches, ps, ps), dtype=arr.dtype)
    k = 0
    for y in grid.origins_y:
        for x in grid.origins_x:
            out[k] = arr[y : y + ps, x : x + ps]
            k += 1
    return out


def assemble_patches(values: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Scatter-add per-patch values back onto the image grid (no averaging)."""
    ps = grid.patch_size
    vals = np.asarray(values).reshape(grid.n_patches, ps, ps)
    out = np.zeros((grid.height, grid.width), dtype=vals.dtype)
    k = 0
    for y in grid.origins_y:
        for x in grid.origins_x:
            out[y : y + ps, x : x + ps] += vals[k]
            k += 1
    return out


def p_prior(
    x: np.ndarray,
    params: PatchVAEParams,
    grid: PatchGrid,
    n_steps: int = 10,
    alpha: float = 1e-4,
    seed: int = 0,
    n_mc: int = 1,
) -> np.ndarray:
    """Prior projection: magnitude-only ELBO ascent over the patch grid.

    Per step, patch gradients of the ELBO w.r.t. the current magnitude are
    averaged where patches overlap and one ascent step of size alpha is
    taken; magnitudes are clamped at zero, the input phase is kept exactly.
    Step `i` draws its Monte-Carlo sample with derive_seed(seed, i).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    arr = np.asarray(x, dtype=np.complex128)
    mag = np.abs(arr)
    phasor = np.exp(1j * np.angle(arr))
    for step in range(n_steps):
        if alpha == 0.0:
            break
        patches = extract_patches(mag, grid)
        grad = elbo_grad_input(patches, params, n_mc=n_mc, seed=derive_seed(seed, step))
        mag = np.maximum(mag + alpha * (assemble_patches(grad, grid) / grid.weight), 0.0)
    return mag * phasor


# ---------------------------------------------------------------------------
# parameter serialisation
# ---------------------------------------------------------------------------


def save_params(params: PatchVAEParams, directory: str | Path, extra: dict | None = None) -> None:
    """Write one container per weight plus a JSON manifest.

    `extra` entries are merged into the manifest (provenance such as the
    training data flavour); they may not shadow the structural keys.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in params.weights().items():
        io.write_array(out / f"{name}.brc", arr)
    manifest = {
        "latent_dim": params.latent_dim,
        "patch_size": params.patch_size,
        "sigma": params.likelihood_sigma,
        "arch": {
            "kind": "mlp-2x",
            "hidden_width": int(params.enc_w1.shape[1]),
        },
        "tensors": sorted(_WEIGHT_NAMES),
    }
    if extra:
        clash = set(extra) & set(manifest)
        if clash:
            raise ValueError(f"extra manifest keys shadow structural keys: {sorted(clash)}")
        manifest.update(extra)
    io.write_json(out / "manifest.json", manifest)


def load_params(directory: str | Path) -> PatchVAEParams:
    src = Path(directory)
    manifest = io.read_json(src / "manifest.json")
    weights = {name: io.read_array(src / f"{name}.brc") for name in _WEIGHT_NAMES}
    return PatchVAEParams(
        latent_dim=int(manifest["latent_dim"]),
        patch_size=int(manifest["patch_size"]),
        likelihood_sigma=float(manifest["sigma"]),
        **weights,
    )
