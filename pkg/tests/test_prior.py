"""Tests for the patch-VAE prior: ELBO values, gradients, training, ascent."""

from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from biasrecon.numerics import derive_seed
from biasrecon.prior import (
    PatchVAEParams,
    TrainConfig,
    assemble_patches,
    draw_latent_noise,
    elbo,
    elbo_grad_input,
    elbo_terms,
    extract_patches,
    init_params,
    load_params,
    make_patch_grid,
    p_prior,
    save_params,
    train_vae,
)

# ---------------------------------------------------------------------------
# independent reference: a from-scratch forward pass and ELBO
# ---------------------------------------------------------------------------


def softplus_ref(x):
    # numerically stable alternative form, written independently on purpose
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def elbo_reference(patches, params, n_mc=1, seed=0):
    """Straight-line reimplementation: returns (elbo, recon, kl) per patch."""
    d = params.patch_size * params.patch_size
    p = np.asarray(patches, dtype=np.float64).reshape(-1, d)
    batch = p.shape[0]
    eps = np.random.default_rng(seed).standard_normal((n_mc, batch, params.latent_dim))

    h1 = softplus_ref(p @ params.enc_w1 + params.enc_b1)
    h2 = softplus_ref(h1 @ params.enc_w2 + params.enc_b2)
    mu = h2 @ params.enc_w_mu + params.enc_b_mu
    lv = h2 @ params.enc_w_lv + params.enc_b_lv

    sig2 = params.likelihood_sigma**2
    recon = np.zeros(batch)
    for k in range(n_mc):
        z = mu + np.exp(0.5 * lv) * eps[k]
        g1 = softplus_ref(z @ params.dec_w1 + params.dec_b1)
        g2 = softplus_ref(g1 @ params.dec_w2 + params.dec_b2)
        m = g2 @ params.dec_w_out + params.dec_b_out
        recon += (
            -0.5 * d * np.log(2.0 * np.pi * sig2)
            - np.sum((p - m) ** 2, axis=1) / (2.0 * sig2)
        )
    recon /= n_mc
    kl = 0.5 * np.sum(np.exp(lv) + mu**2 - 1.0 - lv, axis=1)
    return recon - kl, recon, kl


def tiny_params(seed=0, patch_size=3, latent_dim=2, hidden_width=7):
    return init_params(
        patch_size=patch_size,
        latent_dim=latent_dim,
        hidden_width=hidden_width,
        likelihood_sigma=0.25,
        seed=seed,
    )


def random_patches(n, patch_size, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, patch_size, patch_size))


# ---------------------------------------------------------------------------
# ELBO values against the reference
# ---------------------------------------------------------------------------


def test_latent_noise_is_plain_seeded_standard_normal():
    want = np.random.default_rng(123).standard_normal((2, 5, 4))
    npt.assert_array_equal(draw_latent_noise(123, 2, 5, 4), want)


@pytest.mark.parametrize("n_mc,seed", [(1, 0), (1, 17), (3, 0), (4, 99)])
def test_elbo_matches_straightline_reference(n_mc, seed):
    params = tiny_params(seed=5)
    patches = random_patches(7, params.patch_size, seed=2)
    got = elbo(patches, params, n_mc=n_mc, seed=seed)
    want, _, _ = elbo_reference(patches, params, n_mc=n_mc, seed=seed)
    npt.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_elbo_terms_match_reference_and_recombine():
    params = tiny_params(seed=1)
    patches = random_patches(5, params.patch_size, seed=3)
    recon, kl = elbo_terms(patches, params, n_mc=2, seed=4)
    want_elbo, want_recon, want_kl = elbo_reference(patches, params, n_mc=2, seed=4)
    npt.assert_allclose(recon, want_recon, rtol=1e-12)
    npt.assert_allclose(kl, want_kl, rtol=1e-12)
    npt.assert_allclose(recon - kl, want_elbo, rtol=1e-12)
    npt.assert_allclose(elbo(patches, params, n_mc=2, seed=4), recon - kl, rtol=1e-15)


def test_kl_term_is_closed_form_and_draw_independent():
    params = tiny_params(seed=8)
    patches = random_patches(6, params.patch_size, seed=9)
    _, kl_a = elbo_terms(patches, params, n_mc=1, seed=0)
    _, kl_b = elbo_terms(patches, params, n_mc=5, seed=31)
    npt.assert_allclose(kl_a, kl_b, rtol=1e-15)
    assert np.all(kl_a >= 0.0)  # KL divergence is nonnegative


def test_elbo_deterministic_per_seed_and_seed_sensitive():
    params = tiny_params(seed=2)
    patches = random_patches(4, params.patch_size, seed=6)
    npt.assert_array_equal(
        elbo(patches, params, n_mc=2, seed=10), elbo(patches, params, n_mc=2, seed=10)
    )
    assert np.any(
        elbo(patches, params, n_mc=1, seed=10) != elbo(patches, params, n_mc=1, seed=11)
    )


def test_elbo_accepts_flat_and_stacked_patch_layouts():
    params = tiny_params(seed=3)
    patches = random_patches(4, params.patch_size, seed=7)
    flat = patches.reshape(4, -1)
    npt.assert_array_equal(
        elbo(patches, params, seed=1), elbo(flat, params, seed=1)
    )


def test_elbo_rejects_bad_inputs():
    params = tiny_params()
    patches = random_patches(3, params.patch_size, seed=0)
    with pytest.raises(ValueError):
        elbo(patches, params, n_mc=0)
    with pytest.raises(ValueError):
        elbo_grad_input(patches, params, n_mc=0)
    bad = patches.copy()
    bad[1, 0, 0] = np.nan
    with pytest.raises(ValueError):
        elbo(bad, params)
    with pytest.raises(ValueError):
        elbo(np.ones(10), params)  # not a multiple of the patch area
    with pytest.raises(ValueError):
        elbo_grad_input(patches, params, component="reconstruction")


# ---------------------------------------------------------------------------
# input gradients against central finite differences
# ---------------------------------------------------------------------------


def fd_gradient(fun, p0, h=1e-6):
    """Central finite differences of a scalar-field-per-patch function."""
    grad = np.zeros_like(p0)
    flat = grad.ravel()
    base = p0.ravel()
    for i in range(base.size):
        bump = np.zeros_like(base)
        bump[i] = h
        plus = fun((base + bump).reshape(p0.shape)).sum()
        minus = fun((base - bump).reshape(p0.shape)).sum()
        flat[i] = (plus - minus) / (2.0 * h)
    return grad


@pytest.mark.parametrize("n_mc,seed", [(1, 0), (3, 21)])
def test_input_gradient_matches_finite_differences(n_mc, seed):
    params = tiny_params(seed=4)
    patches = random_patches(2, params.patch_size, seed=5)
    got = elbo_grad_input(patches, params, n_mc=n_mc, seed=seed)
    want = fd_gradient(lambda p: elbo(p, params, n_mc=n_mc, seed=seed), patches)
    npt.assert_allclose(got, want, rtol=1e-5, atol=1e-7)


def test_gradient_components_are_additive_and_match_terms():
    params = tiny_params(seed=6)
    patches = random_patches(3, params.patch_size, seed=8)
    total = elbo_grad_input(patches, params, seed=2, component="total")
    recon = elbo_grad_input(patches, params, seed=2, component="recon")
    kl = elbo_grad_input(patches, params, seed=2, component="kl")
    npt.assert_allclose(total, recon + kl, rtol=1e-12, atol=1e-14)

    # each component against finite differences of the matching term
    want_recon = fd_gradient(
        lambda p: elbo_terms(p, params, seed=2)[0], patches
    )
    want_kl = fd_gradient(
        lambda p: -elbo_terms(p, params, seed=2)[1], patches
    )
    npt.assert_allclose(recon, want_recon, rtol=1e-5, atol=1e-7)
    npt.assert_allclose(kl, want_kl, rtol=1e-5, atol=1e-7)


def test_input_gradient_preserves_patch_layout():
    params = tiny_params(seed=7)
    patches = random_patches(4, params.patch_size, seed=9)
    stacked = elbo_grad_input(patches, params, seed=3)
    flat = elbo_grad_input(patches.reshape(4, -1), params, seed=3)
    assert stacked.shape == patches.shape
    npt.assert_array_equal(stacked.reshape(4, -1), flat)


def zero_like_fields(params, names):
    return replace(params, **{n: np.zeros_like(getattr(params, n)) for n in names})


def test_zeroed_latent_heads_give_exactly_zero_kl():
    # with mu = 0 and log-var = 0 the posterior equals the prior
    params = zero_like_fields(
        tiny_params(seed=12), ("enc_w_mu", "enc_b_mu", "enc_w_lv", "enc_b_lv")
    )
    patches = random_patches(5, params.patch_size, seed=13)
    _, kl = elbo_terms(patches, params, n_mc=3, seed=1)
    npt.assert_array_equal(kl, 0.0)


def test_zero_residual_reconstruction_term_is_the_gaussian_constant():
    # a zeroed output layer makes the decoder emit its bias for every draw;
    # feeding that same vector as the patches leaves only the normalization
    params = zero_like_fields(tiny_params(seed=14), ("dec_w_out",))
    d = params.patch_size**2
    rng = np.random.default_rng(15)
    params = replace(params, dec_b_out=rng.uniform(0.2, 0.8, size=d))
    patches = np.tile(params.dec_b_out, (4, 1))
    recon, _ = elbo_terms(patches, params, n_mc=2, seed=2)
    want = -0.5 * d * np.log(2.0 * np.pi * params.likelihood_sigma**2)
    npt.assert_allclose(recon, want, rtol=1e-12)


def test_constant_network_gradient_matches_the_analytic_form():
    # constant latent heads and a constant decoder cut every input pathway
    # except the direct residual, whose gradient is (b_out - p) / sigma^2
    params = zero_like_fields(
        tiny_params(seed=16),
        ("enc_w_mu", "enc_b_mu", "enc_w_lv", "enc_b_lv", "dec_w_out"),
    )
    d = params.patch_size**2
    rng = np.random.default_rng(17)
    params = replace(params, dec_b_out=rng.uniform(0.2, 0.8, size=d))
    patches = random_patches(3, params.patch_size, seed=18)
    flat = patches.reshape(3, -1)
    want = (params.dec_b_out - flat) / params.likelihood_sigma**2
    npt.assert_allclose(
        elbo_grad_input(flat, params, n_mc=2, seed=4, component="recon"),
        want, rtol=1e-12, atol=1e-15,
    )
    npt.assert_array_equal(
        elbo_grad_input(flat, params, n_mc=2, seed=4, component="kl"), 0.0
    )
    # patches equal to the decoder bias sit exactly at the stationary point
    fixed = np.tile(params.dec_b_out, (2, 1))
    npt.assert_array_equal(elbo_grad_input(fixed, params, n_mc=2, seed=4), 0.0)


def test_reconstruction_gradient_is_linear_in_likelihood_precision():
    params = tiny_params(seed=19)
    sharper = replace(params, likelihood_sigma=params.likelihood_sigma / np.sqrt(2.0))
    patches = random_patches(4, params.patch_size, seed=20)
    base = elbo_grad_input(patches, params, n_mc=2, seed=5, component="recon")
    doubled = elbo_grad_input(patches, sharper, n_mc=2, seed=5, component="recon")
    npt.assert_allclose(doubled, 2.0 * base, rtol=1e-12)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def smooth_training_images(n=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    imgs = [
        np.abs(np.sin(2 * np.pi * (a * yy + b * xx)))
        for a, b in rng.uniform(0.5, 2.0, size=(n, 2))
    ]
    return np.stack(imgs)


def tiny_train_config(n_iterations=150, seed=0):
    return TrainConfig(
        n_iterations=n_iterations,
        batch_size=8,
        learning_rate=1e-3,
        seed=seed,
        patch_size=6,
        latent_dim=3,
        hidden_width=16,
        likelihood_sigma=0.2,
    )


def test_training_raises_elbo_and_returns_full_trace():
    imgs = smooth_training_images()
    params, trace = train_vae(imgs, tiny_train_config())
    assert trace.shape == (150,)
    assert np.all(np.isfinite(trace))
    assert np.mean(trace[-30:]) > np.mean(trace[:30])
    assert params.patch_size == 6 and params.latent_dim == 3


def test_training_is_deterministic_per_seed():
    imgs = smooth_training_images()
    pa, ta = train_vae(imgs, tiny_train_config(n_iterations=40, seed=12))
    pb, tb = train_vae(imgs, tiny_train_config(n_iterations=40, seed=12))
    npt.assert_array_equal(ta, tb)
    for name, arr in pa.weights().items():
        npt.assert_array_equal(arr, pb.weights()[name])
    pc, _ = train_vae(imgs, tiny_train_config(n_iterations=40, seed=13))
    assert np.any(pc.enc_w1 != pa.enc_w1)


def test_zero_learning_rate_keeps_the_initialization():
    imgs = smooth_training_images()
    cfg = TrainConfig(
        n_iterations=5, batch_size=4, learning_rate=0.0, seed=3,
        patch_size=6, latent_dim=3, hidden_width=16,
    )
    params, _ = train_vae(imgs, cfg)
    ref = init_params(
        patch_size=6, latent_dim=3, hidden_width=16,
        likelihood_sigma=cfg.likelihood_sigma, seed=derive_seed(3, 0),
    )
    for name, arr in params.weights().items():
        npt.assert_array_equal(arr, ref.weights()[name])


def test_training_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train_vae(np.empty((0, 8, 8)), tiny_train_config())
    with pytest.raises(ValueError):
        train_vae(np.ones((2, 4, 4)), tiny_train_config())  # smaller than patch
    with pytest.raises(ValueError):
        TrainConfig(n_iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(n_iterations=10, batch_size=0)


# ---------------------------------------------------------------------------
# patch grid, extraction, assembly
# ---------------------------------------------------------------------------


def test_patch_grid_covers_image_and_counts_overlaps():
    grid = make_patch_grid(20, 17, 6, stride=4)
    assert grid.origins_y[0] == 0 and grid.origins_y[-1] == 20 - 6
    assert grid.origins_x[0] == 0 and grid.origins_x[-1] == 17 - 6
    assert np.all(np.diff(grid.origins_y) <= 4)
    assert np.all(grid.weight >= 1.0)
    assert grid.n_patches == len(grid.origins_y) * len(grid.origins_x)
    # weights literally count how many patches cover each pixel
    cover = np.zeros((20, 17))
    for y in grid.origins_y:
        for x in grid.origins_x:
            cover[y : y + 6, x : x + 6] += 1
    npt.assert_array_equal(grid.weight, cover)


def test_patch_grid_default_stride_is_half_patch():
    grid = make_patch_grid(32, 32, 8)
    assert grid.stride == 4


def test_extract_then_assemble_ones_gives_the_weight_map():
    grid = make_patch_grid(15, 11, 4, stride=3)
    ones = np.ones((15, 11))
    npt.assert_array_equal(assemble_patches(extract_patches(ones, grid), grid), grid.weight)


def test_extract_and_assemble_are_adjoint():
    rng = np.random.default_rng(44)
    grid = make_patch_grid(18, 13, 5, stride=2)
    img = rng.standard_normal((18, 13))
    pat = rng.standard_normal((grid.n_patches, 5, 5))
    lhs = np.sum(extract_patches(img, grid) * pat)
    rhs = np.sum(img * assemble_patches(pat, grid))
    npt.assert_allclose(lhs, rhs, rtol=1e-13)


def test_patch_grid_rejections():
    with pytest.raises(ValueError):
        make_patch_grid(8, 8, 9)
    with pytest.raises(ValueError):
        make_patch_grid(8, 8, 4, stride=0)
    grid = make_patch_grid(8, 8, 4)
    with pytest.raises(ValueError):
        extract_patches(np.ones((9, 8)), grid)


# ---------------------------------------------------------------------------
# prior ascent on an image
# ---------------------------------------------------------------------------


def test_prior_ascent_keeps_phase_and_nonnegative_magnitude():
    rng = np.random.default_rng(5)
    params = tiny_params(seed=9, patch_size=4)
    grid = make_patch_grid(12, 12, 4, stride=2)
    mag = rng.uniform(0.1, 1.0, size=(12, 12))
    phase = rng.uniform(-np.pi, np.pi, size=(12, 12))
    x = mag * np.exp(1j * phase)
    out = p_prior(x, params, grid, n_steps=3, alpha=1e-3, seed=1)
    assert np.all(np.abs(out) >= 0.0)
    keep = np.abs(out) > 1e-9
    npt.assert_allclose(np.angle(out)[keep], phase[keep], atol=1e-12)


def test_prior_single_step_increases_summed_elbo_for_small_alpha():
    rng = np.random.default_rng(15)
    params = tiny_params(seed=10, patch_size=4)
    grid = make_patch_grid(12, 12, 4, stride=2)
    x = rng.uniform(0.1, 1.0, size=(12, 12)).astype(complex)
    seed = 77
    before = elbo(
        extract_patches(np.abs(x), grid), params, seed=derive_seed(seed, 0)
    ).sum()
    out = p_prior(x, params, grid, n_steps=1, alpha=1e-6, seed=seed)
    after = elbo(
        extract_patches(np.abs(out), grid), params, seed=derive_seed(seed, 0)
    ).sum()
    assert after > before


def test_prior_with_zero_step_size_is_a_no_op():
    rng = np.random.default_rng(21)
    params = tiny_params(seed=22, patch_size=4)
    grid = make_patch_grid(12, 12, 4, stride=2)
    real = rng.uniform(0.1, 1.0, size=(12, 12))
    npt.assert_array_equal(p_prior(real, params, grid, n_steps=4, alpha=0.0), real)
    cplx = real * np.exp(1j * rng.uniform(-np.pi, np.pi, size=(12, 12)))
    npt.assert_allclose(p_prior(cplx, params, grid, n_steps=4, alpha=0.0), cplx,
                        rtol=1e-15)


def test_prior_on_a_single_patch_equals_direct_gradient_ascent():
    # a grid holding one full-size patch removes all assembly/averaging:
    # the loop must reduce to plain ascent on the patch gradient
    params = tiny_params(seed=23, patch_size=28)
    grid = make_patch_grid(28, 28, 28)
    assert grid.weight.shape == (28, 28) and np.all(grid.weight == 1.0)
    rng = np.random.default_rng(24)
    x = rng.uniform(0.1, 1.0, (28, 28)) * np.exp(1j * rng.normal(0, 0.4, (28, 28)))
    seed, alpha, n_steps = 31, 1e-3, 3
    out = p_prior(x, params, grid, n_steps=n_steps, alpha=alpha, seed=seed)
    mag = np.abs(x)
    for step in range(n_steps):
        grad = elbo_grad_input(mag[None], params, n_mc=1, seed=derive_seed(seed, step))
        mag = np.maximum(mag + alpha * grad[0], 0.0)
    npt.assert_allclose(out, mag * np.exp(1j * np.angle(x)), rtol=0,
                        atol=1e-12 * mag.max())


def test_prior_ascent_is_deterministic_and_validates():
    params = tiny_params(seed=11, patch_size=4)
    grid = make_patch_grid(10, 10, 4, stride=3)
    x = np.random.default_rng(3).uniform(0.2, 1.0, size=(10, 10))
    a = p_prior(x, params, grid, n_steps=2, alpha=1e-4, seed=6)
    b = p_prior(x, params, grid, n_steps=2, alpha=1e-4, seed=6)
    npt.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        p_prior(x, params, grid, n_steps=0)
    with pytest.raises(ValueError):
        p_prior(x, params, grid, alpha=-1e-4)


# ---------------------------------------------------------------------------
# parameter serialisation
# ---------------------------------------------------------------------------


def test_save_load_roundtrip_is_exact(tmp_path):
    params = tiny_params(seed=12)
    save_params(params, tmp_path / "vae", extra={"note": "roundtrip"})
    back = load_params(tmp_path / "vae")
    assert back.latent_dim == params.latent_dim
    assert back.patch_size == params.patch_size
    assert back.likelihood_sigma == params.likelihood_sigma
    for name, arr in params.weights().items():
        npt.assert_array_equal(arr, back.weights()[name])


def test_save_params_rejects_shadowing_extras(tmp_path):
    params = tiny_params(seed=13)
    with pytest.raises(ValueError):
        save_params(params, tmp_path / "vae", extra={"latent_dim": 5})


def test_params_validation_catches_mismatched_shapes():
    params = tiny_params(seed=14)
    bad = {name: arr.copy() for name, arr in params.weights().items()}
    bad["dec_w_out"] = bad["dec_w_out"][:, :-1]
    with pytest.raises(ValueError):
        PatchVAEParams(
            latent_dim=params.latent_dim,
            patch_size=params.patch_size,
            likelihood_sigma=params.likelihood_sigma,
            **bad,
        )
