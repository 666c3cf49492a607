"""Tests for sampling masks, coil maps and the encoding operator pair.

The operator is checked against an explicitly materialized matrix built
column by column, and adjointness is verified through the inner-product
identity on random vectors.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from biasrecon.encoding import (
    CoilSensitivities,
    KSpaceData,
    SamplingMask,
    apply_E,
    apply_EH,
    center_rows,
    make_mask,
    simulate_coils,
)
from biasrecon.numerics import derive_seed, fft2_unitary


def materialize_E(coils, mask):
    """Explicit matrix of the encoding operator, one basis vector at a time."""
    h, w = coils.shape
    cols = []
    for p in range(h * w):
        e = np.zeros(h * w, dtype=np.complex128)
        e[p] = 1.0
        ke = apply_E(e.reshape(h, w), coils, mask)
        cols.append(ke.coil_data.ravel())
    return np.array(cols).T  # (n_coils*h*w, h*w)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def test_mask_r1_keeps_all_rows():
    m = make_mask(32, 32, r=1, n_center=15, seed=0)
    assert_allclose(m.kept_rows, np.arange(32))


def test_mask_counts_and_center_block():
    m = make_mask(208, 208, r=4, n_center=15, seed=3)
    assert len(m.kept_rows) == 52  # round(208 / 4)
    assert set(range(97, 112)) <= set(m.kept_rows.tolist())


def test_mask_center_block_always_present():
    for r in (2, 3, 4, 5):
        for seed in range(5):
            m = make_mask(128, 128, r=r, n_center=15, seed=seed)
            assert set(center_rows(128, 15).tolist()) <= set(m.kept_rows.tolist())
            assert len(m.kept_rows) == round(128 / r)


def test_mask_determinism_and_seed_sensitivity():
    a = make_mask(128, 128, r=3, n_center=15, seed=9)
    b = make_mask(128, 128, r=3, n_center=15, seed=9)
    c = make_mask(128, 128, r=3, n_center=15, seed=10)
    assert_allclose(a.kept_rows, b.kept_rows)
    assert not np.array_equal(a.kept_rows, c.kept_rows)


def test_mask_json_roundtrip():
    m = make_mask(64, 48, r=3, n_center=9, seed=4)
    m2 = SamplingMask.from_json(m.to_json())
    assert_allclose(m2.kept_rows, m.kept_rows)
    assert (m2.height, m2.width, m2.r_nominal) == (64, 48, 3.0)


def test_mask_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_mask(32, 32, r=0.5)
    with pytest.raises(ValueError):
        make_mask(32, 32, r=4, n_center=15)  # round(32/4)=8 < 15
    with pytest.raises(ValueError):
        SamplingMask(height=8, width=8, r_nominal=2.0, kept_rows=np.array([1, 1]))
    with pytest.raises(ValueError):
        SamplingMask(height=8, width=8, r_nominal=2.0, kept_rows=np.array([9]))


# ---------------------------------------------------------------------------
# coils
# ---------------------------------------------------------------------------


def test_coils_rss_normalised():
    for n in (1, 2, 4, 8):
        coils = simulate_coils(24, 20, n)
        assert_allclose(coils.rss(), 1.0, atol=1e-10)


def test_single_coil_is_unit_modulus():
    coils = simulate_coils(16, 16, 1)
    assert_allclose(np.abs(coils.maps[0]), 1.0, atol=1e-12)


def test_coils_rejects_zero_coils():
    with pytest.raises(ValueError):
        simulate_coils(16, 16, 0)


# ---------------------------------------------------------------------------
# encoding operator
# ---------------------------------------------------------------------------


def test_full_mask_single_uniform_coil_is_centered_fft():
    # with all rows kept and S = 1 the operator reduces to the unitary FFT
    # with the phase-encode axis centered (DC moved to row h//2)
    coils = CoilSensitivities(maps=np.ones((1, 12, 10), dtype=np.complex128))
    mask = make_mask(12, 10, r=1, n_center=4, seed=0)
    rng = np.random.default_rng(21)
    x = rng.standard_normal((12, 10)) + 1j * rng.standard_normal((12, 10))
    y = apply_E(x, coils, mask)
    assert_allclose(y.coil_data[0], np.fft.fftshift(fft2_unitary(x), axes=0), atol=1e-12)
    # and E^H E = identity
    assert_allclose(apply_EH(y, coils), x, atol=1e-12)


def test_apply_E_zero_maps_to_zero():
    coils = simulate_coils(8, 8, 2)
    mask = make_mask(8, 8, r=2, n_center=2, seed=0)
    y = apply_E(np.zeros((8, 8)), coils, mask)
    assert_allclose(y.coil_data, 0.0)
    assert_allclose(apply_EH(y, coils), 0.0)


def test_unsampled_rows_are_zero():
    coils = simulate_coils(16, 16, 3)
    mask = make_mask(16, 16, r=4, n_center=2, seed=5)
    rng = np.random.default_rng(22)
    y = apply_E(rng.standard_normal((16, 16)), coils, mask)
    off = ~mask.row_selector()
    assert np.all(y.coil_data[:, off, :] == 0)


def test_apply_E_matches_explicit_matrix():
    coils = simulate_coils(16, 16, 2)
    mask = make_mask(16, 16, r=2, n_center=4, seed=1)
    E = materialize_E(coils, mask)
    rng = np.random.default_rng(23)
    x = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    direct = apply_E(x, coils, mask).coil_data.ravel()
    assert_allclose(direct, E @ x.ravel(), atol=1e-10)
    # adjoint application matches the conjugate-transposed matrix
    y = rng.standard_normal((2, 16, 16)) + 1j * rng.standard_normal((2, 16, 16))
    y[:, ~mask.row_selector(), :] = 0
    yk = KSpaceData(coil_data=y, mask=mask)
    assert_allclose(apply_EH(yk, coils).ravel(), E.conj().T @ y.ravel(), atol=1e-10)


@pytest.mark.parametrize("n_coils,r", [(1, 2), (2, 3), (4, 4), (3, 5)])
def test_adjoint_identity(n_coils, r):
    rng = np.random.default_rng(derive_seed(24, n_coils, r))
    coils = simulate_coils(32, 24, n_coils)
    mask = make_mask(32, 24, r=r, n_center=5, seed=n_coils)
    x = rng.standard_normal((32, 24)) + 1j * rng.standard_normal((32, 24))
    y = rng.standard_normal((n_coils, 32, 24)) + 1j * rng.standard_normal((n_coils, 32, 24))
    y[:, ~mask.row_selector(), :] = 0
    yk = KSpaceData(coil_data=y, mask=mask)
    lhs = np.vdot(apply_E(x, coils, mask).coil_data, yk.coil_data)
    rhs = np.vdot(x, apply_EH(yk, coils))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_partial_isometry_on_sampled_rows():
    mask = make_mask(24, 24, r=3, n_center=4, seed=2)
    rng = np.random.default_rng(25)
    y = rng.standard_normal((4, 24, 24)) + 1j * rng.standard_normal((4, 24, 24))
    y[:, ~mask.row_selector(), :] = 0
    # single unit-modulus coil: E E^H is the identity on any masked data,
    # which is what makes the data-consistency step an exact projection
    c1 = simulate_coils(24, 24, 1)
    y1 = KSpaceData(coil_data=y[:1].copy(), mask=mask)
    once = apply_E(apply_EH(y1, c1), c1, mask)
    assert_allclose(once.coil_data, y1.coil_data, atol=1e-10)
    # multiple coils couple k-space rows through the sensitivity profiles:
    # E E^H is then only a PSD contraction, never expanding the data norm
    c4 = simulate_coils(24, 24, 4)
    yk = KSpaceData(coil_data=y, mask=mask)
    cur = yk
    for _ in range(3):
        cur = apply_E(apply_EH(cur, c4), c4, mask)
        assert np.linalg.norm(cur.coil_data) <= np.linalg.norm(yk.coil_data) * (1 + 1e-12)


def test_kspace_invariant_enforced():
    mask = make_mask(8, 8, r=2, n_center=2, seed=0)
    bad = np.ones((1, 8, 8), dtype=np.complex128)  # nonzero at unsampled rows
    with pytest.raises(ValueError):
        KSpaceData(coil_data=bad, mask=mask)


def test_shape_mismatch_rejected():
    coils = simulate_coils(8, 8, 1)
    mask = make_mask(8, 8, r=2, n_center=2, seed=0)
    with pytest.raises(ValueError):
        apply_E(np.zeros((4, 4)), coils, mask)
    mask16 = make_mask(16, 16, r=2, n_center=2, seed=0)
    with pytest.raises(ValueError):
        apply_E(np.zeros((8, 8)), coils, mask16)
