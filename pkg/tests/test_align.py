import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvgae.align import RigidTransform, aligned_loglik, aligned_rmsd, kabsch_align, rmsd
from cvgae.gaussian import LOG_SQRT_2PI, GaussianSet, gaussian_loglik

from test_molgraph import random_rotation


def test_rmsd_examples():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert rmsd(x, x) == 0.0
    a = np.zeros((2, 3))
    b = a.copy()
    b[:, 0] += 1.0
    assert rmsd(a, b) == 1.0


def test_rmsd_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    s = 0.0
    for i in range(6):
        for k in range(3):
            s += (a[i][k] - b[i][k]) ** 2
    assert abs(rmsd(a, b) - (s / 6) ** 0.5) < 1e-12


def test_rmsd_mask():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    mask = np.array([True, False, True, False])
    assert rmsd(a, b, mask) == rmsd(a[mask], b[mask])
    with pytest.raises(ValueError):
        rmsd(a, b, np.zeros(4, dtype=bool))
    with pytest.raises(ValueError):
        rmsd(a, b[:3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rmsd_pseudometric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert rmsd(a, b) == rmsd(b, a)
    assert rmsd(a, b) > 0.0
    assert rmsd(a, a.copy()) == 0.0


def test_self_alignment_is_identity():
    x = np.random.default_rng(3).normal(size=(6, 3))
    aligned, t, r = kabsch_align(x, x)
    assert r < 1e-9
    assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-9
    assert np.max(np.abs(t.translation)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recovers_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=2.0, size=(int(rng.integers(3, 12)), 3))
    q = random_rotation(rng)
    y = x @ q.T + rng.normal(scale=5.0, size=3)
    aligned, t, r = kabsch_align(x, y)
    assert r < 1e-9
    assert np.max(np.abs(t.rotation.T @ t.rotation - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9
    np.testing.assert_allclose(t.apply(x), aligned)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_alignment_is_optimal(seed):
    rng = np.random.default_rng(seed)
    ref, tgt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    best = aligned_rmsd(tgt, ref)
    aligned, _, _ = kabsch_align(ref, tgt)
    for _ in range(50):
        moved = aligned @ random_rotation(rng).T
        moved = moved - moved.mean(0) + aligned.mean(0) + rng.normal(scale=0.3, size=3)
        assert best <= rmsd(moved, tgt) + 1e-12


def test_rotation_always_proper_for_mirror_image():
    tet = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
    mirror = tet * np.array([-1.0, 1.0, 1.0])
    _, t, r = kabsch_align(mirror, tet)
    assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9
    assert r > 0.1


def test_mask_fits_subset_and_moves_all():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    q = random_rotation(rng)
    y = x @ q.T + 1.0
    y[4:] += rng.normal(size=(2, 3)) * 3  # spoil the unmasked atoms
    mask = np.array([True] * 4 + [False] * 2)
    aligned, t, r = kabsch_align(x, y, mask)
    assert r < 1e-9
    np.testing.assert_allclose(aligned[4:], x[4:] @ q.T + 1.0, atol=1e-9)


def test_degenerate_sets():
    one = np.array([[1.0, 2.0, 3.0]])
    aligned, _, r = kabsch_align(one, np.zeros((1, 3)))
    assert r == 0.0 and np.all(aligned == 0.0)
    line = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    other = line[:, [1, 0, 2]]
    assert kabsch_align(line, other)[2] < 1e-9
    with pytest.raises(ValueError):
        kabsch_align(line, other, np.zeros(3, dtype=bool))


def test_identity_transform():
    x = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(RigidTransform.identity().apply(x), x)


# -- alignment-invariant likelihood ---------------------------------------------------


def test_aligned_loglik_perfect_reconstruction():
    x = np.random.default_rng(5).normal(size=(5, 3))
    g = GaussianSet.from_arrays(x, np.ones((5, 3)))
    assert abs(aligned_loglik(g, x).item() - (-3 * 5 * LOG_SQRT_2PI)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aligned_loglik_rigid_invariance_and_bound(seed):
    rng = np.random.default_rng(seed)
    mu, ref = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    g = GaussianSet.from_arrays(mu, np.ones((6, 3)))
    moved = ref @ random_rotation(rng).T + rng.normal(scale=4.0, size=3)
    a = aligned_loglik(g, ref).item()
    assert abs(a - aligned_loglik(g, moved).item()) < 1e-9
    assert a >= gaussian_loglik(ref, g).item() - 1e-12
