import numpy as np
import pytest

from srank_lab.errors import NumericError, ShapeError
from srank_lab.linalg import (
    as_matrix,
    frobenius_norm,
    matmul,
    numeric_rank,
    read_matrix_text,
    spectral_norm,
    svd,
    transpose,
    write_matrix_text,
)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 5))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_annihilator():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(4, 3))
    assert np.array_equal(matmul(m, np.zeros((3, 2))), np.zeros((4, 2)))


def test_matmul_hand_case():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    assert np.array_equal(out, [[17.0], [39.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))


def test_transpose_involution_and_fixed_point():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(4, 7))
    assert np.array_equal(transpose(transpose(m)), m)
    sym = m[:4, :4] + m[:4, :4].T
    assert np.array_equal(transpose(sym), sym)
    assert transpose([[1.0, 2.0, 3.0]]).shape == (3, 1)


def test_frobenius_norm_cases():
    assert frobenius_norm(np.zeros((3, 2))) == 0.0
    assert frobenius_norm(np.eye(5)) == pytest.approx(np.sqrt(5), rel=1e-15)
    assert frobenius_norm([[3.0, 4.0]]) == pytest.approx(5.0, rel=1e-15)


def test_svd_identity():
    f = svd(np.eye(2))
    assert f.rank == 2
    assert np.allclose(f.s, [1.0, 1.0])


def test_svd_exact_rank_deficiency():
    f = svd(np.diag([3.0, 0.0]), rank_tol=1e-12)
    assert f.rank == 1
    assert f.s[0] == pytest.approx(3.0, rel=1e-14)


def test_svd_reconstruction_random():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(5, 3))
    f = svd(m)
    assert frobenius_norm(f.reconstruct() - m) <= 1e-8 * frobenius_norm(m)


def test_svd_zero_matrix():
    f = svd(np.zeros((4, 2)))
    assert f.rank == 0
    assert f.u.shape == (4, 0) and f.v.shape == (2, 0)
    assert np.array_equal(f.reconstruct(), np.zeros((4, 2)))


def test_svd_rank_tol_validation():
    with pytest.raises(ValueError):
        svd(np.eye(2), rank_tol=0.0)
    with pytest.raises(ValueError):
        numeric_rank(np.eye(2), rank_tol=1.5)


def test_svd_sign_convention():
    rng = np.random.default_rng(4)
    for _ in range(20):
        f = svd(rng.normal(size=(6, 4)))
        for j in range(f.rank):
            col = f.u[:, j]
            assert col[int(np.argmax(np.abs(col)))] > 0.0


def test_svd_determinism_bit_identical():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(17, 9))
    f1, f2 = svd(m), svd(m)
    assert np.array_equal(f1.u, f2.u)
    assert np.array_equal(f1.s, f2.s)
    assert np.array_equal(f1.v, f2.v)


@pytest.mark.parametrize("seed", range(5))
def test_svd_invariants_random(seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(200):
        m, n = rng.integers(1, 33, size=2)
        a = rng.normal(size=(m, n))
        f = svd(a)
        assert frobenius_norm(f.reconstruct() - a) <= 1e-8 * frobenius_norm(a)
        assert np.abs(f.u.T @ f.u - np.eye(f.rank)).max() <= 1e-10
        assert np.abs(f.v.T @ f.v - np.eye(f.rank)).max() <= 1e-10
        assert (np.diff(f.s) <= 0.0).all()
        # independent cross-check of singular values
        ref = np.linalg.svd(a, compute_uv=False)
        assert np.abs(f.s - ref[: f.rank]).max() <= 1e-10 * max(ref[0], 1.0)


def test_spectral_norm_cases():
    assert spectral_norm(np.eye(7)) == pytest.approx(1.0, rel=1e-14)
    assert spectral_norm(np.diag([2.0, 1.0, 1.0])) == pytest.approx(2.0, rel=1e-14)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_random_probe_one_sided():
    rng = np.random.default_rng(6)
    m = rng.normal(size=(8, 6))
    reported = spectral_norm(m)
    probes = rng.normal(size=(10_000, 6))
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    sampled = np.linalg.norm(probes @ m.T, axis=1).max()
    assert sampled <= reported * (1.0 + 1e-12)
    assert reported - sampled < 0.05 * reported


def test_spectral_norm_matches_svd_top():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = rng.normal(size=tuple(rng.integers(2, 20, size=2)))
        assert spectral_norm(a) == svd(a).s[0]


def test_numeric_rank_cases():
    assert numeric_rank(np.eye(4)) == 4
    rng = np.random.default_rng(8)
    outer = np.outer(rng.normal(size=5), rng.normal(size=3))
    assert numeric_rank(outer) == 1
    assert numeric_rank(np.zeros((2, 2))) == 0


def test_numeric_rank_sum_of_rank_one_terms():
    rng = np.random.default_rng(9)
    for k in (1, 2, 3, 4):
        m = np.zeros((8, 6))
        for _ in range(k):
            m += np.outer(rng.normal(size=8), rng.normal(size=6))
        assert numeric_rank(m) == k


def test_norm_inequality_chain():
    rng = np.random.default_rng(10)
    for _ in range(100):
        m = rng.normal(size=tuple(rng.integers(1, 17, size=2)))
        spec = spectral_norm(m)
        frob = frobenius_norm(m)
        rank = numeric_rank(m)
        assert spec <= frob * (1.0 + 1e-12)
        assert frob <= np.sqrt(rank) * spec * (1.0 + 1e-12)


def test_jacobi_nonconvergence_reports_residual():
    # the cap is generous; verify the error type exists and carries a payload,
    # by calling the internal routine with an adversarially tiny sweep budget
    import srank_lab.linalg as linalg

    rng = np.random.default_rng(11)
    a = rng.normal(size=(12, 12))
    old = linalg._MAX_SWEEPS
    linalg._MAX_SWEEPS = 1
    try:
        with pytest.raises(NumericError) as err:
            linalg.svd(a)
        assert err.value.residual > 0.0
    finally:
        linalg._MAX_SWEEPS = old


def test_matrix_text_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    m = rng.normal(size=(4, 3)) * 10.0 ** rng.integers(-8, 8, size=(4, 3))
    path = tmp_path / "m.txt"
    write_matrix_text(path, m)
    back = read_matrix_text(path)
    assert np.array_equal(back, m)
    first = path.read_text().splitlines()[0]
    assert first == "4 3"


def test_matrix_text_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 2\n1.0 2.0\n3.0\n")
    with pytest.raises(ShapeError):
        read_matrix_text(path)
