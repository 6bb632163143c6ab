import numpy as np
import pytest

from unirobust.numerics import ContractError, ShapeError
from unirobust.unitary import (
    check_norm_preservation,
    project_unitary,
    qr_decompose,
    sign_correct,
    unitarity_residual,
)


def test_qr_identity_up_to_column_signs():
    q, r = qr_decompose(np.eye(3))
    assert np.allclose(np.abs(q), np.eye(3), atol=1e-14)
    assert np.allclose(np.abs(r), np.eye(3), atol=1e-14)
    assert np.allclose(q @ r, np.eye(3), atol=1e-14)


def test_qr_rank_deficient_still_triangular():
    w = np.array([[3.0, 0.0], [4.0, 0.0]])
    q, r = qr_decompose(w)
    assert abs(r[1, 1]) < 1e-12
    assert abs(r[1, 0]) < 1e-12
    assert np.allclose(q @ r, w, atol=1e-12)
    assert unitarity_residual(q) < 1e-12


def test_qr_random_reconstruction():
    rng = np.random.default_rng(0)
    for _ in range(10):
        w = rng.standard_normal((8, 8))
        q, r = qr_decompose(w)
        rel = np.linalg.norm(q @ r - w) / np.linalg.norm(w)
        assert rel < 1e-10
        assert np.max(np.abs(np.tril(r, -1))) < 1e-12
        assert unitarity_residual(q) < 1e-10


def test_qr_rejects_non_square():
    with pytest.raises(ShapeError):
        qr_decompose(np.zeros((2, 3)))


def test_sign_correct_conventions():
    assert np.array_equal(sign_correct(np.diag([3.0, -2.0])).diag, [1.0, -1.0])
    assert np.array_equal(sign_correct(np.diag([0.0, 5.0])).diag, [1.0, 1.0])
    assert np.array_equal(sign_correct(np.diag([-1e-15, 1.0])).diag, [-1.0, 1.0])


def test_project_unitary_fixes_rotation():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert np.allclose(project_unitary(rot), rot, atol=1e-12)


def test_project_unitary_diagonal_case():
    u = project_unitary(np.diag([2.0, -3.0]))
    assert np.allclose(u, np.diag([1.0, -1.0]), atol=1e-14)


def test_project_unitary_hand_worked_case():
    u = project_unitary(np.array([[0.0, -2.0], [3.0, 0.0]]))
    assert np.allclose(u, [[0.0, -1.0], [1.0, 0.0]], atol=1e-14)


def test_project_unitary_singular_input_still_unitary():
    u = project_unitary(np.array([[3.0, 0.0], [4.0, 0.0]]))
    assert unitarity_residual(u) < 1e-9


def test_projection_idempotent_and_unitary():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w = rng.standard_normal((6, 6))
        u = project_unitary(w)
        assert unitarity_residual(u) < 1e-9
        assert np.max(np.abs(project_unitary(u) - u)) < 1e-9
        assert abs(abs(np.linalg.det(u)) - 1.0) < 1e-8


def test_positive_diagonal_convention_for_nonsingular_input():
    rng = np.random.default_rng(2)
    for _ in range(10):
        w = rng.standard_normal((8, 8))
        q_ref, r_ref = np.linalg.qr(w)
        signs = np.where(np.diagonal(r_ref) >= 0.0, 1.0, -1.0)
        assert np.max(np.abs(project_unitary(w) - q_ref * signs)) < 1e-8


def test_norm_preservation_zero_cases():
    u = project_unitary(np.random.default_rng(3).standard_normal((4, 4)))
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert check_norm_preservation(u, x, x) == 0.0
    assert check_norm_preservation(np.eye(4), x, x + 1.0) == 0.0


def test_norm_preservation_random_triples():
    rng = np.random.default_rng(4)
    for _ in range(100):
        u = project_unitary(rng.standard_normal((16, 16)))
        x = rng.standard_normal(16)
        x_pert = x + 0.01 * rng.standard_normal(16)
        gap = check_norm_preservation(u, x, x_pert)
        assert gap < 1e-9 * (1.0 + np.linalg.norm(x - x_pert))


def test_norm_preservation_rejects_non_unitary():
    bad = np.diag([2.0, 1.0])
    with pytest.raises(ContractError) as exc:
        check_norm_preservation(bad, np.zeros(2), np.ones(2))
    assert "(0, 0)" in str(exc.value)  # names the worst-offending gram entry
