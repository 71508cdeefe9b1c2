import numpy as np
import pytest

from vfa_motion.bending import BendingOperator
from vfa_motion.errors import SolverError
from vfa_motion.solver import DiagPlusBending, solve
from vfa_motion.volume import Volume

from _helpers import make_grid


def make_system(dims=(8, 8, 8), voxel=(1.0, 1.0, 1.0), lam=1e3, seed=0, diag_range=(0.5, 2.0)):
    rng = np.random.default_rng(seed)
    bending = BendingOperator((dims, voxel))
    diag = rng.uniform(*diag_range, size=dims)
    return DiagPlusBending(diag, lam, bending), rng


class TestOperator:
    def test_apply_symmetry(self):
        op, rng = make_system(dims=(6, 6, 6), lam=10.0, seed=1)
        u = rng.normal(size=op.dims)
        v = rng.normal(size=op.dims)
        pu_v = float(np.vdot(op.apply(u), v))
        u_pv = float(np.vdot(u, op.apply(v)))
        assert abs(pu_v - u_pv) < 1e-10 * max(abs(pu_v), 1.0)

    def test_positive_definite_on_random_states(self):
        # dense Cholesky must succeed for strictly positive diagonals
        for seed in range(3):
            op, _ = make_system(dims=(6, 6, 6), lam=100.0, seed=seed)
            np.linalg.cholesky(op.dense())

    def test_rejects_negative_diag(self):
        bending = BendingOperator(((4, 4, 4), (1.0, 1.0, 1.0)))
        with pytest.raises(ValueError):
            DiagPlusBending(np.full((4, 4, 4), -1.0), 1.0, bending)


class TestSolve:
    def test_pure_diagonal_is_exact(self):
        rng = np.random.default_rng(2)
        dims = (8, 8, 8)
        bending = BendingOperator((dims, (1.0, 1.0, 1.0)))
        d = rng.uniform(0.5, 3.0, size=dims)
        op = DiagPlusBending(d, 0.0, bending)
        rhs = rng.normal(size=dims)
        z = solve(op, rhs, rtol=1e-10)
        np.testing.assert_allclose(z, rhs / d, atol=1e-12)

    def test_zero_rhs_gives_zero(self):
        op, _ = make_system()
        z = solve(op, np.zeros(op.dims))
        np.testing.assert_array_equal(z, 0.0)

    @pytest.mark.parametrize("lam", [1e1, 1e3, 1e8])
    def test_recovers_known_solution_vs_dense(self, lam):
        # rhs built from a known field concentrates in stiff modes, so the
        # solve must run tight to pin soft-mode (near-constant) error too
        op, rng = make_system(lam=lam, seed=3)
        z_true = rng.normal(size=op.dims)
        rhs = op.apply(z_true)
        z = solve(op, rhs, rtol=1e-12, max_cycles=60)
        dense = np.linalg.solve(op.dense(), rhs.ravel(order="F")).reshape(op.dims, order="F")
        rel = np.linalg.norm(z - dense) / np.linalg.norm(dense)
        assert rel < 1e-6

    def test_solution_error_bounded_by_rtol(self):
        # relative L2 error against the dense factorization stays under 10x rtol
        rtol = 1e-4
        for seed in range(3):
            op, rng = make_system(lam=1e3, seed=seed)
            rhs = rng.normal(size=op.dims)
            z = solve(op, rhs, rtol=rtol, max_cycles=60)
            dense = np.linalg.solve(op.dense(), rhs.ravel(order="F")).reshape(op.dims, order="F")
            rel = np.linalg.norm(z - dense) / np.linalg.norm(dense)
            assert rel < 10.0 * rtol

    def test_vcycle_residuals_non_increasing(self):
        op, rng = make_system(lam=1e3, seed=5)
        rhs = rng.normal(size=op.dims)
        trace: list[float] = []
        solve(op, rhs, rtol=1e-10, max_cycles=60, trace=trace)
        assert len(trace) >= 2
        for prev, cur in zip(trace, trace[1:]):
            assert cur <= prev * (1.0 + 1e-12) + 1e-12

    def test_volume_in_volume_out(self):
        grid = make_grid((8, 8, 8))
        op, rng = make_system()
        rhs = Volume(rng.normal(size=op.dims), grid)
        z = solve(op, rhs, rtol=1e-6)
        assert isinstance(z, Volume)
        assert z.grid is grid

    def test_masked_diag_with_large_zero_region(self):
        # zero data weight over most of the grid leaves the prior in charge
        rng = np.random.default_rng(6)
        dims = (12, 12, 12)
        bending = BendingOperator((dims, (2.0, 2.0, 2.0)))
        diag = np.zeros(dims)
        diag[4:8, 4:8, 4:8] = rng.uniform(0.5, 1.5, size=(4, 4, 4))
        op = DiagPlusBending(diag, 1e2, bending)
        z_true = rng.normal(size=dims)
        rhs = op.apply(z_true)
        z = solve(op, rhs, rtol=1e-8, max_cycles=80)
        res = np.linalg.norm(op.apply(z) - rhs) / np.linalg.norm(rhs)
        assert res <= 1e-8

    def test_anisotropic_voxels(self):
        op, rng = make_system(voxel=(1.0, 1.5, 3.0), lam=1e3, seed=7)
        rhs = rng.normal(size=op.dims)
        z = solve(op, rhs, rtol=1e-7, max_cycles=80)
        res = np.linalg.norm(op.apply(z) - rhs) / np.linalg.norm(rhs)
        assert res <= 1e-7

    def test_larger_grid_converges(self):
        op, rng = make_system(dims=(33, 20, 27), lam=1e3, seed=8)
        rhs = rng.normal(size=op.dims)
        z = solve(op, rhs, rtol=1e-6, max_cycles=50)
        res = np.linalg.norm(op.apply(z) - rhs) / np.linalg.norm(rhs)
        assert res <= 1e-6

    def test_singular_diag_zero_rhs_mismatch_raises(self):
        dims = (4, 4, 4)
        bending = BendingOperator((dims, (1.0, 1.0, 1.0)))
        op = DiagPlusBending(np.zeros(dims), 0.0, bending)
        with pytest.raises(SolverError):
            solve(op, np.ones(dims))

    def test_rtol_validation(self):
        op, _ = make_system()
        with pytest.raises(ValueError):
            solve(op, np.ones(op.dims), rtol=0.0)
