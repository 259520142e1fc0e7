import numpy as np
import pytest

from dirfeat import checksuite
from dirfeat.pooling import (
    DirectionalPool,
    SpatialNorm,
    aap_forward,
    dap_forward,
    hap_forward,
    pool_backward,
    pool_forward,
    pool_plan,
    vap_forward,
)


def f_map(d=4):
    """The running example: a d*d map holding 1..d*d in row-major order,
    so cell value k is exactly f_k."""
    return (np.arange(d * d, dtype=np.float64) + 1).reshape(1, d, d, 1)


def groups_reference(direction, d):
    """Independent enumeration of each direction's groups."""
    cells = [(i, j) for i in range(d) for j in range(d)]
    if direction == "h":
        return [[(i, j) for i, j in cells if i == t] for t in range(d)]
    if direction == "v":
        return [[(i, j) for i, j in cells if j == t] for t in range(d)]
    if direction == "d":
        return [
            [(i, j) for i, j in cells if j - i == off] for off in range(d - 1, -d, -1)
        ]
    return [[(i, j) for i, j in cells if i + j == s] for s in range(2 * d - 1)]


def pool_reference(x, direction):
    n, d, _, c = x.shape
    groups = groups_reference(direction, d)
    out = np.empty((n, len(groups), 1, c))
    for t, group in enumerate(groups):
        acc = np.zeros((n, c))
        for i, j in group:
            acc += x[:, i, j, :]
        out[:, t, 0, :] = acc / len(group)
    return out


class TestWorkedExamples:
    """The 4x4 f1..f16 example groupings, held exactly."""

    def test_h1_is_first_row_mean(self):
        out = hap_forward(f_map())
        assert out[0, 0, 0, 0] == (1 + 2 + 3 + 4) / 4

    def test_v4_is_fourth_column_mean(self):
        out = vap_forward(f_map())
        assert out[0, 3, 0, 0] == (4 + 8 + 12 + 16) / 4
        assert out.shape == (1, 4, 1, 1)  # stored transposed

    def test_d6_pools_f9_f14(self):
        out = dap_forward(f_map())
        assert out[0, 5, 0, 0] == (9 + 14) / 2

    def test_a4_pools_f4_f7_f10_f13(self):
        out = aap_forward(f_map())
        assert out[0, 3, 0, 0] == (4 + 7 + 10 + 13) / 4

    def test_all_seven_diagonal_groups(self):
        want_groups = [[4], [3, 8], [2, 7, 12], [1, 6, 11, 16], [5, 10, 15], [9, 14], [13]]
        out = dap_forward(f_map())
        for t, members in enumerate(want_groups):
            assert out[0, t, 0, 0] == sum(members) / len(members)

    def test_all_seven_antidiagonal_groups(self):
        want_groups = [[1], [2, 5], [3, 6, 9], [4, 7, 10, 13], [8, 11, 14], [12, 15], [16]]
        out = aap_forward(f_map())
        for t, members in enumerate(want_groups):
            assert out[0, t, 0, 0] == sum(members) / len(members)


class TestForward:
    @pytest.mark.parametrize("d", [4, 5, 8])
    @pytest.mark.parametrize("direction", "hvda")
    def test_matches_group_enumeration_oracle(self, direction, d):
        x = np.random.default_rng(d).standard_normal((2, d, d, 3))
        got = pool_forward(x, pool_plan(direction, d))
        np.testing.assert_allclose(got, pool_reference(x, direction), rtol=0, atol=1e-12)

    def test_constant_rows(self):
        x = np.zeros((1, 4, 4, 1))
        for i in range(4):
            x[0, i, :, 0] = i + 1
        assert hap_forward(x)[0, :, 0, 0].tolist() == [1, 2, 3, 4]

    def test_constant_input_constant_output(self):
        out = hap_forward(np.full((1, 5, 5, 2), 3.7))
        np.testing.assert_allclose(out, 3.7, rtol=0, atol=0)

    def test_identity_pattern_diagonal(self):
        x = np.eye(4).reshape(1, 4, 4, 1)
        out = dap_forward(x)
        want = np.zeros(7)
        want[3] = 1.0  # the main diagonal group averages four ones
        np.testing.assert_allclose(out[0, :, 0, 0], want, rtol=0, atol=0)

    def test_all_ones_antidiagonal(self):
        out = aap_forward(np.ones((1, 4, 4, 1)))
        np.testing.assert_allclose(out, 1.0, rtol=0, atol=0)

    def test_single_cell_passthrough(self):
        x = np.full((1, 1, 1, 3), 2.5)
        for fn in (hap_forward, vap_forward, dap_forward, aap_forward):
            out = fn(x)
            assert out.shape == (1, 1, 1, 3)
            assert np.all(out == 2.5)

    def test_vap_equals_hap_of_transpose(self):
        x = np.random.default_rng(1).standard_normal((2, 6, 6, 3))
        xt = np.ascontiguousarray(x.transpose(0, 2, 1, 3))
        assert np.array_equal(vap_forward(x), hap_forward(xt))

    def test_dap_of_mirror_equals_aap(self):
        x = np.random.default_rng(2).standard_normal((2, 5, 5, 3))
        mirrored = np.ascontiguousarray(x[:, :, ::-1, :])
        assert np.array_equal(dap_forward(mirrored), aap_forward(x))

    def test_hap_preserves_mean(self):
        x = np.random.default_rng(3).standard_normal((3, 7, 7, 2))
        np.testing.assert_allclose(
            hap_forward(x)[:, :, 0, :].mean(axis=1), x.mean(axis=(1, 2)), rtol=1e-12
        )

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            hap_forward(np.zeros((1, 4, 5, 1)))

    def test_linearity_exact_on_dyadic_values(self):
        # multiples of 840 = lcm(1..8) divide exactly by every group size at
        # d=8, and the coefficients are powers of two, so every float
        # operation is exact and linearity holds bit-for-bit
        rng = np.random.default_rng(4)
        x = 840.0 * rng.integers(-8, 8, size=(1, 8, 8, 2)).astype(float)
        y = 840.0 * rng.integers(-8, 8, size=(1, 8, 8, 2)).astype(float)
        for direction in "hvda":
            plan = pool_plan(direction, 8)
            lhs = pool_forward(2.0 * x + 0.5 * y, plan)
            rhs = 2.0 * pool_forward(x, plan) + 0.5 * pool_forward(y, plan)
            assert np.array_equal(lhs, rhs)

    def test_linearity_random(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 6, 6, 3))
        y = rng.standard_normal((2, 6, 6, 3))
        a, b = -1.3, 0.7
        for direction in "hvda":
            plan = pool_plan(direction, 6)
            np.testing.assert_allclose(
                pool_forward(a * x + b * y, plan),
                a * pool_forward(x, plan) + b * pool_forward(y, plan),
                rtol=1e-12,
                atol=1e-14,
            )


class TestPlans:
    @pytest.mark.parametrize("d", range(1, 17))
    def test_partition_and_group_sizes(self, d):
        for direction in "hvda":
            plan = pool_plan(direction, d)
            seen = set()
            for ys, xs in plan.groups:
                for i, j in zip(ys, xs):
                    assert (i, j) not in seen
                    seen.add((int(i), int(j)))
            assert len(seen) == d * d
            if direction in "hv":
                assert plan.sizes.tolist() == [d] * d
            else:
                want = list(range(1, d + 1)) + list(range(d - 1, 0, -1))
                assert plan.sizes.tolist() == want

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            pool_plan("x", 4)


class TestBackward:
    def test_row_grad_spreads_evenly(self):
        plan = pool_plan("h", 4)
        g = np.zeros((1, 4, 1, 2))
        g[0, 1, 0, :] = [4.0, -8.0]
        gx = pool_backward(g, plan)
        np.testing.assert_allclose(gx[0, 1, :, 0], 1.0, rtol=0, atol=0)
        np.testing.assert_allclose(gx[0, 1, :, 1], -2.0, rtol=0, atol=0)
        others = np.delete(gx, 1, axis=1)
        assert not others.any()

    def test_singleton_group_gets_full_grad(self):
        plan = pool_plan("d", 4)
        g = np.zeros((1, 7, 1, 1))
        g[0, 6, 0, 0] = 5.0  # last diagonal group is the single cell (3, 0)
        gx = pool_backward(g, plan)
        assert gx[0, 3, 0, 0] == 5.0
        assert gx.sum() == 5.0

    @pytest.mark.parametrize("d", range(1, 17))
    def test_adjointness(self, d):
        rng = np.random.default_rng(d)
        for direction in "hvda":
            plan = pool_plan(direction, d)
            x = rng.standard_normal((1, d, d, 2))
            g = rng.standard_normal((1, plan.length, 1, 2))
            lhs = float((pool_forward(x, plan) * g).sum())
            rhs = float((x * pool_backward(g, plan)).sum())
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_finite_difference_all_directions(self):
        for direction in "hvda":
            rep = checksuite.check_directional(direction)
            assert rep.ok, rep.row(f"pool_{direction}")
            assert rep.max_rel_error < 1e-8

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            DirectionalPool("h").backward(np.zeros((1, 4, 1, 1)))


class TestSpatialNorm:
    def test_zero_input_zero_output(self):
        sn = SpatialNorm(4)
        out = sn.forward(np.zeros((1, 7, 1, 3)))
        assert not out.any()

    def test_single_position_value(self):
        sn = SpatialNorm(4)
        out = sn.forward(np.full((1, 1, 1, 1), 3.0))
        np.testing.assert_allclose(out[0, 0, 0, 0], 3.0 / np.sqrt(10.0), rtol=1e-15)

    def test_output_bounded_below_one(self):
        rng = np.random.default_rng(6)
        sn = SpatialNorm(4)
        for _ in range(20):
            out = sn.forward(rng.normal(0, 5, size=(2, 7, 1, 4)))
            assert np.all(np.abs(out) < 1.0)

    def test_nonnegative_inputs_land_in_unit_interval(self):
        rng = np.random.default_rng(7)
        sn = SpatialNorm(4)
        out = sn.forward(rng.uniform(0, 10, size=(4, 7, 1, 8)))
        assert np.all(out >= 0.0) and np.all(out < 1.0)

    def test_window_indices_clamped(self):
        # L=2: both positions see both (window [j-1, j+2] clipped), so the
        # denominators agree and the outputs share one energy term
        sn = SpatialNorm(4)
        p = np.array([3.0, 4.0]).reshape(1, 2, 1, 1)
        out = sn.forward(p)
        denom = np.sqrt(1 + 9 + 16)
        np.testing.assert_allclose(out[0, :, 0, 0], [3.0 / denom, 4.0 / denom], rtol=1e-15)

    def test_backward_at_zero_is_passthrough(self):
        sn = SpatialNorm(4)
        sn.forward(np.zeros((1, 5, 1, 2)))
        g = np.random.default_rng(8).standard_normal((1, 5, 1, 2))
        assert np.array_equal(sn.backward(g), g)

    def test_single_position_derivative_closed_form(self):
        # z = p / sqrt(1 + p^2)  =>  dz/dp = (1 + p^2)^(-3/2)
        sn = SpatialNorm(4)
        p = 1.7
        sn.forward(np.full((1, 1, 1, 1), p))
        got = sn.backward(np.ones((1, 1, 1, 1)))[0, 0, 0, 0]
        np.testing.assert_allclose(got, (1 + p * p) ** -1.5, rtol=1e-14)

    def test_finite_difference(self):
        rep = checksuite.check_spatial_norm()
        assert rep.ok, rep.row("spatial_norm")
        assert rep.max_rel_error < 1e-6

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            SpatialNorm(4).backward(np.zeros((1, 4, 1, 1)))

    def test_window_below_one_rejected(self):
        with pytest.raises(ValueError):
            SpatialNorm(0)
