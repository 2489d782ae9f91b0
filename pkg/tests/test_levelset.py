"""Conservative interface representation: profile init, normals, mixtures,
and the pseudo-time sharpening procedure."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgtwophase import fespace as fe
from dgtwophase import levelset as ls
from dgtwophase import mesh as mm
from dgtwophase._discrete import Discretization
from dgtwophase.errors import ConfigError

SPACE = fe.NodalSpace(2)


def _strip(n=64):
    """Thin x-aligned strip, periodic across the transverse walls."""
    return mm.build_uniform(n, 1, mm.Rect(-0.5, -0.5 / n, 0.5, 0.5 / n),
                            periodic_y=True)


def _mass_matrix(disc, space=SPACE):
    builder = disc.matrix_builder(space)
    builder.cell_term(
        np.ones((disc.mesh.num_cells, disc.weights_2d.size)), "v", "v")
    return builder.finalize()


class TestInitFromDistance:
    def test_zero_distance_gives_half(self):
        mesh = _strip(4)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: 0.0 * x, 0.1)
        assert np.allclose(phi.data, 0.5, atol=1e-15)

    def test_one_thickness_gives_logistic_value(self):
        mesh = _strip(4)
        eps = 0.07
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: eps + 0.0 * x,
                                    eps)
        expected = 1.0 / (1.0 + np.exp(-1.0))
        assert np.allclose(phi.data, expected, atol=1e-12)
        assert expected == pytest.approx(0.731059, abs=1e-6)

    def test_saturation_far_from_interface(self):
        mesh = _strip(4)
        eps = 0.02
        phi = ls.init_from_distance(mesh, SPACE,
                                    lambda x, y: 25 * eps + 0.0 * x, eps)
        assert (phi.data >= 1.0 - 1e-9).all()

    def test_sign_convention(self):
        # positive distance marks the phi > 1/2 fluid
        mesh = _strip(8)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.05)
        blocks = phi.field.blocks()[:, 0, :]
        nodes_x = np.array([
            cell.bbox.x0 + (cell.bbox.x1 - cell.bbox.x0) * SPACE.nodes_2d[:, 0]
            for cell in mesh.cells])
        assert ((blocks > 0.5) == (nodes_x > 0)).all()

    def test_nonpositive_thickness_rejected(self):
        mesh = _strip(4)
        for eps in (0.0, -0.1):
            with pytest.raises(ValueError):
                ls.init_from_distance(mesh, SPACE, lambda x, y: x, eps)


class TestNormals:
    def test_planar_profile_gives_exact_x_normal(self):
        mesh = _strip(16)
        disc = Discretization(mesh, 4)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.1)
        n = ls.normals(phi, disc)
        assert np.abs(n[..., 0] - 1.0).max() < 1e-12
        assert np.abs(n[..., 1]).max() < 1e-12

    def test_radial_profile_matches_analytic_at_second_order(self):
        devs = {}
        for n in (16, 32):
            mesh = mm.build_uniform(n, n, mm.Rect(-2.0, -2.0, 2.0, 2.0))
            disc = Discretization(mesh, 4)
            phi = ls.init_from_distance(
                mesh, SPACE, lambda x, y: np.hypot(x, y) - 1.0, 0.1)
            nrm = ls.normals(phi, disc)
            worst = 0.0
            for e, cell in enumerate(mesh.cells):
                b = cell.bbox
                px = b.x0 + (b.x1 - b.x0) * disc.points_2d[:, 0]
                py = b.y0 + (b.y1 - b.y0) * disc.points_2d[:, 1]
                r = np.hypot(px, py)
                near = np.abs(r - 1.0) < 0.2
                if not near.any():
                    continue
                dev = np.hypot(nrm[e, near, 0] - px[near] / r[near],
                               nrm[e, near, 1] - py[near] / r[near])
                worst = max(worst, dev.max())
            devs[n] = worst
        assert devs[32] < 2.5e-2
        assert devs[16] / devs[32] > 3.2  # ~4 for O(h^2)

    def test_constant_field_falls_back_to_unit_vector(self):
        mesh = _strip(8)
        disc = Discretization(mesh, 4)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: 0.0 * x, 0.1)
        n = ls.normals(phi, disc)
        assert np.allclose(n[..., 0], 0.0)
        assert np.allclose(n[..., 1], 1.0)

    def test_unit_norm_everywhere_for_random_fields(self):
        mesh = mm.build_uniform(4, 4, mm.Rect(0.0, 0.0, 1.0, 1.0))
        disc = Discretization(mesh, 4)
        rng = np.random.default_rng(42)
        for _ in range(5):
            field = fe.FieldVector.zeros(SPACE, mesh)
            field.data[:] = rng.standard_normal(field.data.size)
            n = ls.normals_from_gradients(disc.cell_gradients(field)[:, 0])
            assert np.abs(np.hypot(n[..., 0], n[..., 1]) - 1.0).max() < 1e-12


class TestMixtureLaws:
    def test_pure_fluid_one(self):
        law = ls.MixtureLaw("linear", density_ratio=0.1, viscosity_ratio=0.1)
        assert ls.mixture_density(1.0, law) == pytest.approx(1.0)
        assert ls.mixture_viscosity(1.0, law) == pytest.approx(1.0)

    def test_linear_midpoint(self):
        law = ls.MixtureLaw("linear", density_ratio=0.1, viscosity_ratio=0.1)
        assert ls.mixture_viscosity(0.5, law) == pytest.approx(0.55)
        assert ls.mixture_density(0.5, law) == pytest.approx(0.55)

    def test_harmonic_midpoint(self):
        law = ls.MixtureLaw("harmonic", density_ratio=0.1,
                            viscosity_ratio=0.1)
        assert ls.mixture_viscosity(0.5, law) == pytest.approx(2.0 / 11.0)
        # density always follows the linear rule
        assert ls.mixture_density(0.5, law) == pytest.approx(0.55)

    def test_out_of_range_phi_is_clamped(self):
        law = ls.MixtureLaw("harmonic", density_ratio=0.2,
                            viscosity_ratio=0.3)
        assert ls.mixture_density(-0.2, law) == ls.mixture_density(0.0, law)
        assert ls.mixture_density(1.3, law) == ls.mixture_density(1.0, law)
        assert (ls.mixture_viscosity(-0.2, law)
                == ls.mixture_viscosity(0.0, law))
        assert (ls.mixture_viscosity(1.3, law)
                == ls.mixture_viscosity(1.0, law))

    @given(ratio=st.floats(1e-3, 1.0), mode=st.sampled_from(
        ["linear", "harmonic"]))
    @settings(max_examples=40, deadline=None)
    def test_monotone_and_bracketed(self, ratio, mode):
        law = ls.MixtureLaw(mode, density_ratio=ratio, viscosity_ratio=ratio)
        phis = np.linspace(-0.2, 1.2, 29)
        rho = np.array([ls.mixture_density(p, law) for p in phis])
        mu = np.array([ls.mixture_viscosity(p, law) for p in phis])
        for vals in (rho, mu):
            assert (np.diff(vals) >= -1e-15).all()
            assert vals.min() >= ratio - 1e-12
            assert vals.max() <= 1.0 + 1e-12

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            ls.MixtureLaw("geometric", density_ratio=0.5, viscosity_ratio=0.5)

    def test_nonpositive_ratio_rejected(self):
        with pytest.raises(ConfigError):
            ls.MixtureLaw("linear", density_ratio=0.0, viscosity_ratio=0.5)
        with pytest.raises(ConfigError):
            ls.MixtureLaw("linear", density_ratio=0.5, viscosity_ratio=-1.0)


class TestInterfaceParams:
    def test_valid_params_accepted(self):
        p = ls.InterfaceParams(eps=0.05, dtau=1e-3, beta=0.5,
                               u_c_factor=0.05, n_reinit_steps=2)
        assert p.eps == 0.05

    @pytest.mark.parametrize("kwargs", [
        dict(eps=0.0, dtau=1e-3),
        dict(eps=-1.0, dtau=1e-3),
        dict(eps=0.05, dtau=0.0),
        dict(eps=0.05, dtau=1e-3, beta=-0.1),
        dict(eps=0.05, dtau=1e-3, u_c_factor=-0.5),
        dict(eps=0.05, dtau=1e-3, n_reinit_steps=-1),
        dict(eps=0.05, dtau=1e-3, n_reinit_steps=11),
    ])
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            ls.InterfaceParams(**kwargs)


class TestReinitialize:
    def test_zero_steps_is_identity(self):
        mesh = _strip(8)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.1)
        params = ls.InterfaceParams(eps=0.1, dtau=1e-3, n_reinit_steps=0)
        out = ls.reinitialize(phi, params, u_max=1.0)
        assert out is not phi
        assert np.array_equal(out.data, phi.data)

    def test_zero_speed_is_identity(self):
        mesh = _strip(8)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.1)
        params = ls.InterfaceParams(eps=0.1, dtau=1e-3, n_reinit_steps=2)
        out = ls.reinitialize(phi, params, u_max=0.0)
        assert np.array_equal(out.data, phi.data)

    def test_negative_speed_rejected(self):
        mesh = _strip(8)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.1)
        params = ls.InterfaceParams(eps=0.1, dtau=1e-3, n_reinit_steps=1)
        with pytest.raises(ValueError):
            ls.reinitialize(phi, params, u_max=-1.0)

    def test_equilibrium_profile_is_stationary(self):
        # compression phi(1-phi) balances diffusion eps*phi' at beta = 1
        mesh = _strip(64)
        disc = Discretization(mesh, 4)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.1)
        params = ls.InterfaceParams(eps=0.1, dtau=2e-6, beta=1.0,
                                    u_c_factor=1.0, n_reinit_steps=1)
        out = ls.reinitialize(phi, params, u_max=1.0, disc=disc)
        assert np.abs(out.data - phi.data).max() <= 1e-6

    def test_smeared_profile_contracts_toward_equilibrium(self):
        # start twice as wide as the target profile; the L2 distance to the
        # equilibrium shape must shrink every pseudo step
        eps = 0.025
        mesh = _strip(64)
        disc = Discretization(mesh, 4)
        wide = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 2 * eps)
        target = ls.init_from_distance(mesh, SPACE, lambda x, y: x, eps)
        mass = _mass_matrix(disc)

        def distance(f):
            d = f.data - target.data
            return float(np.sqrt(d @ (mass @ d)))

        params = ls.InterfaceParams(eps=eps, dtau=5e-3, beta=1.0,
                                    u_c_factor=1.0, n_reinit_steps=1)
        guard = wide.data.copy()
        current = wide
        seq = [distance(current)]
        for _ in range(5):
            current = ls.reinitialize(current, params, u_max=1.0, disc=disc)
            seq.append(distance(current))

        assert seq[0] == pytest.approx(0.0074374, rel=1e-3)
        assert all(b < a for a, b in zip(seq, seq[1:]))
        assert seq[-1] < 0.0064
        assert current.data.min() > -0.05 and current.data.max() < 1.05
        # the input field is never mutated
        assert np.array_equal(wide.data, guard)

    def test_circle_conserves_mass_and_respects_bounds(self):
        # closed interface in a walled box: the weak form carries no wall
        # flux, so the integral of phi is conserved to solver tolerance
        mesh = mm.build_uniform(16, 16, mm.Rect(0.0, 0.0, 1.0, 1.0))
        disc = Discretization(mesh, 4)
        eps = 1.0 / 16

        def signed_distance(x, y):
            return 0.3 - np.hypot(x - 0.5, y - 0.5)

        smeared = ls.init_from_distance(mesh, SPACE, signed_distance,
                                        1.5 * eps)
        sharp = ls.init_from_distance(mesh, SPACE, signed_distance, eps)
        mass = _mass_matrix(disc)
        ones = np.ones(mass.shape[0])

        params = ls.InterfaceParams(eps=eps, dtau=2e-3, beta=1.0,
                                    u_c_factor=1.0, n_reinit_steps=5)
        out = ls.reinitialize(smeared, params, u_max=1.0, disc=disc)

        before = ones @ (mass @ smeared.data)
        after = ones @ (mass @ out.data)
        assert abs(after - before) <= 1e-7 * abs(before)
        assert out.data.min() > -0.05 and out.data.max() < 1.05

        def distance(f):
            d = f.data - sharp.data
            return float(np.sqrt(d @ (mass @ d)))

        assert distance(out) < distance(smeared)

    def test_normals_computed_once_regardless_of_step_count(self):
        # the normal field is frozen from the input; extra pseudo steps must
        # not trigger any further normal evaluations
        mesh = _strip(16)
        disc = Discretization(mesh, 4)
        phi = ls.init_from_distance(mesh, SPACE, lambda x, y: x, 0.05)

        counts = []
        original = ls.normals_from_gradients

        def run(steps):
            calls = [0]

            def counting(grad):
                calls[0] += 1
                return original(grad)

            ls.normals_from_gradients = counting
            try:
                params = ls.InterfaceParams(eps=0.05, dtau=1e-4,
                                            n_reinit_steps=steps)
                ls.reinitialize(phi, params, u_max=1.0, disc=disc)
            finally:
                ls.normals_from_gradients = original
            counts.append(calls[0])

        run(1)
        run(4)
        assert counts[0] == counts[1] > 0
