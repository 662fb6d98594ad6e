import numpy as np
import pytest

from podflow.assembly import StabilizationConfig, convection_matrix
from podflow.fe_space import FEField
from podflow.fom import (
    FlowCase,
    FOMConfig,
    FOMProblem,
    NonlinearSolveError,
    record_snapshots,
    run_fom,
    solve_stokes,
)
from podflow.mesh import build_rect_mesh
from podflow.metrics import discrete_l2_error, kinetic_energy
from podflow.pod import build_basis, project_L2
from podflow.rom import (
    AdaptiveMuConfig,
    PressureRecovery,
    adapt_mu,
    build_rom_operators,
    compute_supremizers,
    energy_mismatch,
    load_operators,
    orthonormalize_gradient,
    principal_angle_cosine,
    reduce_forcing,
    rom_kinetic_energy,
    run_rom,
    save_operators,
    step_rom,
    step_rom_implicit,
    supremizer_stability,
    truncate_operators,
)

ZERO_BC = lambda x, y, t: (np.zeros_like(x), np.zeros_like(x))


def enclosed_case(forcing=None):
    return FlowCase(
        "enclosed",
        dirichlet={"inlet": ZERO_BC, "outlet": ZERO_BC, "wall": ZERO_BC},
        forcing=forcing,
        zero_mean_pressure=True,
    )


def swirl_forcing(x, y, t):
    sx, sy = np.sin(np.pi * x), np.sin(np.pi * y)
    fx = sy * (1.0 + 0.4 * np.cos(20.0 * t)) + sx * sy * np.sin(35.0 * t + 0.3)
    fy = sx * (1.0 - 0.3 * np.sin(25.0 * t)) \
        + np.sin(2.0 * np.pi * x) * sy * np.cos(50.0 * t - 0.7)
    return (fx, fy)


def strong_swirl(x, y, t):
    fx, fy = swirl_forcing(x, y, t)
    return (100.0 * fx, 100.0 * fy)


def cavity_problem(scheme, nx=6, dt=1e-2, t_final=0.1, nu=5e-3, mu=0.3,
                   window=None, stride=1, forcing=swirl_forcing):
    mesh = build_rect_mesh(1.0, 1.0, nx, nx)
    cfg = FOMConfig(
        scheme=scheme, nu=nu, dt=dt, t_final=t_final,
        stabilization=StabilizationConfig(grad_div=mu),
        snapshot_window=window, snapshot_stride=stride,
    )
    return FOMProblem(mesh, cfg, enclosed_case(forcing=forcing))


def cavity_setup(scheme, center=False, **kwargs):
    """Run a forced cavity and build full-rank bases from its snapshots."""
    problem = cavity_problem(scheme, **kwargs)
    run = run_fom(problem)
    vel_snaps, pres_snaps = record_snapshots(run, center_velocity=center)
    vel_basis = build_basis(vel_snaps, problem.mass)
    pres_basis = build_basis(pres_snaps, problem.pressure_mass)
    return problem, run, vel_snaps, pres_snaps, vel_basis, pres_basis


# -- reduced operator structure -------------------------------------------------


def test_reduced_mass_is_identity():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("lps", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis, pres_basis)
    assert np.abs(ops.mass - np.eye(ops.r)).max() <= 1e-10


def test_convection_tensor_is_antisymmetric_for_enclosed_modes():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("graddiv", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis)
    t = ops.convection_tensor
    scale = np.abs(t).max()
    assert np.abs(t + np.swapaxes(t, 1, 2)).max() <= 1e-12 * max(scale, 1.0)
    for i in range(ops.r):
        assert np.abs(np.diagonal(t[i])).max() <= 1e-12 * max(scale, 1.0)


def test_reduced_stiffness_matches_full_quadratic_form():
    problem, _, _, _, vel_basis, _ = cavity_setup("graddiv", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis)
    rng = np.random.default_rng(0)
    a = rng.normal(size=ops.r)
    full = ops.vel_modes @ a
    reduced_value = a @ (ops.stiffness @ a)
    full_value = full @ (problem.stiffness @ full)
    assert abs(reduced_value - full_value) <= 1e-11 * max(abs(full_value), 1.0)


def test_rom_kinetic_energy_matches_full_order():
    for center in (False, True):
        problem, _, _, _, vel_basis, pres_basis = cavity_setup(
            "lps", center=center, window=(0.02, 0.1))
        ops = build_rom_operators(problem, vel_basis, pres_basis)
        rng = np.random.default_rng(4)
        a = rng.normal(size=ops.r)
        u = ops.vel_modes @ a
        if ops.mean is not None:
            u = u + ops.mean
        expected = kinetic_energy(u, problem.mass)
        assert abs(rom_kinetic_energy(ops, a) - expected) <= 1e-12 * max(expected, 1.0)


def test_truncation_matches_direct_build():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("lps", window=(0.02, 0.1))
    full = build_rom_operators(problem, vel_basis, pres_basis)
    assert full.r >= 4
    direct = build_rom_operators(problem, vel_basis, pres_basis, r=3, r_pressure=2)
    cut = truncate_operators(full, 3, r_pressure=2)
    for name in ("mass", "stiffness", "grad_div", "lps_velocity",
                 "convection_tensor", "convect_by_mean", "transport_of_mean",
                 "mean_convection", "divergence", "lps_pressure"):
        a, b = getattr(cut, name), getattr(direct, name)
        assert np.allclose(a, b, rtol=1e-13, atol=1e-15), name


def test_operator_build_validation():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("lps", window=(0.02, 0.1))
    with pytest.raises(ValueError):
        build_rom_operators(problem, vel_basis)  # no pressure basis
    with pytest.raises(ValueError):
        build_rom_operators(problem, vel_basis, pres_basis, r=99)
    other = cavity_problem("lps", nx=4)
    with pytest.raises(ValueError):
        build_rom_operators(other, vel_basis, pres_basis)


# -- single step against a dense full-order projection oracle --------------------


@pytest.mark.parametrize("scheme", ["lps", "graddiv"])
@pytest.mark.parametrize("center", [False, True])
def test_step_matches_projected_full_order_system(scheme, center):
    problem, run, vel_snaps, pres_snaps, vel_basis, pres_basis = cavity_setup(
        scheme, center=center, window=(0.02, 0.1))
    ops = build_rom_operators(
        problem, vel_basis, pres_basis if scheme == "lps" else None)
    rng = np.random.default_rng(7)
    a_now = rng.normal(size=ops.r)
    a_prev = rng.normal(size=ops.r)
    dt, nu, mu = 2e-2, 5e-3, (0.0 if scheme == "lps" else 0.3)
    t = 0.37
    f_r = reduce_forcing(ops, swirl_forcing, t)
    a_new, b_new = step_rom(ops, a_now, a_prev, dt, nu, mu=mu, forcing=f_r)

    # independent route: assemble the convecting full-order system around the
    # reconstructed extrapolation and project it onto the modes afterwards
    phi = ops.vel_modes
    mean = ops.mean if ops.mean is not None else np.zeros(phi.shape[0])
    u_now = phi @ a_now + mean
    u_prev = phi @ a_prev + mean
    u_hat = 2.0 * u_now - u_prev
    conv = convection_matrix(problem.vel_space, FEField(problem.vel_space, u_hat))
    k_full = 1.5 / dt * problem.mass + nu * problem.stiffness + conv
    if problem.velocity_stabilization is not None:
        k_full = k_full + problem.velocity_stabilization
    if mu != 0.0:
        k_full = k_full + mu * problem.grad_div
    rhs_full = problem.mass @ ((4.0 * u_now - u_prev) / (2.0 * dt)) \
        + problem.load_vector(t)
    k_red = phi.T @ (k_full @ phi)
    rhs_red = phi.T @ (rhs_full - k_full @ mean)
    if scheme == "lps":
        psi = ops.pres_modes
        d_red = psi.T @ (problem.divergence @ phi)
        sp_red = psi.T @ (problem.pressure_stabilization @ psi)
        d_mean = psi.T @ (problem.divergence @ mean)
        system = np.block([[k_red, -d_red.T], [d_red, sp_red]])
        rhs = np.concatenate([rhs_red, -d_mean])
        x = np.linalg.solve(system, rhs)
        a_ref, b_ref = x[:ops.r], x[ops.r:]
        assert np.abs(b_new - b_ref).max() <= 1e-10 * max(np.abs(b_ref).max(), 1.0)
    else:
        a_ref = np.linalg.solve(k_red, rhs_red)
    assert np.abs(a_new - a_ref).max() <= 1e-10 * max(np.abs(a_ref).max(), 1.0)


# -- trajectory behavior ---------------------------------------------------------


@pytest.mark.parametrize("scheme", ["lps", "graddiv"])
def test_zero_data_stays_zero(scheme):
    problem, _, _, _, vel_basis, pres_basis = cavity_setup(scheme, window=(0.02, 0.1))
    ops = build_rom_operators(
        problem, vel_basis, pres_basis if scheme == "lps" else None)
    run = run_rom(ops, dt=1e-2, n_steps=5, a0=np.zeros(ops.r), nu=5e-3)
    assert np.all(run.a_traj == 0.0)
    assert np.all(run.energy_traj == 0.0)


@pytest.mark.parametrize("scheme", ["lps", "graddiv"])
def test_implicit_euler_rom_dissipates_without_forcing(scheme):
    problem, _, _, _, vel_basis, pres_basis = cavity_setup(scheme, window=(0.02, 0.1))
    ops = build_rom_operators(
        problem, vel_basis, pres_basis if scheme == "lps" else None)
    rng = np.random.default_rng(5)
    a0 = rng.normal(size=ops.r)
    run = run_rom(ops, dt=5e-3, n_steps=8, a0=a0, nu=5e-3,
                  mu=(0.0 if scheme == "lps" else 0.3),
                  integrator="implicit_euler")
    norms = np.sqrt(np.einsum("it,ij,jt->t", run.a_traj, ops.mass, run.a_traj))
    assert np.all(np.diff(norms) <= 1e-12 * norms[0])


def test_implicit_euler_rom_reports_nonconvergence():
    problem, _, _, _, vel_basis, _ = cavity_setup("graddiv", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis)
    rng = np.random.default_rng(6)
    a0 = 50.0 * rng.normal(size=ops.r)
    with pytest.raises(NonlinearSolveError) as info:
        step_rom_implicit(ops, a0, dt=0.5, nu=5e-3, mu=0.3,
                          tolerance=1e-16, max_iterations=1)
    assert len(info.value.residual_history) == 1


def test_singular_reduced_system_raises():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("lps", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis, pres_basis)
    ops.divergence = np.zeros_like(ops.divergence)
    ops.lps_pressure = np.zeros_like(ops.lps_pressure)
    with pytest.raises(RuntimeError, match="singular"):
        step_rom(ops, np.zeros(ops.r), np.zeros(ops.r), 1e-2, 5e-3)


def test_run_rom_validation():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("lps", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis, pres_basis)
    a0 = np.zeros(ops.r)
    with pytest.raises(ValueError):
        run_rom(ops, dt=0.0, n_steps=1, a0=a0, nu=1e-2)
    with pytest.raises(ValueError):
        run_rom(ops, dt=1e-2, n_steps=0, a0=a0, nu=1e-2)
    with pytest.raises(ValueError):
        run_rom(ops, dt=1e-2, n_steps=1, a0=a0, nu=1e-2, integrator="rk4")
    with pytest.raises(ValueError):
        run_rom(ops, dt=1e-2, n_steps=1, a0=a0[:-1], nu=1e-2)
    with pytest.raises(ValueError):
        run_rom(ops, dt=1e-2, n_steps=1, a0=a0, nu=1e-2,
                adaptive=AdaptiveMuConfig())
    with pytest.raises(ValueError):
        run_rom(ops, dt=1e-2, n_steps=1, a0=a0, nu=1e-2,
                adaptive=AdaptiveMuConfig(), fom_energy_table=[1.0])
    with pytest.raises(ValueError):
        run_rom(ops, dt=1e-2, n_steps=1, a0=a0, nu=1e-2,
                forcing=lambda t: np.zeros(ops.r + 1))


# -- snapshot replay --------------------------------------------------------------


@pytest.mark.parametrize("scheme", ["lps", "graddiv"])
@pytest.mark.parametrize("center", [False, True])
def test_rom_replays_fom_snapshots(scheme, center):
    # exact replay needs every snapshot direction retained, so the window is
    # kept short (five levels) and the forcing strong enough that all five
    # eigenvalues clear the basis truncation threshold
    dt = 1e-2
    problem, run, vel_snaps, pres_snaps, vel_basis, pres_basis = cavity_setup(
        scheme, center=center, dt=dt, t_final=0.09, window=(0.045, 0.09),
        forcing=strong_swirl)
    times = vel_snaps.times
    assert times.size == 5
    # centering removes one direction: the fluctuations sum to zero
    assert vel_basis.rank == times.size - (1 if center else 0)
    assert abs((times[1] - times[0]) - dt) <= 1e-12
    ops = build_rom_operators(
        problem, vel_basis, pres_basis if scheme == "lps" else None)

    coeffs = np.column_stack([
        project_L2(vel_basis, problem.mass, vel_snaps.raw_fields()[:, j],
                   r=vel_basis.rank)
        for j in range(times.size)
    ])
    mu = problem.mu if scheme == "graddiv" else 0.0
    forcing = lambda t: reduce_forcing(ops, strong_swirl, t)
    rom = run_rom(ops, dt=dt, n_steps=times.size - 2, a0=coeffs[:, 1],
                  nu=problem.config.nu, a_prev=coeffs[:, 0],
                  t_start=times[1], forcing=forcing, mu=mu)

    recon = ops.vel_modes @ rom.a_traj
    if ops.mean is not None:
        recon = recon + ops.mean[:, None]
    fom_fields = vel_snaps.raw_fields()[:, 1:]
    err = discrete_l2_error(recon, fom_fields, problem.mass, dt)
    ref = discrete_l2_error(fom_fields, np.zeros_like(fom_fields), problem.mass, dt)
    assert err <= 1e-6 * ref
    if scheme == "lps":
        pres_fields = pres_snaps.fields[:, 2:]
        rom_pres = ops.pres_modes @ rom.b_traj[:, 1:]
        p_err = discrete_l2_error(rom_pres, pres_fields, problem.pressure_mass, dt)
        p_ref = discrete_l2_error(pres_fields, np.zeros_like(pres_fields),
                                  problem.pressure_mass, dt)
        assert p_err <= 1e-6 * max(p_ref, 1e-300)


# -- adaptive grad-div updates -----------------------------------------------------


def test_adapt_mu_reference_examples():
    cfg = AdaptiveMuConfig(frequency=5, delta=0.1, tolerance=1e-3, mu_min=0.1)
    table = [1.0]
    # too much reduced energy: raise the coefficient and redo the step
    mu, re_step = adapt_mu(2.4, 1.0 + 5e-3, table, cfg, step_index=5)
    assert mu == pytest.approx(2.5) and re_step
    # mismatch inside the tolerance: keep integrating
    mu, re_step = adapt_mu(2.4, 1.0 + 5e-4, table, cfg, step_index=5)
    assert mu == 2.4 and not re_step
    # too little energy near the floor: the floor wins
    mu, re_step = adapt_mu(0.15, 1.0 - 5e-3, table, cfg, step_index=5)
    assert mu == pytest.approx(0.1) and re_step


def test_adapt_mu_only_acts_on_schedule():
    cfg = AdaptiveMuConfig(frequency=5)
    table = [0.0]
    for n in (1, 2, 3, 4, 6, 7, 11, 13):
        mu, re_step = adapt_mu(0.5, 10.0, table, cfg, step_index=n)
        assert mu == 0.5 and not re_step
    mu, re_step = adapt_mu(0.5, 10.0, table, cfg, step_index=10)
    assert mu == pytest.approx(0.6) and re_step


def test_adapt_mu_no_restep_at_floor():
    cfg = AdaptiveMuConfig(frequency=1, mu_min=0.1, delta=0.1)
    mu, re_step = adapt_mu(0.1, -10.0, [0.0], cfg, step_index=1)
    assert mu == 0.1 and not re_step


def test_energy_mismatch_wraps_periodically():
    table = [10.0, 20.0, 30.0]
    assert energy_mismatch(11.0, table, 1) == pytest.approx(1.0)
    assert energy_mismatch(31.0, table, 3) == pytest.approx(1.0)
    assert energy_mismatch(12.0, table, 4) == pytest.approx(2.0)
    assert energy_mismatch(33.0, table, 6) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        energy_mismatch(1.0, [], 1)


def test_run_rom_updates_mu_only_at_schedule_multiples():
    problem, _, _, _, vel_basis, _ = cavity_setup("graddiv", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis)
    rng = np.random.default_rng(8)
    a0 = rng.normal(size=ops.r)
    cfg = AdaptiveMuConfig(frequency=5, delta=0.1, tolerance=1e-3, mu_min=0.1)
    # a zero reference table makes every comparison read "too much energy",
    # so the coefficient must climb by delta exactly at multiples of five
    run = run_rom(ops, dt=1e-3, n_steps=17, a0=a0, nu=5e-3, mu=0.3,
                  adaptive=cfg, fom_energy_table=[0.0], integrator="implicit_euler")
    changes = np.flatnonzero(np.diff(run.mu_traj) != 0.0) + 1
    assert list(changes) == [5, 10, 15]
    assert np.allclose(run.mu_traj[[0, 5, 10, 15]], [0.3, 0.4, 0.5, 0.6])
    assert np.all(run.mu_traj >= cfg.mu_min)
    recorded = run.e_diff_traj[1:]
    assert np.all(np.isfinite(recorded))
    assert np.all(recorded > 0.0)


# -- supremizers and pressure recovery ----------------------------------------------


def test_supremizers_solve_their_equations():
    problem, _, _, _, _, pres_basis = cavity_setup("graddiv", window=(0.02, 0.1))
    sup = compute_supremizers(problem, pres_basis)
    assert sup.raw_fields.shape[1] == pres_basis.r
    assert np.all(sup.residuals <= 1e-10)
    # zero values on the constrained boundary
    assert np.abs(sup.raw_fields[problem.constrained_velocity]).max() == 0.0
    gram = sup.fields.T @ (problem.stiffness @ sup.fields)
    assert np.abs(gram - np.eye(sup.fields.shape[1])).max() <= 1e-10


def test_constant_pressure_mode_gives_zero_supremizer():
    problem = cavity_problem("graddiv", nx=4)
    const = np.ones((problem.n_pressure, 1))
    sup = compute_supremizers(problem, const)
    assert np.abs(sup.raw_fields).max() <= 1e-12
    assert sup.dropped == (0,)
    assert sup.fields.shape[1] == 0


def test_orthonormalize_gradient_drops_dependent_columns():
    problem = cavity_problem("graddiv", nx=4)
    rng = np.random.default_rng(9)
    space = problem.vel_space
    base = rng.normal(size=(space.n_dofs, 2))
    base[problem.constrained_velocity] = 0.0
    fields = np.column_stack([base[:, 0], base[:, 1],
                              0.7 * base[:, 0] - 0.3 * base[:, 1]])
    ortho, kept = orthonormalize_gradient(fields, problem.stiffness)
    assert kept == [0, 1]
    assert ortho.shape[1] == 2


def test_supremizer_stability_is_remix_invariant():
    problem, _, _, _, _, pres_basis = cavity_setup("graddiv", window=(0.02, 0.1))
    sup = compute_supremizers(problem, pres_basis)
    beta = supremizer_stability(sup.fields, pres_basis.modes[:, :pres_basis.r],
                                problem.divergence, problem.mass, problem.stiffness)
    assert beta > 0.0
    rng = np.random.default_rng(10)
    remix = rng.normal(size=(sup.fields.shape[1],) * 2) \
        + 3.0 * np.eye(sup.fields.shape[1])
    beta_remixed = supremizer_stability(
        sup.fields @ remix, pres_basis.modes[:, :pres_basis.r],
        problem.divergence, problem.mass, problem.stiffness)
    assert abs(beta - beta_remixed) <= 1e-10 * beta


def test_supremizer_stability_matches_brute_force_for_two_modes():
    problem, _, _, _, _, pres_basis = cavity_setup("graddiv", window=(0.02, 0.1))
    psi = pres_basis.modes[:, :2]
    sup = compute_supremizers(problem, psi)
    z = sup.fields
    beta = supremizer_stability(z, psi, problem.divergence, problem.mass,
                                problem.stiffness)
    coupling = (psi.T @ (problem.divergence @ z)).T
    h = z.T @ ((problem.mass + problem.stiffness) @ z)
    h_inv = np.linalg.inv(h)
    worst = np.inf
    for theta in np.linspace(0.0, np.pi, 2001):
        q = np.array([np.cos(theta), np.sin(theta)])
        g = coupling @ q
        worst = min(worst, np.sqrt(g @ (h_inv @ g)))
    assert abs(worst - beta) <= 1e-3 * beta


def stokes_snapshots(problem, forcings):
    """Steady solutions of the problem for a list of body forces."""
    velocities, pressures, loads = [], [], []
    for f in forcings:
        steady_case = FlowCase(problem.case.name, dirichlet=problem.case.dirichlet,
                               forcing=f, zero_mean_pressure=True)
        steady = FOMProblem(problem.mesh, problem.config, steady_case)
        u, p = solve_stokes(steady)
        velocities.append(u.coefficients)
        pressures.append(p.coefficients)
        loads.append(steady.load_vector(0.0))
    return np.column_stack(velocities), np.column_stack(pressures), loads


def test_pressure_recovery_is_exact_for_steady_stokes():
    problem = cavity_problem("graddiv", nx=6, mu=0.4)
    forcings = [
        lambda x, y, t: (np.sin(np.pi * y), np.sin(np.pi * x)),
        lambda x, y, t: (np.cos(np.pi * x) * y, np.zeros_like(x)),
        lambda x, y, t: (x * (1 - x), -y * (1 - y)),
    ]
    vels, pres, loads = stokes_snapshots(problem, forcings)
    vel_basis = build_basis(
        type("S", (), {"fields": vels, "mean": None,
                       "space_signature": problem.vel_space.signature()})(),
        problem.mass)
    pres_basis = build_basis(
        type("S", (), {"fields": pres, "mean": None,
                       "space_signature": problem.pres_space.signature()})(),
        problem.pressure_mass)
    sup = compute_supremizers(problem, pres_basis)
    recovery = PressureRecovery(problem, vel_basis, pres_basis, sup,
                                include_convection=False)
    for j, load in enumerate(loads):
        a = project_L2(vel_basis, problem.mass, vels[:, j], r=vel_basis.rank)
        forcing_z = sup.fields.T @ load
        b = recovery.recover(a, mu=problem.mu, forcing=forcing_z)
        recovered = pres_basis.modes[:, :pres_basis.rank] @ b
        diff = recovered - pres[:, j]
        err = np.sqrt(diff @ (problem.pressure_mass @ diff))
        ref = np.sqrt(pres[:, j] @ (problem.pressure_mass @ pres[:, j]))
        assert err <= 1e-8 * ref


def test_pressure_recovery_requires_square_system():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("graddiv", window=(0.02, 0.1))
    sup = compute_supremizers(problem, pres_basis, r=pres_basis.r - 1)
    with pytest.raises(ValueError):
        PressureRecovery(problem, vel_basis, pres_basis, sup)


def test_pressure_recovery_trajectory_is_finite():
    problem, run, vel_snaps, pres_snaps, vel_basis, pres_basis = cavity_setup(
        "graddiv", window=(0.02, 0.1))
    sup = compute_supremizers(problem, pres_basis)
    recovery = PressureRecovery(problem, vel_basis, pres_basis, sup)
    ops = build_rom_operators(problem, vel_basis)
    rom = run_rom(ops, dt=1e-2, n_steps=6,
                  a0=project_L2(vel_basis, problem.mass, vel_snaps.fields[:, 0]),
                  nu=problem.config.nu, mu=problem.mu,
                  forcing=lambda t: reduce_forcing(ops, swirl_forcing, t))
    forcing_values = np.column_stack(
        [recovery.reduce_forcing(swirl_forcing, t) for t in rom.times])
    b_traj = recovery.recover_trajectory(rom.a_traj, dt=1e-2, mu=problem.mu,
                                         forcing_values=forcing_values)
    assert b_traj.shape == (pres_basis.r, rom.times.size)
    assert np.all(np.isfinite(b_traj))


def test_operator_container_round_trip(tmp_path):
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("lps", window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis, pres_basis)
    path = tmp_path / "ops.bin"
    save_operators(ops, path)
    loaded = load_operators(path, expected_signature=problem.vel_space.signature())
    assert loaded.scheme == "lps"
    assert loaded.r == ops.r and loaded.r_pressure == ops.r_pressure
    for name in ("mass", "stiffness", "grad_div", "lps_velocity",
                 "convection_tensor", "convect_by_mean", "transport_of_mean",
                 "mean_convection", "viscous_mean", "grad_div_mean",
                 "lps_velocity_mean", "mass_mean", "divergence",
                 "lps_pressure", "divergence_mean"):
        assert np.array_equal(getattr(loaded, name), getattr(ops, name)), name
    assert loaded.mean_energy == ops.mean_energy
    with pytest.raises(ValueError):
        load_operators(path, expected_signature="deadbeef")
    # a loaded container can step the reduced system
    a, b = step_rom(loaded, np.zeros(ops.r), np.zeros(ops.r), 1e-2, 5e-3)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))


def test_velocity_only_operator_container_round_trip(tmp_path):
    problem, _, _, _, vel_basis, _ = cavity_setup("graddiv", center=True,
                                                  window=(0.02, 0.1))
    ops = build_rom_operators(problem, vel_basis)
    path = tmp_path / "ops.bin"
    save_operators(ops, path)
    loaded = load_operators(path)
    assert loaded.scheme == "graddiv"
    assert loaded.divergence is None and loaded.r_pressure is None
    assert np.array_equal(loaded.transport_of_mean, ops.transport_of_mean)
    assert loaded.mean_energy == ops.mean_energy


def test_principal_angle_cosine_bounds_and_extremes():
    problem, _, _, _, vel_basis, pres_basis = cavity_setup("graddiv", window=(0.02, 0.1))
    sup = compute_supremizers(problem, pres_basis)
    alpha = principal_angle_cosine(vel_basis.modes[:, : vel_basis.r], sup,
                                   problem.stiffness)
    assert 0.0 <= alpha <= 1.0
    # a span compared against itself gives cosine one
    self_alpha = principal_angle_cosine(sup.fields, sup.fields, problem.stiffness)
    assert self_alpha == pytest.approx(1.0, abs=1e-10)
    # gradient-orthogonal complement gives cosine zero: gram-schmidt a random
    # field against the supremizers in the gradient metric
    rng = np.random.default_rng(11)
    w = rng.normal(size=problem.n_velocity)
    w[problem.constrained_velocity] = 0.0
    for _ in range(2):
        for k in range(sup.fields.shape[1]):
            q = sup.fields[:, k]
            w -= float(q @ (problem.stiffness @ w)) * q
    ortho_alpha = principal_angle_cosine(w, sup.fields, problem.stiffness)
    assert ortho_alpha <= 1e-8
