"""Reduced-order flow models built by Galerkin projection onto POD modes.

The equal-order scheme keeps a coupled reduced velocity-pressure system with
its fluctuation stabilization; the divergence-stable scheme integrates a
velocity-only system with a grad-div term whose coefficient can adapt in
time against a reference energy table, and recovers pressure afterwards
through supremizer test functions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .assembly import assemble_grad_div, assemble_load, convection_matrix
from .fe_space import FEField
from .fom import NonlinearSolveError

_SCHEMES = ("lps", "graddiv")
_OPERATOR_MAGIC = b"PRO1"


@dataclass(frozen=True)
class AdaptiveMuConfig:
    """Update rule parameters for the in-time grad-div coefficient.

    Every ``frequency`` steps the reduced kinetic energy is compared with a
    periodic reference table; a mismatch beyond ``tolerance`` moves the
    coefficient by ``delta`` toward the reference, never below ``mu_min``.
    """

    frequency: int = 5
    delta: float = 0.1
    tolerance: float = 1e-3
    mu_min: float = 0.1

    def __post_init__(self):
        if self.frequency < 1:
            raise ValueError("update frequency must be a positive step count")
        if self.delta <= 0.0:
            raise ValueError("coefficient increment must be positive")
        if self.tolerance <= 0.0:
            raise ValueError("energy tolerance must be positive")
        if self.mu_min <= 0.0:
            raise ValueError("coefficient floor must be positive")


@dataclass
class ROMOperators:
    """Assembled operators projected onto the leading modes.

    ``convection_tensor[i, j, k]`` is the trilinear form of modes
    ``(i, j, k)`` with mode ``i`` convecting. The ``*_mean`` vectors and the
    mean/mode convection couplings lift a centered basis; they are zero
    when the basis was built from uncentered snapshots. Pressure-side
    blocks are ``None`` for the velocity-only scheme.
    """

    scheme: str
    r: int
    mass: np.ndarray
    stiffness: np.ndarray
    grad_div: np.ndarray
    lps_velocity: np.ndarray
    convection_tensor: np.ndarray
    convect_by_mean: np.ndarray
    transport_of_mean: np.ndarray
    mean_convection: np.ndarray
    viscous_mean: np.ndarray
    grad_div_mean: np.ndarray
    lps_velocity_mean: np.ndarray
    mass_mean: np.ndarray
    mean_energy: float
    vel_modes: np.ndarray
    mean: np.ndarray = None
    divergence: np.ndarray = None
    lps_pressure: np.ndarray = None
    divergence_mean: np.ndarray = None
    pres_modes: np.ndarray = None
    vel_space: object = None

    @property
    def r_pressure(self):
        return None if self.divergence is None else int(self.divergence.shape[0])


def build_rom_operators(problem, vel_basis, pres_basis=None, r=None,
                        r_pressure=None):
    """Project the problem's operators onto the first modes of the bases.

    The equal-order scheme requires a pressure basis for its coupled
    system; the velocity-only scheme ignores ``pres_basis`` here (pressure
    enters through supremizer recovery instead).
    """
    scheme = problem.config.scheme
    if vel_basis.space_signature != problem.vel_space.signature():
        raise ValueError("velocity basis was built on a different space")
    r = vel_basis.r if r is None else int(r)
    if not 1 <= r <= vel_basis.rank:
        raise ValueError(f"requested r={r} outside 1..{vel_basis.rank}")
    phi = vel_basis.modes[:, :r]
    mean = vel_basis.mean

    mass = phi.T @ (problem.mass @ phi)
    stiffness = phi.T @ (problem.stiffness @ phi)
    unit_grad_div = problem.grad_div
    if unit_grad_div is None:
        unit_grad_div = assemble_grad_div(problem.vel_space, 1.0)
    grad_div = phi.T @ (unit_grad_div @ phi)
    if problem.velocity_stabilization is not None:
        lps_velocity = phi.T @ (problem.velocity_stabilization @ phi)
    else:
        lps_velocity = np.zeros((r, r))

    tensor = np.empty((r, r, r))
    conv_matrices = []
    for i in range(r):
        c_i = convection_matrix(problem.vel_space, FEField(problem.vel_space, phi[:, i]))
        conv_matrices.append(c_i)
        tensor[i] = (phi.T @ (c_i @ phi)).T

    if mean is not None:
        c_mean = convection_matrix(problem.vel_space, FEField(problem.vel_space, mean))
        convect_by_mean = phi.T @ (c_mean @ phi)
        transport_of_mean = np.column_stack(
            [phi.T @ (c_j @ mean) for c_j in conv_matrices]
        )
        mean_convection = phi.T @ (c_mean @ mean)
        viscous_mean = phi.T @ (problem.stiffness @ mean)
        grad_div_mean = phi.T @ (unit_grad_div @ mean)
        if problem.velocity_stabilization is not None:
            lps_velocity_mean = phi.T @ (problem.velocity_stabilization @ mean)
        else:
            lps_velocity_mean = np.zeros(r)
        mass_mean = phi.T @ (problem.mass @ mean)
        mean_energy = float(mean @ (problem.mass @ mean))
    else:
        convect_by_mean = np.zeros((r, r))
        transport_of_mean = np.zeros((r, r))
        mean_convection = np.zeros(r)
        viscous_mean = np.zeros(r)
        grad_div_mean = np.zeros(r)
        lps_velocity_mean = np.zeros(r)
        mass_mean = np.zeros(r)
        mean_energy = 0.0

    divergence = lps_pressure = divergence_mean = pres_modes = None
    if scheme == "lps":
        if pres_basis is None:
            raise ValueError("the equal-order reduced system needs a pressure basis")
        if pres_basis.space_signature != problem.pres_space.signature():
            raise ValueError("pressure basis was built on a different space")
        rp = pres_basis.r if r_pressure is None else int(r_pressure)
        if not 1 <= rp <= pres_basis.rank:
            raise ValueError(f"requested pressure size {rp} outside 1..{pres_basis.rank}")
        psi = pres_basis.modes[:, :rp]
        divergence = psi.T @ (problem.divergence @ phi)
        lps_pressure = psi.T @ (problem.pressure_stabilization @ psi)
        if mean is not None:
            divergence_mean = psi.T @ (problem.divergence @ mean)
        else:
            divergence_mean = np.zeros(rp)
        pres_modes = psi

    return ROMOperators(
        scheme=scheme,
        r=r,
        mass=mass,
        stiffness=stiffness,
        grad_div=grad_div,
        lps_velocity=lps_velocity,
        convection_tensor=tensor,
        convect_by_mean=convect_by_mean,
        transport_of_mean=transport_of_mean,
        mean_convection=mean_convection,
        viscous_mean=viscous_mean,
        grad_div_mean=grad_div_mean,
        lps_velocity_mean=lps_velocity_mean,
        mass_mean=mass_mean,
        mean_energy=mean_energy,
        vel_modes=phi,
        mean=None if mean is None else np.asarray(mean, dtype=float),
        divergence=divergence,
        lps_pressure=lps_pressure,
        divergence_mean=divergence_mean,
        pres_modes=pres_modes,
        vel_space=problem.vel_space,
    )


def truncate_operators(ops, r, r_pressure=None):
    """Restrict operators to a smaller leading block without reassembly."""
    if not 1 <= r <= ops.r:
        raise ValueError(f"truncation size {r} outside 1..{ops.r}")
    rp = None
    if ops.divergence is not None:
        rp = ops.r_pressure if r_pressure is None else int(r_pressure)
        if not 1 <= rp <= ops.r_pressure:
            raise ValueError(f"pressure truncation {rp} outside 1..{ops.r_pressure}")
    return ROMOperators(
        scheme=ops.scheme,
        r=int(r),
        mass=ops.mass[:r, :r],
        stiffness=ops.stiffness[:r, :r],
        grad_div=ops.grad_div[:r, :r],
        lps_velocity=ops.lps_velocity[:r, :r],
        convection_tensor=ops.convection_tensor[:r, :r, :r],
        convect_by_mean=ops.convect_by_mean[:r, :r],
        transport_of_mean=ops.transport_of_mean[:r, :r],
        mean_convection=ops.mean_convection[:r],
        viscous_mean=ops.viscous_mean[:r],
        grad_div_mean=ops.grad_div_mean[:r],
        lps_velocity_mean=ops.lps_velocity_mean[:r],
        mass_mean=ops.mass_mean[:r],
        mean_energy=ops.mean_energy,
        vel_modes=ops.vel_modes[:, :r],
        mean=ops.mean,
        divergence=None if ops.divergence is None else ops.divergence[:rp, :r],
        lps_pressure=None if ops.lps_pressure is None else ops.lps_pressure[:rp, :rp],
        divergence_mean=None if ops.divergence_mean is None else ops.divergence_mean[:rp],
        pres_modes=None if ops.pres_modes is None else ops.pres_modes[:, :rp],
        vel_space=ops.vel_space,
    )


def rom_kinetic_energy(ops, a):
    """Kinetic energy of the reconstructed full-order field."""
    a = np.asarray(a, dtype=float)
    return 0.5 * float(a @ (ops.mass @ a) + 2.0 * (ops.mass_mean @ a) + ops.mean_energy)


def reduce_forcing(ops, forcing, t):
    """Project a body force callable onto the velocity modes at one time."""
    load = assemble_load(ops.vel_space, forcing, t)
    return ops.vel_modes.T @ load


def _reduced_velocity_block(ops, a_hat, dt, nu, mu, alpha):
    conv = ops.convect_by_mean + np.einsum("i,ijk->kj", a_hat, ops.convection_tensor)
    block = (alpha / dt) * ops.mass + nu * ops.stiffness + ops.lps_velocity \
        + mu * ops.grad_div + conv
    lift = nu * ops.viscous_mean + ops.lps_velocity_mean + mu * ops.grad_div_mean \
        + ops.mean_convection + ops.transport_of_mean @ a_hat
    return block, lift


def _solve_reduced(ops, block, rhs_velocity):
    r = ops.r
    if ops.divergence is None:
        try:
            a = np.linalg.solve(block, rhs_velocity)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"reduced velocity system of size {r} is singular") from exc
        if not np.all(np.isfinite(a)):
            raise RuntimeError("reduced velocity solve produced non-finite values")
        return a, None
    system = np.block([
        [block, -ops.divergence.T],
        [ops.divergence, ops.lps_pressure],
    ])
    rhs = np.concatenate([rhs_velocity, -ops.divergence_mean])
    try:
        x = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(
            f"coupled reduced system ({r} velocity, {ops.r_pressure} pressure modes)"
            " is singular"
        ) from exc
    if not np.all(np.isfinite(x)):
        raise RuntimeError("coupled reduced solve produced non-finite values")
    return x[:r], x[r:]


def step_rom(ops, a_now, a_prev, dt, nu, mu=0.0, forcing=None):
    """One semi-implicit step: extrapolated convection, implicit the rest.

    Returns the new velocity coefficients and, for the coupled scheme, the
    pressure coefficients of the same time level.
    """
    a_now = np.asarray(a_now, dtype=float)
    a_prev = np.asarray(a_prev, dtype=float)
    a_hat = 2.0 * a_now - a_prev
    block, lift = _reduced_velocity_block(ops, a_hat, dt, nu, mu, alpha=1.5)
    rhs = ops.mass @ ((4.0 * a_now - a_prev) / (2.0 * dt)) - lift
    if forcing is not None:
        rhs = rhs + np.asarray(forcing, dtype=float)
    return _solve_reduced(ops, block, rhs)


def step_rom_implicit(ops, a_now, dt, nu, mu=0.0, forcing=None,
                      tolerance=1e-10, max_iterations=50):
    """One implicit Euler step with Picard iteration on the convection."""
    a_now = np.asarray(a_now, dtype=float)
    rhs_time = ops.mass @ (a_now / dt)
    if forcing is not None:
        rhs_time = rhs_time + np.asarray(forcing, dtype=float)
    convecting = a_now
    history = []
    for _ in range(max_iterations):
        block, lift = _reduced_velocity_block(ops, convecting, dt, nu, mu, alpha=1.0)
        a_new, b_new = _solve_reduced(ops, block, rhs_time - lift)
        diff = a_new - convecting
        denom = np.sqrt(max(float(a_new @ (ops.mass @ a_new)), 1e-300))
        change = np.sqrt(max(float(diff @ (ops.mass @ diff)), 0.0)) / denom
        history.append(change)
        if change <= tolerance:
            return a_new, b_new
        convecting = a_new
    raise NonlinearSolveError(
        f"reduced Picard iteration did not reach {tolerance:.1e} in "
        f"{max_iterations} sweeps",
        history,
    )


def energy_mismatch(rom_energy, fom_energy_table, step_index):
    """Energy difference against the periodic reference at this step.

    The table holds one period of full-order energies at steps ``1..M``;
    step ``n`` compares against entry ``n mod M`` with ``0`` meaning ``M``.
    """
    table = np.asarray(fom_energy_table, dtype=float)
    m = table.size
    if m == 0:
        raise ValueError("reference energy table is empty")
    idx = step_index % m
    if idx == 0:
        idx = m
    return float(rom_energy - table[idx - 1])


def adapt_mu(mu, rom_energy, fom_energy_table, config, step_index):
    """Grad-div coefficient update at one step of the reduced integration.

    Returns the (possibly unchanged) coefficient and whether the step must
    be recomputed with it. Updates happen only at multiples of the
    configured frequency: too much reduced energy raises the coefficient by
    ``delta``, too little lowers it, and the floor ``mu_min`` always wins.
    """
    mu = float(mu)
    if step_index % config.frequency != 0:
        return mu, False
    e_diff = energy_mismatch(rom_energy, fom_energy_table, step_index)
    if e_diff > config.tolerance:
        mu_new = max(config.mu_min, mu + config.delta)
    elif e_diff < -config.tolerance:
        mu_new = max(config.mu_min, mu - config.delta)
    else:
        mu_new = mu
    return mu_new, mu_new != mu


@dataclass
class ROMRun:
    """Trajectory of one reduced integration."""

    times: np.ndarray
    a_traj: np.ndarray
    b_traj: np.ndarray  # None for the velocity-only scheme
    mu_traj: np.ndarray
    e_diff_traj: np.ndarray  # nan where no reference table applies
    energy_traj: np.ndarray


def run_rom(ops, dt, n_steps, a0, *, nu, a_prev=None, t_start=0.0,
            forcing=None, mu=0.0, adaptive=None, fom_energy_table=None,
            integrator="bdf2_semi_implicit", nonlinear_tolerance=1e-10,
            nonlinear_max_iterations=50):
    """Integrate the reduced model over ``n_steps`` uniform steps.

    ``a0`` is the state at ``t_start``; ``a_prev`` optionally supplies the
    previous level so the two-step formula starts from genuine history
    (without it the first step falls back to the one-level formula through
    equal history levels). ``forcing`` is a callable ``t -> (r,)`` array of
    reduced loads. With ``adaptive`` and ``fom_energy_table`` given, the
    grad-div coefficient follows the update rule, re-stepping once whenever
    it changes; each accepted step records the energy mismatch.
    """
    if dt <= 0.0:
        raise ValueError("step size must be positive")
    if n_steps < 1:
        raise ValueError("need at least one step")
    if integrator not in ("bdf2_semi_implicit", "implicit_euler"):
        raise ValueError(f"unknown integrator {integrator!r}")
    if adaptive is not None:
        if fom_energy_table is None:
            raise ValueError("adaptive updates need a reference energy table")
        if ops.scheme != "graddiv":
            raise ValueError("adaptive grad-div updates apply to the divergence-stable scheme")

    r = ops.r
    a = np.array(a0, dtype=float)
    if a.shape != (r,):
        raise ValueError(f"initial state must have shape ({r},)")
    previous = a.copy() if a_prev is None else np.array(a_prev, dtype=float)
    if previous.shape != (r,):
        raise ValueError(f"history state must have shape ({r},)")
    mu = float(mu)

    nt = n_steps + 1
    times = t_start + dt * np.arange(nt)
    a_traj = np.empty((r, nt))
    a_traj[:, 0] = a
    b_traj = None
    if ops.divergence is not None:
        b_traj = np.zeros((ops.r_pressure, nt))
    mu_traj = np.empty(nt)
    mu_traj[0] = mu
    e_diff_traj = np.full(nt, np.nan)
    energy_traj = np.empty(nt)
    energy_traj[0] = rom_kinetic_energy(ops, a)

    for n in range(1, nt):
        t = times[n]
        f_r = None
        if forcing is not None:
            f_r = np.asarray(forcing(t), dtype=float)
            if f_r.shape != (r,):
                raise ValueError(f"reduced forcing at t={t} must have shape ({r},)")

        def advance(mu_value):
            if integrator == "bdf2_semi_implicit":
                return step_rom(ops, a, previous, dt, nu, mu=mu_value, forcing=f_r)
            return step_rom_implicit(
                ops, a, dt, nu, mu=mu_value, forcing=f_r,
                tolerance=nonlinear_tolerance,
                max_iterations=nonlinear_max_iterations,
            )

        try:
            a_new, b_new = advance(mu)
            if adaptive is not None:
                trial_energy = rom_kinetic_energy(ops, a_new)
                mu_new, re_step = adapt_mu(mu, trial_energy, fom_energy_table,
                                           adaptive, n)
                if re_step:
                    mu = mu_new
                    a_new, b_new = advance(mu)
        except RuntimeError as exc:
            raise RuntimeError(f"reduced step {n} at t={t:.6g} failed: {exc}") from exc

        energy = rom_kinetic_energy(ops, a_new)
        if fom_energy_table is not None:
            e_diff_traj[n] = energy_mismatch(energy, fom_energy_table, n)
        a_traj[:, n] = a_new
        if b_traj is not None:
            b_traj[:, n] = b_new
        mu_traj[n] = mu
        energy_traj[n] = energy
        previous, a = a, a_new

    return ROMRun(
        times=times,
        a_traj=a_traj,
        b_traj=b_traj,
        mu_traj=mu_traj,
        e_diff_traj=e_diff_traj,
        energy_traj=energy_traj,
    )


# -- supremizer enrichment and pressure recovery -------------------------------


@dataclass
class SupremizerSet:
    """Velocity fields dual to pressure modes through the divergence form.

    ``raw_fields`` solve the constrained gradient problem one pressure mode
    at a time; ``fields`` are their gradient-orthonormalized span with
    dependent or vanishing columns dropped (their indices in ``dropped``).
    ``residuals`` record the relative algebraic residual of each solve.
    """

    raw_fields: np.ndarray
    fields: np.ndarray
    residuals: np.ndarray
    dropped: tuple


def _pressure_mode_array(pres_modes, r=None):
    modes = getattr(pres_modes, "modes", pres_modes)
    modes = np.asarray(modes, dtype=float)
    if modes.ndim == 1:
        modes = modes[:, None]
    if r is not None:
        modes = modes[:, : int(r)]
    return modes


def compute_supremizers(problem, pres_modes, r=None, drop_tolerance=1e-10):
    """Solve (grad s, grad v) = (psi, div v) for each pressure mode.

    The test space carries the problem's velocity Dirichlet constraints, so
    each supremizer has zero boundary values. A solution whose gradient
    norm is negligible against its pressure mode's norm carries no
    divergence coupling (a constant mode, for instance) and is dropped
    before orthonormalization.
    """
    psi = _pressure_mode_array(pres_modes, r)
    free = problem.free_velocity
    a_ff = problem.stiffness.tocsr()[free][:, free].tocsc()
    lu = spla.splu(a_ff)
    n = problem.n_velocity
    m = psi.shape[1]
    raw = np.zeros((n, m))
    residuals = np.empty(m)
    rhs_all = problem.divergence.T @ psi
    for k in range(m):
        rhs = rhs_all[free, k]
        sol = lu.solve(rhs)
        raw[free, k] = sol
        residuals[k] = np.linalg.norm(a_ff @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    sup_norms = np.sqrt(np.maximum(
        np.einsum("ik,ik->k", raw, problem.stiffness @ raw), 0.0))
    psi_norms = np.sqrt(np.maximum(
        np.einsum("ik,ik->k", psi, problem.pressure_mass @ psi), 0.0))
    eligible = [k for k in range(m)
                if sup_norms[k] > drop_tolerance * max(psi_norms[k], 1e-300)]
    fields, kept_local = orthonormalize_gradient(raw[:, eligible],
                                                 problem.stiffness)
    kept = {eligible[i] for i in kept_local}
    dropped = tuple(sorted(set(range(m)) - kept))
    return SupremizerSet(raw_fields=raw, fields=fields,
                         residuals=residuals, dropped=dropped)


def orthonormalize_gradient(fields, stiffness, drop_tolerance=1e-10):
    """Modified Gram-Schmidt in the gradient inner product.

    One re-orthogonalization pass keeps the set orthonormal to rounding.
    A column is dropped when its gradient norm is negligible against the
    largest column (a roundoff-sized field would otherwise be normalized
    into noise) or when its projected remainder falls below
    ``drop_tolerance`` times its original norm. Returns the orthonormal
    columns and the kept input indices.
    """
    fields = np.asarray(fields, dtype=float)
    norms = np.array([
        np.sqrt(max(float(fields[:, k] @ (stiffness @ fields[:, k])), 0.0))
        for k in range(fields.shape[1])
    ])
    scale = norms.max() if norms.size else 0.0
    kept_columns = []
    kept_indices = []
    for k in range(fields.shape[1]):
        original = norms[k]
        if original <= drop_tolerance * scale:
            continue
        v = fields[:, k].copy()
        for _ in range(2):
            for q in kept_columns:
                v -= float(q @ (stiffness @ v)) * q
        norm = np.sqrt(max(float(v @ (stiffness @ v)), 0.0))
        if norm <= drop_tolerance * original:
            continue
        kept_columns.append(v / norm)
        kept_indices.append(k)
    if kept_columns:
        out = np.column_stack(kept_columns)
    else:
        out = np.zeros((fields.shape[0], 0))
    return out, kept_indices


def supremizer_stability(supremizer_fields, pres_modes, divergence, mass,
                         stiffness):
    """Discrete inf-sup constant of the pressure modes over the enrichment.

    Computes the smallest singular value of the divergence coupling
    whitened by the full velocity norm (mass plus gradient) of the
    supremizer span.
    """
    z = getattr(supremizer_fields, "fields", supremizer_fields)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[1] == 0:
        return 0.0
    psi = _pressure_mode_array(pres_modes)
    coupling = (psi.T @ (divergence @ z)).T
    h = z.T @ (mass @ z) + z.T @ (stiffness @ z)
    chol = np.linalg.cholesky(0.5 * (h + h.T))
    whitened = sla.solve_triangular(chol, coupling, lower=True)
    return float(np.linalg.svd(whitened, compute_uv=False).min())


class PressureRecovery:
    """Reduced pressure reconstruction tested against supremizers.

    For a reduced velocity state the pressure coefficients solve
    ``(p, div z_k) = (du/dt, z_k) + conv(u, u, z_k) + mu (div u, div z_k)
    - (f, z_k)`` over the supremizer set; the viscous term is absent
    because supremizers annihilate it on discretely divergence-free
    fields. The system is square: one supremizer per pressure mode.
    """

    def __init__(self, problem, vel_basis, pres_basis, supremizers,
                 include_convection=True):
        z = getattr(supremizers, "fields", supremizers)
        z = np.asarray(z, dtype=float)
        phi = vel_basis.modes[:, : vel_basis.r]
        psi = pres_basis.modes[:, : pres_basis.r]
        if z.shape[1] != psi.shape[1]:
            raise ValueError(
                f"need one supremizer per pressure mode: got {z.shape[1]} "
                f"for {psi.shape[1]} modes"
            )
        mean = vel_basis.mean
        r = phi.shape[1]

        self.include_convection = bool(include_convection)
        self.coupling = (psi.T @ (problem.divergence @ z)).T
        self.mass_cross = z.T @ (problem.mass @ phi)
        unit_grad_div = problem.grad_div
        if unit_grad_div is None:
            unit_grad_div = assemble_grad_div(problem.vel_space, 1.0)
        self.grad_div_cross = z.T @ (unit_grad_div @ phi)
        if mean is not None:
            self.grad_div_mean = z.T @ (unit_grad_div @ mean)
        else:
            self.grad_div_mean = np.zeros(z.shape[1])

        if self.include_convection:
            tensors = np.empty((r, z.shape[1], r))
            conv_matrices = []
            for i in range(r):
                c_i = convection_matrix(problem.vel_space,
                                        FEField(problem.vel_space, phi[:, i]))
                conv_matrices.append(c_i)
                tensors[i] = z.T @ (c_i @ phi)
            self.convection_tensor = tensors
            if mean is not None:
                c_mean = convection_matrix(problem.vel_space,
                                           FEField(problem.vel_space, mean))
                self.convect_by_mean = z.T @ (c_mean @ phi)
                self.transport_of_mean = np.column_stack(
                    [z.T @ (c_j @ mean) for c_j in conv_matrices]
                )
                self.mean_convection = z.T @ (c_mean @ mean)
            else:
                self.convect_by_mean = np.zeros((z.shape[1], r))
                self.transport_of_mean = np.zeros((z.shape[1], r))
                self.mean_convection = np.zeros(z.shape[1])

        self.fields = z
        self.vel_space = problem.vel_space

    def reduce_forcing(self, forcing, t):
        """Project a body force callable onto the supremizers at one time."""
        return self.fields.T @ assemble_load(self.vel_space, forcing, t)

    def right_hand_side(self, a, dadt=None, mu=0.0, forcing=None):
        a = np.asarray(a, dtype=float)
        rhs = np.zeros(self.coupling.shape[0])
        if dadt is not None:
            rhs = rhs + self.mass_cross @ np.asarray(dadt, dtype=float)
        if self.include_convection:
            rhs = rhs + self.mean_convection \
                + self.convect_by_mean @ a + self.transport_of_mean @ a \
                + np.einsum("i,ikj,j->k", a, self.convection_tensor, a)
        if mu != 0.0:
            rhs = rhs + mu * (self.grad_div_cross @ a + self.grad_div_mean)
        if forcing is not None:
            rhs = rhs - np.asarray(forcing, dtype=float)
        return rhs

    def recover(self, a, dadt=None, mu=0.0, forcing=None):
        """Pressure coefficients of one reduced velocity state."""
        rhs = self.right_hand_side(a, dadt=dadt, mu=mu, forcing=forcing)
        try:
            b = np.linalg.solve(self.coupling, rhs)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError("supremizer pressure system is singular") from exc
        if not np.all(np.isfinite(b)):
            raise RuntimeError("pressure recovery produced non-finite values")
        return b

    def recover_trajectory(self, a_traj, dt, mu=0.0, a_prev=None,
                           forcing_values=None):
        """Recover pressure along a trajectory with two-step time slopes.

        Column ``n >= 1`` uses the same difference stencil as the
        integrator: the three-level formula once two history levels exist,
        the backward difference on the very first step. Column 0 uses the
        backward difference against ``a_prev`` when given and a zero slope
        otherwise. ``forcing_values`` is an optional (n_supremizers, nt)
        array of projected loads at the trajectory times.
        """
        a_traj = np.asarray(a_traj, dtype=float)
        nt = a_traj.shape[1]
        out = np.empty((self.coupling.shape[0], nt))
        for n in range(nt):
            if n == 0:
                if a_prev is not None:
                    dadt = (a_traj[:, 0] - np.asarray(a_prev, dtype=float)) / dt
                else:
                    dadt = np.zeros(a_traj.shape[0])
            elif n == 1 and a_prev is None:
                dadt = (a_traj[:, 1] - a_traj[:, 0]) / dt
            else:
                back2 = np.asarray(a_prev, dtype=float) if n == 1 else a_traj[:, n - 2]
                dadt = (3.0 * a_traj[:, n] - 4.0 * a_traj[:, n - 1] + back2) / (2.0 * dt)
            f_n = None if forcing_values is None else forcing_values[:, n]
            out[:, n] = self.recover(a_traj[:, n], dadt=dadt, mu=mu, forcing=f_n)
        return out


def principal_angle_cosine(vel_modes, supremizer_fields, stiffness):
    """Largest principal-angle cosine between two spans in the gradient metric.

    Measures how close the supremizer span comes to the reduced velocity
    span: 0 for gradient-orthogonal spaces, approaching 1 when they share a
    direction. Used as the default coupling constant of the reduced
    pressure error indicator.
    """
    phi = np.asarray(getattr(vel_modes, "modes", vel_modes), dtype=float)
    z = np.asarray(getattr(supremizer_fields, "fields", supremizer_fields), dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if z.ndim == 1:
        z = z[:, None]
    if phi.shape[1] == 0 or z.shape[1] == 0:
        return 0.0
    g_vv = phi.T @ (stiffness @ phi)
    g_zz = z.T @ (stiffness @ z)
    g_vz = phi.T @ (stiffness @ z)
    l_v = sla.cholesky(g_vv, lower=True)
    l_z = sla.cholesky(g_zz, lower=True)
    w = sla.solve_triangular(l_v, g_vz, lower=True)
    w = sla.solve_triangular(l_z, w.T, lower=True).T
    return float(min(sla.svdvals(w).max(), 1.0))


def save_operators(ops, path):
    """Write the reduced arrays as a binary container keyed by the space.

    Stores every array needed to step the reduced system (not the modes or
    the mean field, which live with the basis container); a loaded set can
    be integrated but not reconstructed to full-order fields.
    """
    signature = ""
    if ops.vel_space is not None:
        signature = ops.vel_space.signature()
    rp = 0 if ops.divergence is None else ops.r_pressure
    header = struct.pack(
        "<4s16s8sQQ",
        _OPERATOR_MAGIC,
        signature.encode("ascii"),
        ops.scheme.encode("ascii"),
        int(ops.r),
        int(rp),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in ("mass", "stiffness", "grad_div", "lps_velocity",
                     "convection_tensor", "convect_by_mean",
                     "transport_of_mean", "mean_convection", "viscous_mean",
                     "grad_div_mean", "lps_velocity_mean", "mass_mean"):
            fh.write(np.ascontiguousarray(getattr(ops, name), dtype="<f8").tobytes())
        fh.write(struct.pack("<d", float(ops.mean_energy)))
        if rp:
            for name in ("divergence", "lps_pressure", "divergence_mean"):
                fh.write(np.ascontiguousarray(getattr(ops, name), dtype="<f8").tobytes())


def load_operators(path, expected_signature=None):
    """Read a reduced-operator container written by :func:`save_operators`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4s16s8sQQ")
    magic, signature, scheme, r, rp = struct.unpack("<4s16s8sQQ", raw[:head])
    if magic != _OPERATOR_MAGIC:
        raise ValueError(f"{path}: not a reduced-operator container")
    signature = signature.rstrip(b"\x00").decode("ascii")
    scheme = scheme.rstrip(b"\x00").decode("ascii")
    if expected_signature is not None and signature != expected_signature:
        raise ValueError(
            f"{path}: operator signature {signature} does not match the space")
    r, rp = int(r), int(rp)
    offset = head

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return block.reshape(shape).copy()

    arrays = {
        "mass": take((r, r)),
        "stiffness": take((r, r)),
        "grad_div": take((r, r)),
        "lps_velocity": take((r, r)),
        "convection_tensor": take((r, r, r)),
        "convect_by_mean": take((r, r)),
        "transport_of_mean": take((r, r)),
        "mean_convection": take((r,)),
        "viscous_mean": take((r,)),
        "grad_div_mean": take((r,)),
        "lps_velocity_mean": take((r,)),
        "mass_mean": take((r,)),
    }
    (mean_energy,) = struct.unpack_from("<d", raw, offset)
    offset += 8
    pressure = {"divergence": None, "lps_pressure": None, "divergence_mean": None}
    if rp:
        pressure = {
            "divergence": take((rp, r)),
            "lps_pressure": take((rp, rp)),
            "divergence_mean": take((rp,)),
        }
    return ROMOperators(
        scheme=scheme,
        r=r,
        mean_energy=float(mean_energy),
        vel_modes=None,
        mean=None,
        pres_modes=None,
        vel_space=None,
        **arrays,
        **pressure,
    )
