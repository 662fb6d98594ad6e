"""Full-order incompressible flow solvers on stabilized finite elements.

Two spatial discretizations are provided. The equal-order scheme uses
quadratic velocity and quadratic pressure with local-projection penalties
on both gradient fluctuations. The divergence-stable scheme uses the
quadratic/linear pair with a grad-div penalty. Time stepping is either
semi-implicit two-step backward differentiation (extrapolated convecting
field, one linear solve per step) or implicit Euler with fixed-point
resolution of the convection nonlinearity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    StabilizationConfig,
    assemble_divergence,
    assemble_grad_div,
    assemble_load,
    assemble_lps_matrices,
    assemble_mass,
    assemble_stiffness,
    convection_matrix,
)
from .fe_space import FEField, FESpace
from .metrics import kinetic_energy, weak_divergence

SCHEMES = ("lps", "graddiv")
TIME_INTEGRATORS = ("bdf2_semi_implicit", "implicit_euler")

_SNAPSHOT_MAGIC = b"PSN1"
_TIME_TOL = 1e-9


class NonlinearSolveError(RuntimeError):
    """Fixed-point iteration failed to reach the requested tolerance."""

    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = list(residual_history)


@dataclass(frozen=True)
class FlowCase:
    """Physical problem data: boundary values, forcing, pressure gauge.

    ``dirichlet`` maps boundary tag names to callables ``g(x, y, t)``
    returning the two velocity components; tags absent from the map keep
    their natural (do-nothing) condition. ``forcing`` is ``f(x, y, t)``
    returning two components, or ``None`` for an unforced flow.
    ``zero_mean_pressure`` selects the enclosed-flow pressure gauge (one
    pinned value during the solve, mean removed afterwards).
    """

    name: str
    dirichlet: dict = field(default_factory=dict)
    forcing: object = None
    zero_mean_pressure: bool = False


@dataclass(frozen=True)
class FOMConfig:
    """Numerical parameters of a full-order run."""

    scheme: str
    nu: float
    dt: float
    t_final: float
    stabilization: StabilizationConfig = StabilizationConfig()
    time_integrator: str = "bdf2_semi_implicit"
    nonlinear_tolerance: float = 1e-10
    nonlinear_max_iterations: int = 50
    snapshot_window: tuple = None
    snapshot_stride: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.time_integrator not in TIME_INTEGRATORS:
            raise ValueError(
                f"unknown time integrator {self.time_integrator!r}; "
                f"expected one of {TIME_INTEGRATORS}"
            )
        if self.nu <= 0.0:
            raise ValueError("viscosity must be positive")
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if self.t_final < self.dt - _TIME_TOL:
            raise ValueError("final time must allow at least one step")
        if self.nonlinear_tolerance <= 0.0 or self.nonlinear_max_iterations < 1:
            raise ValueError("nonlinear solver parameters must be positive")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot stride must be at least 1")
        if self.snapshot_window is not None:
            t0, t1 = self.snapshot_window
            if not (-_TIME_TOL <= t0 <= t1 <= self.t_final + _TIME_TOL):
                raise ValueError("snapshot window must lie inside [0, t_final]")

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))


@dataclass
class FOMState:
    """One time level of a run plus the history the integrator needs."""

    u: FEField
    p: FEField
    u_prev: np.ndarray
    t: float
    n: int


def bdf2_extrapolate(u_prev, u_now):
    """Second-order extrapolation 2*u_now - u_prev of two history levels."""
    if isinstance(u_now, FEField):
        return FEField(u_now.space, 2.0 * u_now.coefficients - _coeffs(u_prev), u_now.t)
    return 2.0 * np.asarray(u_now, dtype=float) - _coeffs(u_prev)


def _coeffs(u):
    return u.coefficients if isinstance(u, FEField) else np.asarray(u, dtype=float)


class FOMProblem:
    """Assembled operators and boundary bookkeeping for one mesh and case."""

    def __init__(self, mesh, config, case):
        self.mesh = mesh
        self.config = config
        self.case = case
        mesh_tags = set(mesh.boundary_edges.values())
        unknown = set(case.dirichlet) - mesh_tags
        if unknown:
            raise ValueError(f"dirichlet tags {sorted(unknown)} not present on this mesh")

        self.vel_space = FESpace(mesh, 2, components=2)
        pres_degree = 2 if config.scheme == "lps" else 1
        self.pres_space = FESpace(mesh, pres_degree, zero_mean=case.zero_mean_pressure)

        self.mass = assemble_mass(self.vel_space)
        self.stiffness = assemble_stiffness(self.vel_space)
        self.divergence = assemble_divergence(self.vel_space, self.pres_space)
        self.pressure_mass = assemble_mass(self.pres_space)
        if config.scheme == "lps":
            lps = assemble_lps_matrices(self.vel_space, self.pres_space, config.stabilization)
            self.velocity_stabilization = lps.velocity
            self.pressure_stabilization = lps.pressure
            self.grad_div = None
            self.mu = 0.0
        else:
            self.velocity_stabilization = None
            self.pressure_stabilization = None
            self.grad_div = assemble_grad_div(self.vel_space, 1.0)
            self.mu = config.stabilization.grad_div

        # static part of the velocity block (everything but mass and convection)
        self._static_velocity_block = config.nu * self.stiffness
        if self.velocity_stabilization is not None:
            self._static_velocity_block = self._static_velocity_block + self.velocity_stabilization
        if self.grad_div is not None:
            self._static_velocity_block = self._static_velocity_block + self.mu * self.grad_div

        n_scalar = self.vel_space.n_scalar
        constrained_scalar = (
            self.vel_space.boundary_scalar_dofs(sorted(case.dirichlet))
            if case.dirichlet
            else np.empty(0, dtype=np.int64)
        )
        self.constrained_velocity = np.concatenate(
            [constrained_scalar, n_scalar + constrained_scalar]
        ).astype(np.int64)
        self.free_velocity = np.setdiff1d(
            np.arange(self.vel_space.n_dofs), self.constrained_velocity
        )
        n_v = self.vel_space.n_dofs
        if case.zero_mean_pressure:
            pres_free = np.arange(1, self.pres_space.n_dofs)
            pres_pinned = np.array([0], dtype=np.int64)
        else:
            pres_free = np.arange(self.pres_space.n_dofs)
            pres_pinned = np.empty(0, dtype=np.int64)
        self.free_global = np.concatenate([self.free_velocity, n_v + pres_free])
        self.constrained_global = np.concatenate([self.constrained_velocity, n_v + pres_pinned])

    @property
    def n_velocity(self):
        return self.vel_space.n_dofs

    @property
    def n_pressure(self):
        return self.pres_space.n_dofs

    def boundary_values(self, t):
        """Full-length velocity vector holding the prescribed boundary data."""
        g = np.zeros(self.n_velocity)
        n_scalar = self.vel_space.n_scalar
        for tag, fn in self.case.dirichlet.items():
            dofs = self.vel_space.boundary_scalar_dofs(tag)
            x = self.vel_space.dof_coords[dofs, 0]
            y = self.vel_space.dof_coords[dofs, 1]
            gx, gy = fn(x, y, t)
            g[dofs] = np.broadcast_to(np.asarray(gx, dtype=float), x.shape)
            g[n_scalar + dofs] = np.broadcast_to(np.asarray(gy, dtype=float), x.shape)
        return g

    def load_vector(self, t):
        if self.case.forcing is None:
            return np.zeros(self.n_velocity)
        return assemble_load(self.vel_space, self.case.forcing, t)

    def remove_pressure_mean(self, p):
        mean = float(np.ones(self.n_pressure) @ (self.pressure_mass @ p)) / self.mesh.area
        return p - mean

    def solve_coupled(self, velocity_block, rhs_velocity, t):
        """Solve one saddle-point system with boundary elimination."""
        system = sp.bmat(
            [
                [velocity_block, -self.divergence.T],
                [self.divergence, self.pressure_stabilization],
            ],
            format="csr",
        )
        rhs = np.concatenate([rhs_velocity, np.zeros(self.n_pressure)])
        values = np.zeros(self.n_velocity + self.n_pressure)
        values[: self.n_velocity] = self.boundary_values(t)
        free, fixed = self.free_global, self.constrained_global
        reduced_rhs = rhs[free]
        if fixed.size:
            reduced_rhs = reduced_rhs - system[free][:, fixed] @ values[fixed]
        solution = spla.splu(sp.csc_matrix(system[free][:, free])).solve(reduced_rhs)
        if not np.all(np.isfinite(solution)):
            raise RuntimeError("singular or badly scaled coupled system")
        x = values
        x[free] = solution
        u = x[: self.n_velocity]
        p = x[self.n_velocity :]
        if self.case.zero_mean_pressure:
            p = self.remove_pressure_mean(p)
        return u, p


def _step_semi_implicit(problem, state):
    cfg = problem.config
    dt = cfg.dt
    t_new = state.t + dt
    u_hat = bdf2_extrapolate(state.u_prev, state.u.coefficients)
    convection = convection_matrix(problem.vel_space, FEField(problem.vel_space, u_hat))
    velocity_block = (
        1.5 / dt * problem.mass + problem._static_velocity_block + convection
    )
    rhs = problem.mass @ (
        (4.0 * state.u.coefficients - state.u_prev) / (2.0 * dt)
    ) + problem.load_vector(t_new)
    u, p = problem.solve_coupled(velocity_block, rhs, t_new)
    return FOMState(
        u=FEField(problem.vel_space, u, t_new),
        p=FEField(problem.pres_space, p, t_new),
        u_prev=state.u.coefficients.copy(),
        t=t_new,
        n=state.n + 1,
    )


def _step_implicit_euler(problem, state):
    cfg = problem.config
    dt = cfg.dt
    t_new = state.t + dt
    rhs = problem.mass @ (state.u.coefficients / dt) + problem.load_vector(t_new)
    convecting = state.u.coefficients.copy()
    history = []
    for _ in range(cfg.nonlinear_max_iterations):
        convection = convection_matrix(problem.vel_space, FEField(problem.vel_space, convecting))
        velocity_block = problem.mass / dt + problem._static_velocity_block + convection
        u, p = problem.solve_coupled(velocity_block, rhs, t_new)
        diff = u - convecting
        change = np.sqrt(diff @ (problem.mass @ diff))
        scale = max(np.sqrt(u @ (problem.mass @ u)), 1e-30)
        history.append(change / scale)
        convecting = u
        if history[-1] <= cfg.nonlinear_tolerance:
            return FOMState(
                u=FEField(problem.vel_space, u, t_new),
                p=FEField(problem.pres_space, p, t_new),
                u_prev=state.u.coefficients.copy(),
                t=t_new,
                n=state.n + 1,
            )
    raise NonlinearSolveError(
        f"fixed-point iteration stalled at t={t_new:.6g}: "
        f"last residuals [{', '.join(f'{v:.3e}' for v in history[-3:])}]",
        history,
    )


def _step(problem, state):
    if problem.config.time_integrator == "bdf2_semi_implicit":
        return _step_semi_implicit(problem, state)
    return _step_implicit_euler(problem, state)


def step_lps_fem(problem, state):
    """Advance the equal-order stabilized scheme by one time step."""
    if problem.config.scheme != "lps":
        raise ValueError("problem was not built for the equal-order scheme")
    return _step(problem, state)


def step_graddiv_fem(problem, state):
    """Advance the grad-div stabilized mixed scheme by one time step."""
    if problem.config.scheme != "graddiv":
        raise ValueError("problem was not built for the grad-div scheme")
    return _step(problem, state)


def initial_state(problem, initial_velocity=None):
    """State at t = 0; the default is the impulsive (zero-velocity) start."""
    if initial_velocity is None:
        u0 = np.zeros(problem.n_velocity)
    else:
        u0 = _coeffs(initial_velocity).copy()
        if u0.shape != (problem.n_velocity,):
            raise ValueError("initial velocity has the wrong length")
    p0 = np.zeros(problem.n_pressure)
    return FOMState(
        u=FEField(problem.vel_space, u0, 0.0),
        p=FEField(problem.pres_space, p0, 0.0),
        u_prev=u0.copy(),
        t=0.0,
        n=0,
    )


@dataclass
class FOMRun:
    """Recorded output of a full-order integration."""

    problem: FOMProblem
    times: np.ndarray
    qoi: np.ndarray  # columns: t, E_kin, c_D, c_L, weak_div
    snapshot_times: np.ndarray
    snapshot_velocity: np.ndarray  # (n_velocity, M)
    snapshot_pressure: np.ndarray  # (n_pressure, M)
    final_state: FOMState = None


def snapshot_steps(config, n_steps=None):
    """Step indices (0 = initial state) recorded by the snapshot window.

    Eligible indices are those whose time k*dt lies inside the window; the
    stride then keeps every stride-th eligible index starting from the
    first, so the count is the ceiling of eligible/stride.
    """
    if config.snapshot_window is None:
        return np.empty(0, dtype=np.int64)
    total = config.n_steps if n_steps is None else int(n_steps)
    t0, t1 = config.snapshot_window
    k = np.arange(total + 1)
    times = k * config.dt
    eligible = k[(times >= t0 - _TIME_TOL) & (times <= t1 + _TIME_TOL)]
    return eligible[:: config.snapshot_stride]


def run_fom(problem, initial_velocity=None, n_steps=None, probe=None, qoi_stride=1):
    """Integrate the configured scheme and record QoIs and snapshots."""
    cfg = problem.config
    total = cfg.n_steps if n_steps is None else int(n_steps)
    state = initial_state(problem, initial_velocity)
    recorded = set(snapshot_steps(cfg, total).tolist())

    times = []
    qoi_rows = []
    snap_times, snap_u, snap_p = [], [], []

    def maybe_snapshot(st):
        if st.n in recorded:
            snap_times.append(st.t)
            snap_u.append(st.u.coefficients.copy())
            snap_p.append(st.p.coefficients.copy())

    maybe_snapshot(state)
    for k in range(1, total + 1):
        state = _step(problem, state)
        times.append(state.t)
        if (k - 1) % qoi_stride == 0:
            if probe is not None:
                c_d, c_l = probe.coefficients(
                    state.u,
                    state.u_prev,
                    state.p,
                    cfg.dt,
                    forcing=problem.case.forcing,
                    t=state.t,
                )
            else:
                c_d, c_l = np.nan, np.nan
            qoi_rows.append(
                (
                    state.t,
                    kinetic_energy(state.u, problem.mass),
                    c_d,
                    c_l,
                    weak_divergence(state.u, problem.divergence, problem.pressure_mass),
                )
            )
        maybe_snapshot(state)

    return FOMRun(
        problem=problem,
        times=np.array(times),
        qoi=np.array(qoi_rows),
        snapshot_times=np.array(snap_times),
        snapshot_velocity=np.array(snap_u).T if snap_u else np.empty((problem.n_velocity, 0)),
        snapshot_pressure=np.array(snap_p).T if snap_p else np.empty((problem.n_pressure, 0)),
        final_state=state,
    )


@dataclass
class SnapshotSet:
    """A time-stamped collection of coefficient fields from one space."""

    space_signature: str
    times: np.ndarray
    fields: np.ndarray  # (n_dofs, M); centered when mean is not None
    mean: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.fields = np.asarray(self.fields, dtype=float)
        if self.fields.ndim != 2 or self.fields.shape[1] != self.times.size:
            raise ValueError("snapshot array must be (n_dofs, M) matching the times")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=float)
            if self.mean.shape != (self.fields.shape[0],):
                raise ValueError("stored mean has the wrong length")

    @property
    def n_snapshots(self):
        return int(self.times.size)

    def raw_fields(self):
        """Snapshots with the stored mean added back."""
        if self.mean is None:
            return self.fields
        return self.fields + self.mean[:, None]


def record_snapshots(run, center_velocity=False):
    """Package a run's stored fields as velocity and pressure snapshot sets."""
    if run.snapshot_times.size == 0:
        raise ValueError("run recorded no snapshots; check the snapshot window")
    cfg = run.problem.config
    meta = {
        "scheme": cfg.scheme,
        "dt": cfg.dt,
        "stride": cfg.snapshot_stride,
        "t_start": float(run.snapshot_times[0]),
        "t_end": float(run.snapshot_times[-1]),
    }
    vel_fields = run.snapshot_velocity
    mean = None
    if center_velocity:
        mean = vel_fields.mean(axis=1)
        vel_fields = vel_fields - mean[:, None]
    velocity = SnapshotSet(
        space_signature=run.problem.vel_space.signature(),
        times=run.snapshot_times.copy(),
        fields=vel_fields,
        mean=mean,
        metadata=dict(meta),
    )
    pressure = SnapshotSet(
        space_signature=run.problem.pres_space.signature(),
        times=run.snapshot_times.copy(),
        fields=run.snapshot_pressure,
        metadata=dict(meta),
    )
    return velocity, pressure


def save_snapshots(snapshots, path):
    """Write a snapshot set as a self-describing binary container."""
    meta = snapshots.metadata
    scheme = str(meta.get("scheme", ""))[:8].ljust(8)
    n, m = snapshots.fields.shape
    header = struct.pack(
        "<4s8s16sQQddQB",
        _SNAPSHOT_MAGIC,
        scheme.encode("ascii"),
        snapshots.space_signature.encode("ascii"),
        m,
        n,
        float(meta.get("t_start", snapshots.times[0] if m else 0.0)),
        float(meta.get("dt", 0.0)),
        int(meta.get("stride", 1)),
        1 if snapshots.mean is not None else 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(snapshots.times.astype("<f8").tobytes())
        if snapshots.mean is not None:
            fh.write(snapshots.mean.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(snapshots.fields, dtype="<f8").tobytes())


def load_snapshots(path, expected_signature=None):
    """Read a snapshot container written by :func:`save_snapshots`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize("<4s8s16sQQddQB")
    magic, scheme, signature, m, n, t_start, dt, stride, centered = struct.unpack(
        "<4s8s16sQQddQB", raw[:head_size]
    )
    if magic != _SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a snapshot container")
    signature = signature.decode("ascii")
    if expected_signature is not None and signature != expected_signature:
        raise ValueError(f"{path}: snapshot signature {signature} does not match the space")
    offset = head_size
    times = np.frombuffer(raw, dtype="<f8", count=m, offset=offset).copy()
    offset += 8 * m
    mean = None
    if centered:
        mean = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).copy()
        offset += 8 * n
    fields = (
        np.frombuffer(raw, dtype="<f8", count=n * m, offset=offset).reshape(n, m).copy()
    )
    return SnapshotSet(
        space_signature=signature,
        times=times,
        fields=fields,
        mean=mean,
        metadata={
            "scheme": scheme.decode("ascii").strip(),
            "dt": dt,
            "stride": int(stride),
            "t_start": t_start,
            "t_end": float(times[-1]) if m else t_start,
        },
    )


def solve_stokes(problem, t=0.0):
    """Steady linear solve with the problem's viscous and stabilized forms."""
    velocity_block = problem._static_velocity_block
    rhs = problem.load_vector(t)
    u, p = problem.solve_coupled(velocity_block, rhs, t)
    return FEField(problem.vel_space, u, t), FEField(problem.pres_space, p, t)
