"""Experiment drivers: configuration, manufactured solutions, and pipelines.

A JSON experiment configuration selects a geometry, a flow case, the
full-order scheme, the basis extraction settings, and the reduced run.
``run_pipeline`` executes the whole chain (full-order solve, snapshot
recording, basis extraction, reduced integration) and writes deterministic
CSV and binary artifacts. ``convergence_study`` measures observed orders on
the decaying-vortex benchmark, ``long_horizon_study`` compares constant and
adaptive grad-div coefficients over extended horizons, and ``calibrate_mu``
grid-searches the coefficient against a reference energy table.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import sympy as sp

from .assembly import StabilizationConfig
from .fe_space import FEField, interpolate
from .fom import (
    SCHEMES,
    FlowCase,
    FOMConfig,
    FOMProblem,
    record_snapshots,
    run_fom,
    save_snapshots,
)
from .mesh import build_rect_mesh, refine_uniform, save_mesh
from .metrics import (
    DragLiftProbe,
    analytic_l2_error,
    discrete_l2_error,
    error_indicators,
    kinetic_energy,
)
from .pod import build_basis, project_L2, save_basis, spectral_diagnostics
from .rom import (
    AdaptiveMuConfig,
    PressureRecovery,
    build_rom_operators,
    compute_supremizers,
    principal_angle_cosine,
    reduce_forcing,
    run_rom,
    save_operators,
)

_TIME_TOL = 1e-9


class ConfigError(ValueError):
    """Configuration rejection with a stable machine-readable name."""

    def __init__(self, name, message):
        self.name = name
        super().__init__(f"{name}: {message}")


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


@contextmanager
def _stage(name):
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- configuration ----------------------------------------------------------------


def _require_keys(block, allowed, required, section):
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(
            "unknown_key",
            f"section {section!r} does not accept {sorted(unknown)}")
    missing = set(required) - set(block)
    if missing:
        raise ConfigError(
            "missing_key",
            f"section {section!r} needs {sorted(missing)}")


@dataclass(frozen=True)
class GeometryConfig:
    """Rectangular channel geometry with an optional rectangular hole."""

    width: float = 1.0
    height: float = 1.0
    nx: int = 8
    ny: int = 8
    hole: tuple = None
    refine: int = 0

    def __post_init__(self):
        if self.width <= 0.0 or self.height <= 0.0:
            raise ConfigError("geometry_invalid", "width and height must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("geometry_invalid", "nx and ny must be at least 1")
        if self.refine < 0:
            raise ConfigError("geometry_invalid", "refine must be nonnegative")
        if self.hole is not None and len(self.hole) != 4:
            raise ConfigError("geometry_invalid", "hole needs (x0, y0, x1, y1)")

    def build(self):
        mesh = build_rect_mesh(self.width, self.height, self.nx, self.ny,
                               hole=self.hole)
        for _ in range(self.refine):
            mesh = refine_uniform(mesh)
        return mesh

    @classmethod
    def from_dict(cls, block):
        _require_keys(block, ("width", "height", "nx", "ny", "hole", "refine"),
                      (), "geometry")
        hole = block.get("hole")
        if hole is not None:
            hole = tuple(float(v) for v in hole)
        return cls(
            width=float(block.get("width", 1.0)),
            height=float(block.get("height", 1.0)),
            nx=int(block.get("nx", 8)),
            ny=int(block.get("ny", 8)),
            hole=hole,
            refine=int(block.get("refine", 0)),
        )


@dataclass(frozen=True)
class PODBlock:
    """Basis extraction settings."""

    r: int = None
    energy_threshold: float = None
    center: bool = False

    def __post_init__(self):
        if self.r is not None and self.energy_threshold is not None:
            raise ConfigError("pod_selector_conflict",
                              "choose r or energy_threshold, not both")
        if self.r is not None and self.r < 1:
            raise ConfigError("pod_invalid", "r must be at least 1")
        if self.energy_threshold is not None and not 0.0 < self.energy_threshold <= 1.0:
            raise ConfigError("pod_invalid", "energy_threshold must lie in (0, 1]")

    @classmethod
    def from_dict(cls, block):
        _require_keys(block, ("r", "energy_threshold", "center"), (), "pod")
        r = block.get("r")
        threshold = block.get("energy_threshold")
        return cls(
            r=None if r is None else int(r),
            energy_threshold=None if threshold is None else float(threshold),
            center=bool(block.get("center", False)),
        )


@dataclass(frozen=True)
class AdaptiveBlock:
    """Adaptive grad-div controller settings."""

    enabled: bool = False
    mu_init: float = None
    mu_min: float = 0.1
    frequency: int = 5
    delta: float = 0.1
    tolerance: float = 1e-3

    def to_rom_config(self):
        try:
            return AdaptiveMuConfig(frequency=self.frequency, delta=self.delta,
                                    tolerance=self.tolerance, mu_min=self.mu_min)
        except ValueError as exc:
            raise ConfigError("adaptive_invalid", str(exc)) from exc

    @classmethod
    def from_dict(cls, block):
        _require_keys(block, ("enabled", "mu_init", "mu_min", "frequency",
                              "delta", "tolerance"), (), "rom.adaptive")
        mu_init = block.get("mu_init")
        return cls(
            enabled=bool(block.get("enabled", False)),
            mu_init=None if mu_init is None else float(mu_init),
            mu_min=float(block.get("mu_min", 0.1)),
            frequency=int(block.get("frequency", 5)),
            delta=float(block.get("delta", 0.1)),
            tolerance=float(block.get("tolerance", 1e-3)),
        )


_ROM_INTEGRATORS = ("bdf2_semi_implicit", "implicit_euler")


@dataclass(frozen=True)
class ROMBlock:
    """Reduced-run settings."""

    scheme: str = None  # defaults to the full-order scheme
    r: int = None  # defaults to the selected basis size
    r_pressure: int = None
    r_values: tuple = None  # reduced sizes swept for the error table
    t_final: float = None  # defaults to the snapshot window end
    integrator: str = "bdf2_semi_implicit"
    mu: float = None  # defaults to the full-order grad-div coefficient
    alpha: float = None  # pressure indicator coupling; None computes it
    adaptive: AdaptiveBlock = field(default_factory=AdaptiveBlock)
    allow_scheme_mismatch: bool = False

    def __post_init__(self):
        if self.scheme is not None and self.scheme not in SCHEMES:
            raise ConfigError("rom_invalid", f"unknown scheme {self.scheme!r}")
        if self.r is not None and self.r < 1:
            raise ConfigError("rom_invalid", "r must be at least 1")
        if self.r_pressure is not None and self.r_pressure < 1:
            raise ConfigError("rom_invalid", "r_pressure must be at least 1")
        if self.r_values is not None:
            if not self.r_values or any(int(v) < 1 for v in self.r_values):
                raise ConfigError("rom_invalid", "r_values must be positive sizes")
        if self.integrator not in _ROM_INTEGRATORS:
            raise ConfigError("rom_invalid", f"unknown integrator {self.integrator!r}")
        if self.mu is not None and self.mu < 0.0:
            raise ConfigError("rom_invalid", "mu must be nonnegative")
        if self.alpha is not None and self.alpha < 0.0:
            raise ConfigError("rom_invalid", "alpha must be nonnegative")

    @classmethod
    def from_dict(cls, block):
        _require_keys(block, ("scheme", "r", "r_pressure", "r_values", "t_final",
                              "integrator", "mu", "alpha", "adaptive",
                              "allow_scheme_mismatch"), (), "rom")
        r_values = block.get("r_values")
        if r_values is not None:
            r_values = tuple(int(v) for v in r_values)
        t_final = block.get("t_final")
        mu = block.get("mu")
        alpha = block.get("alpha")
        return cls(
            scheme=block.get("scheme"),
            r=None if block.get("r") is None else int(block["r"]),
            r_pressure=(None if block.get("r_pressure") is None
                        else int(block["r_pressure"])),
            r_values=r_values,
            t_final=None if t_final is None else float(t_final),
            integrator=block.get("integrator", "bdf2_semi_implicit"),
            mu=None if mu is None else float(mu),
            alpha=None if alpha is None else float(alpha),
            adaptive=AdaptiveBlock.from_dict(block.get("adaptive", {})),
            allow_scheme_mismatch=bool(block.get("allow_scheme_mismatch", False)),
        )


def _fom_from_dict(block):
    _require_keys(block, ("scheme", "nu", "dt", "t_final", "stabilization",
                          "time_integrator", "nonlinear_tolerance",
                          "nonlinear_max_iterations", "snapshot_window",
                          "snapshot_stride"),
                  ("scheme", "nu", "dt", "t_final"), "fom")
    stab_block = block.get("stabilization", {})
    _require_keys(stab_block, ("c_velocity", "c_pressure", "grad_div",
                               "projection_degree"), (), "fom.stabilization")
    try:
        stabilization = StabilizationConfig(**stab_block)
        window = block.get("snapshot_window")
        if window is not None:
            window = (float(window[0]), float(window[1]))
        return FOMConfig(
            scheme=block["scheme"],
            nu=float(block["nu"]),
            dt=float(block["dt"]),
            t_final=float(block["t_final"]),
            stabilization=stabilization,
            time_integrator=block.get("time_integrator", "bdf2_semi_implicit"),
            nonlinear_tolerance=float(block.get("nonlinear_tolerance", 1e-10)),
            nonlinear_max_iterations=int(block.get("nonlinear_max_iterations", 50)),
            snapshot_window=window,
            snapshot_stride=int(block.get("snapshot_stride", 1)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("fom_invalid", str(exc)) from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description."""

    geometry: GeometryConfig
    case_name: str
    case_parameters: dict
    fom: FOMConfig
    pod: PODBlock
    rom: ROMBlock
    output_directory: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.case_name not in _CASES:
            raise ConfigError(
                "case_unknown",
                f"unknown case {self.case_name!r}; available: {sorted(_CASES)}")
        if self.fom.snapshot_window is None:
            raise ConfigError("snapshot_window_missing",
                              "the pipeline needs fom.snapshot_window")
        rom_scheme = self.effective_rom_scheme()
        if rom_scheme != self.fom.scheme and not self.rom.allow_scheme_mismatch:
            raise ConfigError(
                "scheme_mismatch",
                f"reduced scheme {rom_scheme!r} does not match the full-order "
                f"scheme {self.fom.scheme!r} (set rom.allow_scheme_mismatch "
                f"to override)")
        window_end = self.fom.snapshot_window[1]
        if self.rom.t_final is not None and self.rom.t_final < window_end - _TIME_TOL:
            raise ConfigError(
                "rom_window",
                f"rom.t_final={self.rom.t_final} ends before the snapshot "
                f"window end {window_end}")
        if self.rom.adaptive.enabled and rom_scheme != "graddiv":
            raise ConfigError("adaptive_requires_graddiv",
                              "adaptive mu applies to the grad-div scheme only")

    def effective_rom_scheme(self):
        return self.fom.scheme if self.rom.scheme is None else self.rom.scheme

    def effective_rom_mu(self):
        if self.rom.mu is not None:
            return self.rom.mu
        if self.effective_rom_scheme() == "graddiv":
            return self.fom.stabilization.grad_div
        return 0.0

    def effective_rom_t_final(self):
        if self.rom.t_final is not None:
            return self.rom.t_final
        return self.fom.snapshot_window[1]

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config_type", "configuration must be an object")
        _require_keys(raw, ("geometry", "case", "fom", "pod", "rom", "output",
                            "seed"), ("geometry", "case", "fom"), "config")
        case_block = raw["case"]
        _require_keys(case_block, ("name", "parameters"), ("name",), "case")
        output_block = raw.get("output", {})
        _require_keys(output_block, ("directory",), (), "output")
        return cls(
            geometry=GeometryConfig.from_dict(raw["geometry"]),
            case_name=str(case_block["name"]),
            case_parameters=dict(case_block.get("parameters", {})),
            fom=_fom_from_dict(raw["fom"]),
            pod=PODBlock.from_dict(raw.get("pod", {})),
            rom=ROMBlock.from_dict(raw.get("rom", {})),
            output_directory=str(output_block.get("directory", "out")),
            seed=int(raw.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path, overrides=()):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("config_io", f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("config_parse", f"{path}: {exc}") from exc
        apply_overrides(raw, overrides)
        return cls.from_dict(raw)


def apply_overrides(raw, overrides):
    """Apply ``section.key=value`` assignments to a raw config dict in place.

    Values parse as JSON when possible and fall back to plain strings, so
    ``rom.mu=0.4`` assigns a number and ``case.name=cavity`` a string.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override_syntax",
                              f"override {item!r} is not key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        if any(not k for k in keys):
            raise ConfigError("override_syntax",
                              f"override {item!r} has an empty key segment")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        target = raw
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise ConfigError("override_syntax",
                                  f"override {item!r} descends into a non-object")
        target[keys[-1]] = value
    return raw


# -- manufactured solutions --------------------------------------------------------


def _vectorize_pair(fx, fy):
    def call(x, y, t):
        x = np.asarray(x, dtype=float)
        shape = x.shape
        t_val = 0.0 if t is None else t
        u = np.broadcast_to(np.asarray(fx(x, y, t_val), dtype=float), shape)
        v = np.broadcast_to(np.asarray(fy(x, y, t_val), dtype=float), shape)
        return u.copy(), v.copy()

    return call


def _vectorize_scalar(fp):
    def call(x, y, t):
        x = np.asarray(x, dtype=float)
        t_val = 0.0 if t is None else t
        return np.broadcast_to(
            np.asarray(fp(x, y, t_val), dtype=float), x.shape).copy()

    return call


@dataclass(frozen=True)
class ManufacturedSolution:
    """Closed-form velocity/pressure/forcing triple solving the momentum
    equation, with the sampled residual recorded."""

    name: str
    nu: float
    velocity: object
    pressure: object
    forcing: object  # None encodes an identically zero body force
    max_residual: float


MANUFACTURED_NAMES = ("taylor_green", "stokes_poly")


def manufactured_solution(name, nu, residual_tolerance=1e-10):
    """Build a named manufactured solution and verify it by residual sampling.

    ``taylor_green`` is the decaying vortex on the unit square with zero
    body force; ``stokes_poly`` is a steady polynomial stream-function flow
    whose body force carries the viscous, convective, and pressure terms.
    The momentum and continuity residuals are sampled on random interior
    points and must stay below ``residual_tolerance``.
    """
    if name not in MANUFACTURED_NAMES:
        raise ConfigError(
            "case_unknown",
            f"unknown manufactured solution {name!r}; available: "
            f"{MANUFACTURED_NAMES}")
    nu = float(nu)
    x, y, t = sp.symbols("x y t")
    nu_s = sp.Float(nu)
    if name == "taylor_green":
        decay = sp.exp(-2 * sp.pi**2 * nu_s * t)
        u = -sp.cos(sp.pi * x) * sp.sin(sp.pi * y) * decay
        v = sp.sin(sp.pi * x) * sp.cos(sp.pi * y) * decay
        p = -(sp.cos(2 * sp.pi * x) + sp.cos(2 * sp.pi * y)) / 4 * decay**2
        f1 = sp.Integer(0)
        f2 = sp.Integer(0)
        has_forcing = False
    else:
        psi = x**2 * (1 - x) ** 2 * y**2 * (1 - y) ** 2
        u = sp.diff(psi, y)
        v = -sp.diff(psi, x)
        p = x**3 + y**3 - sp.Rational(1, 2)
        f1 = (-nu_s * (sp.diff(u, x, 2) + sp.diff(u, y, 2))
              + u * sp.diff(u, x) + v * sp.diff(u, y) + sp.diff(p, x))
        f2 = (-nu_s * (sp.diff(v, x, 2) + sp.diff(v, y, 2))
              + u * sp.diff(v, x) + v * sp.diff(v, y) + sp.diff(p, y))
        has_forcing = True

    res1 = (sp.diff(u, t) - nu_s * (sp.diff(u, x, 2) + sp.diff(u, y, 2))
            + u * sp.diff(u, x) + v * sp.diff(u, y) + sp.diff(p, x) - f1)
    res2 = (sp.diff(v, t) - nu_s * (sp.diff(v, x, 2) + sp.diff(v, y, 2))
            + u * sp.diff(v, x) + v * sp.diff(v, y) + sp.diff(p, y) - f2)
    res_div = sp.diff(u, x) + sp.diff(v, y)

    args = (x, y, t)
    lam = lambda expr: sp.lambdify(args, expr, "numpy")
    velocity = _vectorize_pair(lam(u), lam(v))
    pressure = _vectorize_scalar(lam(p))
    forcing = _vectorize_pair(lam(f1), lam(f2)) if has_forcing else None

    rng = np.random.default_rng(0)
    xs = rng.uniform(0.05, 0.95, size=40)
    ys = rng.uniform(0.05, 0.95, size=40)
    worst = 0.0
    samplers = [lam(res1), lam(res2), lam(res_div)]
    for t_val in (0.0, 0.13, 0.77):
        for fn in samplers:
            vals = np.broadcast_to(
                np.asarray(fn(xs, ys, t_val), dtype=float), xs.shape)
            worst = max(worst, float(np.abs(vals).max()))
    if worst > residual_tolerance:
        raise RuntimeError(
            f"manufactured solution {name!r} violates its equations: "
            f"sampled residual {worst:.3e}")
    return ManufacturedSolution(name=name, nu=nu, velocity=velocity,
                                pressure=pressure, forcing=forcing,
                                max_residual=worst)


# -- flow case registry -------------------------------------------------------------


@dataclass
class CaseBundle:
    """Everything the pipeline needs to pose one flow problem."""

    flow_case: FlowCase
    initial_velocity: object = None  # callable problem -> coefficients
    has_obstacle: bool = False
    reference_velocity: float = None
    reference_length: float = None
    manufactured: ManufacturedSolution = None


def _zero_bc(x, y, t):
    zero = np.zeros_like(np.asarray(x, dtype=float))
    return zero, zero.copy()


def _check_params(params, allowed, case):
    unknown = set(params) - set(allowed)
    if unknown:
        raise ConfigError(
            "case_parameter",
            f"case {case!r} does not accept {sorted(unknown)}")


def _outer_tags(config):
    tags = ["inlet", "outlet", "wall"]
    if config.geometry.hole is not None:
        tags.append("obstacle")
    return tags


def _case_cavity(config):
    """Enclosed square cavity driven by a time-periodic multi-harmonic body
    force. Every frequency is a multiple of one base period, so the flow
    (and its kinetic energy) repeats exactly over that period, and the mix
    of spatial shapes keeps the snapshot spectrum rich."""
    params = config.case_parameters
    _check_params(params, ("amplitude", "period"), "cavity")
    amplitude = float(params.get("amplitude", 1.0))
    period = float(params.get("period", 0.2))
    if period <= 0.0:
        raise ConfigError("case_parameter", "period must be positive")

    def forcing(x, y, t, a=amplitude, w=2.0 * np.pi / period):
        sx, sy = np.sin(np.pi * x), np.sin(np.pi * y)
        s2x, s2y = np.sin(2.0 * np.pi * x), np.sin(2.0 * np.pi * y)
        s3x, s3y = np.sin(3.0 * np.pi * x), np.sin(3.0 * np.pi * y)
        fx = a * (sy * np.cos(w * t)
                  + sx * s2y * np.sin(2.0 * w * t + 0.3)
                  + s3x * sy * np.cos(3.0 * w * t - 0.5)
                  + s2x * s2y * np.sin(5.0 * w * t))
        fy = a * (sx * np.sin(w * t + 0.7)
                  + s2x * sy * np.cos(2.0 * w * t)
                  + sx * s3y * np.sin(4.0 * w * t - 0.2)
                  + s3x * s2y * np.cos(5.0 * w * t + 1.1))
        return fx, fy

    case = FlowCase(
        "cavity",
        dirichlet={tag: _zero_bc for tag in _outer_tags(config)},
        forcing=forcing,
        zero_mean_pressure=True,
    )
    return CaseBundle(flow_case=case)


def _case_channel(config):
    params = config.case_parameters
    _check_params(params, ("u_max", "pulse_amplitude", "pulse_period",
                           "pulse_x", "pulse_y", "pulse_width"), "channel")
    geometry = config.geometry
    if geometry.hole is None:
        raise ConfigError("case_geometry",
                          "the channel case needs geometry.hole for its obstacle")
    hx0, hy0, hx1, hy1 = geometry.hole
    height = geometry.height
    u_max = float(params.get("u_max", 0.3))
    amplitude = float(params.get("pulse_amplitude", 0.0))
    period = float(params.get("pulse_period", 0.5))
    x0 = float(params.get("pulse_x", hx1 + 0.75 * (hx1 - hx0)))
    y0 = float(params.get("pulse_y", 0.5 * (hy0 + hy1)))
    width = float(params.get("pulse_width", 0.5 * (hy1 - hy0)))
    if period <= 0.0 or width <= 0.0:
        raise ConfigError("case_parameter",
                          "pulse_period and pulse_width must be positive")

    def inflow(x, y, t, um=u_max, h=height):
        u = 4.0 * um * y * (h - y) / h**2
        return u, np.zeros_like(u)

    forcing = None
    if amplitude != 0.0:
        def forcing(x, y, t, a=amplitude, tp=period, cx=x0, cy=y0, w=width):
            bump = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w**2)
            return (np.zeros_like(x), a * np.sin(2.0 * np.pi * t / tp) * bump)

    case = FlowCase(
        "channel",
        dirichlet={"inlet": inflow, "wall": _zero_bc, "obstacle": _zero_bc},
        forcing=forcing,
        zero_mean_pressure=False,
    )
    return CaseBundle(
        flow_case=case,
        has_obstacle=True,
        reference_velocity=2.0 * u_max / 3.0,
        reference_length=hy1 - hy0,
    )


def _case_taylor_green(config):
    _check_params(config.case_parameters, (), "taylor_green")
    ms = manufactured_solution("taylor_green", config.fom.nu)
    bc = ms.velocity
    case = FlowCase(
        "taylor_green",
        dirichlet={tag: bc for tag in _outer_tags(config)},
        forcing=None,
        zero_mean_pressure=True,
    )

    def initial(problem):
        return interpolate(problem.vel_space, ms.velocity, t=0.0)

    return CaseBundle(flow_case=case, initial_velocity=initial, manufactured=ms)


def _case_stokes_poly(config):
    _check_params(config.case_parameters, (), "stokes_poly")
    ms = manufactured_solution("stokes_poly", config.fom.nu)
    case = FlowCase(
        "stokes_poly",
        dirichlet={tag: _zero_bc for tag in _outer_tags(config)},
        forcing=ms.forcing,
        zero_mean_pressure=True,
    )
    return CaseBundle(flow_case=case, manufactured=ms)


def _trig_shape(a, b, sin_in_x):
    """Analytic zero-mean pressure shape and its gradient.

    ``sin(a pi x) cos(b pi y)`` when ``sin_in_x`` else
    ``cos(a pi x) sin(b pi y)``; both integrate to zero over the unit
    square for integer frequencies.
    """
    api, bpi = a * np.pi, b * np.pi
    if sin_in_x:
        value = lambda x, y: np.sin(api * x) * np.cos(bpi * y)
        grad_x = lambda x, y: api * np.cos(api * x) * np.cos(bpi * y)
        grad_y = lambda x, y: -bpi * np.sin(api * x) * np.sin(bpi * y)
    else:
        value = lambda x, y: np.cos(api * x) * np.sin(bpi * y)
        grad_x = lambda x, y: -api * np.sin(api * x) * np.sin(bpi * y)
        grad_y = lambda x, y: bpi * np.cos(api * x) * np.cos(bpi * y)
    return value, grad_x, grad_y


# Trig pressure shapes whose individual discrete inf-sup responses sit in
# one narrow band on coarse unit-square meshes; the remix below flattens
# the band further so every leading subfamily shares one stability level.
_RESTING_SHAPES = tuple(
    _trig_shape(a, b, sin_in_x)
    for a, b, sin_in_x in (
        (2, 2, False), (2, 2, True), (3, 3, False), (3, 3, True),
        (1, 2, True), (2, 1, False), (3, 2, False), (2, 3, True),
    )
)


def _resting_family_mixing(config):
    """Coefficients that remix the raw shapes into a family whose leading
    subfamilies all couple to their velocity enrichments with the same
    stability constant.

    The raw shapes are orthonormalized in the discrete pressure mass
    inner product, their enrichment coupling is whitened by the full
    velocity norm, and the singular directions are reordered so the
    hardest-to-control direction leads. Returns the (n_shapes, n_shapes)
    matrix mapping raw shape coefficients to mixed family coefficients.
    """
    mesh = config.geometry.build()
    scratch = FlowCase(
        "resting_pressure",
        dirichlet={tag: _zero_bc for tag in _outer_tags(config)},
        forcing=None,
        zero_mean_pressure=True,
    )
    problem = FOMProblem(mesh, config.fom, scratch)
    mass_p = problem.pressure_mass
    raw = np.column_stack([
        interpolate(problem.pres_space, value).coefficients
        for value, _, _ in _RESTING_SHAPES])
    gram = raw.T @ (mass_p @ raw)
    lower = np.linalg.cholesky(0.5 * (gram + gram.T))
    orthonormal = np.linalg.solve(lower, raw.T).T

    class _Family:
        modes = orthonormal
        r = orthonormal.shape[1]

    enriched = compute_supremizers(problem, _Family(), r=_Family.r)
    z = enriched.fields
    coupling = (orthonormal.T @ (problem.divergence @ z)).T
    h = z.T @ ((problem.mass + problem.stiffness) @ z)
    chol = np.linalg.cholesky(0.5 * (h + h.T))
    whitened = np.linalg.solve(chol, coupling)
    _, singular_values, vt = np.linalg.svd(whitened)
    hardest_first = np.argsort(singular_values)
    mixing = vt.T[:, hardest_first]
    return np.linalg.solve(lower.T, mixing)


def _case_resting_pressure(config):
    """Fluid at rest under a time-periodic gradient body force.

    The force is the exact gradient of a pressure family, so the exact
    velocity stays zero while the discrete pressure sweeps through eight
    spatial shapes. Mutually orthogonal cosine signals with geometrically
    decaying amplitudes keep the snapshot spectrum ordered, and the shapes
    are remixed so every leading subfamily couples to its velocity
    enrichment with one uniform stability constant. The case exercises
    pressure extraction and enrichment on a field with a known exact
    solution (zero velocity, analytic pressure).
    """
    params = config.case_parameters
    _check_params(params, ("amplitude", "period", "decay"), "resting_pressure")
    amplitude = float(params.get("amplitude", 1.0))
    period = float(params.get("period", 0.2))
    decay = float(params.get("decay", 0.35))
    if period <= 0.0:
        raise ConfigError("case_parameter", "period must be positive")
    if not 0.0 < decay < 1.0:
        raise ConfigError("case_parameter", "decay must be inside (0, 1)")

    mixing = _resting_family_mixing(config)
    n_shapes = mixing.shape[1]
    signal_amps = amplitude * decay ** np.arange(n_shapes)
    signal_freqs = 2.0 * np.pi * np.arange(1, n_shapes + 1) / period

    def forcing(x, y, t):
        signals = signal_amps * np.cos(signal_freqs * t)
        weights = mixing @ signals
        fx = np.zeros_like(np.asarray(x, dtype=float))
        fy = np.zeros_like(fx)
        for w, (_, grad_x, grad_y) in zip(weights, _RESTING_SHAPES):
            fx += w * grad_x(x, y)
            fy += w * grad_y(x, y)
        return fx, fy

    case = FlowCase(
        "resting_pressure",
        dirichlet={tag: _zero_bc for tag in _outer_tags(config)},
        forcing=forcing,
        zero_mean_pressure=True,
    )
    return CaseBundle(flow_case=case)


_CASES = {
    "cavity": _case_cavity,
    "channel": _case_channel,
    "taylor_green": _case_taylor_green,
    "stokes_poly": _case_stokes_poly,
    "resting_pressure": _case_resting_pressure,
}


def build_case(config):
    """Instantiate the configured flow case."""
    return _CASES[config.case_name](config)


# -- CSV artifacts -------------------------------------------------------------------


def _format_value(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, rows):
    """Write rows with a fixed 17-significant-digit float format."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format_value(v) for v in row) + "\n")
    return path


def read_csv(path):
    """Read a CSV written by :func:`write_csv` into a header and an array."""
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return header, data


# -- pipeline ------------------------------------------------------------------------


@dataclass
class PipelineResult:
    """In-memory handles to everything a pipeline run produced."""

    config: ExperimentConfig
    problem: FOMProblem
    fom_run: object
    vel_snapshots: object
    pres_snapshots: object
    vel_basis: object
    pres_basis: object
    operators: object
    rom_run: object
    error_table: list
    artifacts: dict


def _snapshot_energy_table(problem, vel_snapshots, dt):
    """Per-step reference energies over one snapshot period.

    Entry ``n - 1`` holds the full-order kinetic energy one period into the
    window at the ``n``-th step past its start; with a snapshot stride the
    energies between stored snapshots interpolate linearly in time.
    """
    raw = vel_snapshots.raw_fields()
    energies = np.array([kinetic_energy(raw[:, j], problem.mass)
                         for j in range(raw.shape[1])])
    times = np.asarray(vel_snapshots.times, dtype=float)
    n_period = max(int(round((times[-1] - times[0]) / dt)), 1)
    step_times = times[0] + dt * np.arange(1, n_period + 1)
    return np.interp(step_times, times, energies)


def _project_columns(basis, mass, fields, r):
    return np.column_stack([
        project_L2(basis, mass, fields[:, j], r=r)
        for j in range(fields.shape[1])
    ])


def _reconstruct(ops, a_traj):
    recon = ops.vel_modes @ a_traj
    if ops.mean is not None:
        recon = recon + ops.mean[:, None]
    return recon


def _recover_pressure_series(recovery, a_traj, dt, mu_traj, a_prev=None,
                             forcing_values=None):
    """Pressure recovery along a trajectory honoring a per-step coefficient."""
    nt = a_traj.shape[1]
    out = np.empty((recovery.coupling.shape[0], nt))
    for n in range(nt):
        if n == 0:
            if a_prev is not None:
                dadt = (a_traj[:, 0] - a_prev) / dt
            else:
                dadt = np.zeros(a_traj.shape[0])
        elif n == 1 and a_prev is None:
            dadt = (a_traj[:, 1] - a_traj[:, 0]) / dt
        else:
            back2 = a_prev if n == 1 else a_traj[:, n - 2]
            dadt = (3.0 * a_traj[:, n] - 4.0 * a_traj[:, n - 1] + back2) / (2.0 * dt)
        f_n = None if forcing_values is None else forcing_values[:, n]
        out[:, n] = recovery.recover(a_traj[:, n], dadt=dadt,
                                     mu=float(mu_traj[n]), forcing=f_n)
    return out


def _probe_series(probe, problem, velocity, pressure, dt, forcing, times):
    """Drag and lift along reconstructed trajectories (nan without a probe)."""
    nt = velocity.shape[1]
    cd = np.full(nt, np.nan)
    cl = np.full(nt, np.nan)
    if probe is None:
        return cd, cl
    for n in range(nt):
        u = FEField(problem.vel_space, velocity[:, n])
        u_prev = velocity[:, max(n - 1, 0)]
        p = FEField(problem.pres_space,
                    pressure[:, n] if pressure is not None
                    else np.zeros(problem.n_pressure))
        cd[n], cl[n] = probe.coefficients(u, u_prev, p, dt, forcing=forcing,
                                          t=times[n])
    return cd, cl


def run_pipeline(config, out_dir=None, stop_after=None):
    """Execute the pipeline and write deterministic artifacts.

    Stages: mesh and case construction, the full-order run with QoI and
    snapshot recording, basis extraction, the reduced run (with optional
    adaptation), and the reduced-size error sweep. ``stop_after`` ends the
    run early after ``"fom"`` or ``"pod"``; later result fields stay None.
    Any stage failure is re-raised as a :class:`StageError` tagged with the
    stage name.
    """
    if stop_after not in (None, "fom", "pod", "rom"):
        raise ConfigError("stage_unknown", f"unknown stage {stop_after!r}")
    out = Path(config.output_directory if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    vel_basis = pres_basis = ops = rom_run = error_table = None

    with _stage("mesh"):
        mesh = config.geometry.build()
        save_mesh(mesh, out / "mesh.txt")
        artifacts["mesh"] = out / "mesh.txt"

    with _stage("fom"):
        bundle = build_case(config)
        problem = FOMProblem(mesh, config.fom, bundle.flow_case)
        probe = None
        if bundle.has_obstacle:
            probe = DragLiftProbe(
                problem.vel_space, problem.pres_space, problem.mass,
                problem.stiffness, problem.divergence, config.fom.nu,
                bundle.reference_velocity, bundle.reference_length)
        initial = None
        if bundle.initial_velocity is not None:
            initial = bundle.initial_velocity(problem)
        fom_run = run_fom(problem, initial_velocity=initial, probe=probe)
        artifacts["qoi"] = write_csv(
            out / "qoi.csv", ("t", "E_kin", "c_D", "c_L", "weak_div"),
            fom_run.qoi)
        vel_snaps, pres_snaps = record_snapshots(
            fom_run, center_velocity=config.pod.center)
        if vel_snaps.n_snapshots < 2:
            raise ValueError("need at least two snapshots for the reduced run")
        save_snapshots(vel_snaps, out / "snapshots_velocity.bin")
        save_snapshots(pres_snaps, out / "snapshots_pressure.bin")
        artifacts["snapshots_velocity"] = out / "snapshots_velocity.bin"
        artifacts["snapshots_pressure"] = out / "snapshots_pressure.bin"

    if stop_after == "fom":
        return _finish_pipeline(config, out, artifacts, problem, fom_run,
                                vel_snaps, pres_snaps, vel_basis, pres_basis,
                                ops, rom_run, error_table)

    with _stage("pod"):
        vel_basis = build_basis(vel_snaps, problem.mass, r=config.pod.r,
                                energy_threshold=config.pod.energy_threshold)
        pres_basis = build_basis(pres_snaps, problem.pressure_mass)
        save_basis(vel_basis, out / "basis_velocity.bin")
        save_basis(pres_basis, out / "basis_pressure.bin")
        artifacts["basis_velocity"] = out / "basis_velocity.bin"
        artifacts["basis_pressure"] = out / "basis_pressure.bin"

    if stop_after == "pod":
        return _finish_pipeline(config, out, artifacts, problem, fom_run,
                                vel_snaps, pres_snaps, vel_basis, pres_basis,
                                ops, rom_run, error_table)

    with _stage("rom"):
        scheme = config.effective_rom_scheme()
        dt = config.fom.dt
        r_main = vel_basis.r if config.rom.r is None else config.rom.r
        if r_main > vel_basis.rank:
            raise ValueError(
                f"rom.r={r_main} exceeds the basis rank {vel_basis.rank}")
        rp_main = config.rom.r_pressure
        if rp_main is None:
            rp_main = min(r_main, pres_basis.rank)
        ops = build_rom_operators(
            problem, vel_basis,
            pres_basis if scheme == "lps" else None,
            r=r_main,
            r_pressure=rp_main if scheme == "lps" else None)
        save_operators(ops, out / "operators.bin")
        artifacts["operators"] = out / "operators.bin"

        times = vel_snaps.times
        mu_value = config.effective_rom_mu()
        adaptive_cfg = None
        if config.rom.adaptive.enabled:
            adaptive_cfg = config.rom.adaptive.to_rom_config()
            if config.rom.adaptive.mu_init is not None:
                mu_value = config.rom.adaptive.mu_init
        energy_table = _snapshot_energy_table(problem, vel_snaps, dt)

        forcing_fn = None
        if bundle.flow_case.forcing is not None:
            forcing_fn = lambda t: reduce_forcing(ops, bundle.flow_case.forcing, t)
        raw = vel_snaps.raw_fields()
        a0 = project_L2(vel_basis, problem.mass, raw[:, 0], r=r_main)
        t_final_rom = config.effective_rom_t_final()
        n_steps = int(round((t_final_rom - times[0]) / dt))
        if n_steps < 1:
            raise ValueError("the reduced window allows no steps")
        rom_run = run_rom(
            ops, dt=dt, n_steps=n_steps, a0=a0, nu=config.fom.nu,
            t_start=times[0], forcing=forcing_fn, mu=mu_value,
            adaptive=adaptive_cfg, fom_energy_table=energy_table,
            integrator=config.rom.integrator)

        supremizers = None
        recovery = None
        if scheme == "graddiv" and pres_basis.rank > 0:
            supremizers = compute_supremizers(problem, pres_basis)
            if supremizers.fields.shape[1] == pres_basis.r:
                recovery = PressureRecovery(
                    problem,
                    replace(vel_basis, r=r_main),
                    pres_basis,
                    supremizers)

        velocity = _reconstruct(ops, rom_run.a_traj)
        if scheme == "lps":
            pressure = ops.pres_modes @ rom_run.b_traj
        elif recovery is not None:
            forcing_values = None
            if bundle.flow_case.forcing is not None:
                forcing_values = np.column_stack([
                    recovery.reduce_forcing(bundle.flow_case.forcing, t)
                    for t in rom_run.times])
            b_main = _recover_pressure_series(
                recovery, rom_run.a_traj, dt, rom_run.mu_traj,
                forcing_values=forcing_values)
            pressure = pres_basis.modes[:, :pres_basis.r] @ b_main
        else:
            pressure = None
        cd, cl = _probe_series(probe, problem, velocity, pressure, dt,
                               bundle.flow_case.forcing, rom_run.times)
        a_norms = np.linalg.norm(rom_run.a_traj, axis=0)
        rom_rows = list(zip(rom_run.times, rom_run.mu_traj,
                            rom_run.energy_traj, rom_run.e_diff_traj,
                            cd, cl, a_norms))
        artifacts["rom"] = write_csv(
            out / "rom.csv",
            ("t", "mu", "E_kin", "E_diff", "c_D", "c_L", "a_norm"), rom_rows)
        if config.rom.adaptive.enabled:
            artifacts["mu"] = write_csv(
                out / "mu.csv", ("t", "mu", "E_diff"),
                zip(rom_run.times, rom_run.mu_traj, rom_run.e_diff_traj))

        error_table = reduced_error_table(
            config, problem, bundle, vel_snaps, pres_snaps, vel_basis,
            pres_basis, supremizers=supremizers)
        artifacts["errors"] = write_csv(
            out / "errors.csv",
            ("r", "vel_error", "pres_error", "vel_indicator", "pres_indicator"),
            error_table)

    return _finish_pipeline(config, out, artifacts, problem, fom_run,
                            vel_snaps, pres_snaps, vel_basis, pres_basis,
                            ops, rom_run, error_table)


def _finish_pipeline(config, out, artifacts, problem, fom_run, vel_snaps,
                     pres_snaps, vel_basis, pres_basis, ops, rom_run,
                     error_table):
    meta = {
        "case": config.case_name,
        "scheme": config.fom.scheme,
        "rom_scheme": config.effective_rom_scheme(),
        "seed": config.seed,
        "artifacts": {k: str(Path(v).name) for k, v in artifacts.items()},
    }
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    artifacts["meta"] = out / "run_meta.json"
    return PipelineResult(
        config=config, problem=problem, fom_run=fom_run,
        vel_snapshots=vel_snaps, pres_snapshots=pres_snaps,
        vel_basis=vel_basis, pres_basis=pres_basis, operators=ops,
        rom_run=rom_run, error_table=error_table, artifacts=artifacts)


def reduced_error_table(config, problem, bundle, vel_snaps, pres_snaps,
                        vel_basis, pres_basis, supremizers=None):
    """Measure reduced errors and indicators over a sweep of basis sizes.

    Each row holds (r, velocity error, pressure error, velocity indicator,
    pressure indicator). Errors are discrete l2-in-time L2-in-space norms
    against the stored snapshots over the snapshot window. With unit
    snapshot stride the reduced run is seeded with the first two projected
    snapshots so the full-rank limit replays the snapshots to rounding;
    with a wider stride it starts from the projected window start.
    Pressure errors skip the seeding level (the reduced pressure is defined
    from the first solved step onward).
    """
    scheme = config.effective_rom_scheme()
    dt = config.fom.dt
    stride = config.fom.snapshot_stride
    times = vel_snaps.times
    m = times.size
    raw_vel = vel_snaps.raw_fields()
    raw_pres = pres_snaps.fields
    mu_value = config.effective_rom_mu()
    r_values = config.rom.r_values
    if r_values is None:
        r_values = (vel_basis.r,)
    bad = [r for r in r_values if r > vel_basis.rank]
    if bad:
        raise ValueError(
            f"r_values {bad} exceed the basis rank {vel_basis.rank}")

    forcing_case = bundle.flow_case.forcing
    diag_full = spectral_diagnostics(vel_basis, problem.stiffness,
                                     r=vel_basis.rank)
    pres_eigs = pres_basis.eigenvalues

    replay_seeded = stride == 1 and m >= 3
    rows = []
    for r in sorted(set(int(v) for v in r_values)):
        rp = min(r, pres_basis.rank)
        ops_r = build_rom_operators(
            problem, vel_basis, pres_basis if scheme == "lps" else None,
            r=r, r_pressure=rp if scheme == "lps" else None)
        forcing_fn = None
        if forcing_case is not None:
            forcing_fn = lambda t: reduce_forcing(ops_r, forcing_case, t)
        coeffs = _project_columns(vel_basis, problem.mass, raw_vel, r)
        if replay_seeded:
            rom = run_rom(ops_r, dt=dt, n_steps=m - 2, a0=coeffs[:, 1],
                          nu=config.fom.nu, a_prev=coeffs[:, 0],
                          t_start=times[1], forcing=forcing_fn, mu=mu_value,
                          integrator=config.rom.integrator)
            compare = slice(1, None)
            a_prev_used = coeffs[:, 0]
            step_of_snapshot = lambda k: k - 1
        else:
            total = int(round((times[-1] - times[0]) / dt))
            rom = run_rom(ops_r, dt=dt, n_steps=total, a0=coeffs[:, 0],
                          nu=config.fom.nu, t_start=times[0],
                          forcing=forcing_fn, mu=mu_value,
                          integrator=config.rom.integrator)
            compare = slice(0, None)
            a_prev_used = None
            step_of_snapshot = lambda k: k * stride

        snap_cols = [step_of_snapshot(k) for k in range(m)][compare]
        recon = _reconstruct(ops_r, rom.a_traj[:, snap_cols])
        weight = dt * stride
        vel_error = discrete_l2_error(recon, raw_vel[:, compare],
                                      problem.mass, weight)

        if scheme == "lps":
            pres_cols = snap_cols[1:]
            rom_pres = ops_r.pres_modes @ rom.b_traj[:, pres_cols]
            fom_pres = raw_pres[:, compare][:, 1:]
            pres_error = discrete_l2_error(rom_pres, fom_pres,
                                           problem.pressure_mass, weight)
            alpha = 1.0
        else:
            pres_error = np.nan
            alpha = config.rom.alpha
            if supremizers is not None and supremizers.fields.shape[1] >= rp:
                sup_fields = supremizers.fields[:, :rp]
                recovery = PressureRecovery(
                    problem, replace(vel_basis, r=r),
                    replace(pres_basis, r=rp), sup_fields)
                forcing_values = None
                if forcing_case is not None:
                    forcing_values = np.column_stack([
                        recovery.reduce_forcing(forcing_case, t)
                        for t in rom.times])
                b_traj = recovery.recover_trajectory(
                    rom.a_traj, dt, mu=mu_value, a_prev=a_prev_used,
                    forcing_values=forcing_values)
                rom_pres = pres_basis.modes[:, :rp] @ b_traj[:, snap_cols[1:]]
                fom_pres = raw_pres[:, compare][:, 1:]
                pres_error = discrete_l2_error(rom_pres, fom_pres,
                                               problem.pressure_mass, weight)
                if alpha is None:
                    alpha = principal_angle_cosine(
                        vel_basis.modes[:, :r], sup_fields, problem.stiffness)
            if alpha is None:
                alpha = 1.0

        diag_r = spectral_diagnostics(vel_basis, problem.stiffness, r=r)
        vel_tail = diag_r.tail
        pres_tail = float(pres_eigs[rp:].sum())
        vel_ind, pres_ind = error_indicators(
            scheme, diag_full.spectral_norm, vel_tail, pres_tail,
            c_r_h1=diag_r.c_r_h1, alpha=alpha)
        rows.append((r, vel_error, pres_error, vel_ind, pres_ind))
    return rows


# -- studies -------------------------------------------------------------------------


@dataclass
class ConvergenceStudy:
    """Observed orders on the decaying-vortex benchmark."""

    scheme: str
    mesh_sizes: list
    step_sizes: list
    errors: list
    orders: list
    interpolation_errors: list
    interpolation_orders: list
    non_monotone: bool


def convergence_study(scheme, levels=3, base_nx=4, base_dt=2e-2,
                      t_final=8e-2, nu=1e-2, stabilization=None):
    """Refine the vortex benchmark and report observed velocity orders.

    The mesh doubles per level while the time step shrinks fourfold, so
    the spatial error dominates. The nodal interpolant of the exact
    velocity is measured on the same meshes as a control with a known
    third-order rate. Non-monotone error sequences are flagged.
    """
    if levels < 2:
        raise ConfigError("study_invalid", "need at least two levels")
    if stabilization is None:
        stabilization = StabilizationConfig(grad_div=0.3)
    ms = manufactured_solution("taylor_green", nu)
    bc = ms.velocity
    errors = []
    interp_errors = []
    mesh_sizes = []
    step_sizes = []
    for level in range(levels):
        nx = base_nx * 2**level
        dt = base_dt / 4**level
        cfg = FOMConfig(scheme=scheme, nu=nu, dt=dt, t_final=t_final,
                        stabilization=stabilization)
        mesh = build_rect_mesh(1.0, 1.0, nx, nx)
        case = FlowCase("taylor_green",
                        dirichlet={"inlet": bc, "outlet": bc, "wall": bc},
                        zero_mean_pressure=True)
        problem = FOMProblem(mesh, cfg, case)
        initial = interpolate(problem.vel_space, ms.velocity, t=0.0)
        run = run_fom(problem, initial_velocity=initial)
        u_final = run.final_state.u
        errors.append(analytic_l2_error(u_final, ms.velocity, t=t_final))
        interp = interpolate(problem.vel_space, ms.velocity, t=t_final)
        interp_errors.append(analytic_l2_error(interp, ms.velocity, t=t_final))
        mesh_sizes.append(nx)
        step_sizes.append(dt)
    orders = [float(np.log2(errors[k] / errors[k + 1]))
              for k in range(levels - 1)]
    interp_orders = [float(np.log2(interp_errors[k] / interp_errors[k + 1]))
                     for k in range(levels - 1)]
    non_monotone = any(errors[k + 1] >= errors[k] for k in range(levels - 1))
    return ConvergenceStudy(
        scheme=scheme, mesh_sizes=mesh_sizes, step_sizes=step_sizes,
        errors=errors, orders=orders, interpolation_errors=interp_errors,
        interpolation_orders=interp_orders, non_monotone=non_monotone)


def write_convergence_csv(study, path):
    rows = []
    for k in range(len(study.mesh_sizes)):
        rows.append((
            study.mesh_sizes[k],
            study.step_sizes[k],
            study.errors[k],
            study.orders[k - 1] if k > 0 else np.nan,
            study.interpolation_errors[k],
            study.interpolation_orders[k - 1] if k > 0 else np.nan,
        ))
    return write_csv(path, ("nx", "dt", "error", "order", "interp_error",
                            "interp_order"), rows)


@dataclass
class LongHorizonStudy:
    """Constant-versus-adaptive comparison over an extended horizon."""

    horizon_multiple: float
    max_e_diff_constant: float
    max_e_diff_adaptive: float
    blow_up_constant: bool
    blow_up_adaptive: bool
    constant_run: object
    adaptive_run: object


def _detect_blow_up(run):
    norms = np.linalg.norm(run.a_traj, axis=0)
    reference = max(float(norms[0]), 1e-9)
    return bool(norms.max() > 1e3 * reference)


def long_horizon_study(config, horizon_multiple=10.0, out_dir=None):
    """Integrate constant and adaptive reduced runs over a longer horizon.

    Both variants share the basis, the initial projection, and the starting
    coefficient; only the adaptation differs (and it is a no-op when the
    config disables it, making the two outputs identical). Blow-up (a
    thousandfold growth of the coefficient norm) is recorded, not fatal.
    """
    if horizon_multiple <= 0.0:
        raise ConfigError("study_invalid", "horizon multiple must be positive")
    mesh = config.geometry.build()
    bundle = build_case(config)
    problem = FOMProblem(mesh, config.fom, bundle.flow_case)
    initial = None
    if bundle.initial_velocity is not None:
        initial = bundle.initial_velocity(problem)
    fom_run = run_fom(problem, initial_velocity=initial)
    vel_snaps, _ = record_snapshots(fom_run, center_velocity=config.pod.center)
    vel_basis = build_basis(vel_snaps, problem.mass, r=config.pod.r,
                            energy_threshold=config.pod.energy_threshold)
    scheme = config.effective_rom_scheme()
    if scheme != "graddiv":
        raise ConfigError("study_invalid",
                          "the long-horizon study drives the grad-div scheme")
    r_main = vel_basis.r if config.rom.r is None else config.rom.r
    ops = build_rom_operators(problem, vel_basis, None, r=r_main)

    times = vel_snaps.times
    dt = config.fom.dt
    window = times[-1] - times[0]
    n_steps = max(int(round(horizon_multiple * window / dt)), 1)
    raw = vel_snaps.raw_fields()
    a0 = project_L2(vel_basis, problem.mass, raw[:, 0], r=r_main)
    table = _snapshot_energy_table(problem, vel_snaps, dt)
    forcing_fn = None
    if bundle.flow_case.forcing is not None:
        forcing_fn = lambda t: reduce_forcing(ops, bundle.flow_case.forcing, t)
    mu_value = config.effective_rom_mu()
    if config.rom.adaptive.mu_init is not None:
        mu_value = config.rom.adaptive.mu_init

    common = dict(dt=dt, n_steps=n_steps, a0=a0, nu=config.fom.nu,
                  t_start=times[0], forcing=forcing_fn, mu=mu_value,
                  fom_energy_table=table, integrator=config.rom.integrator)
    constant_run = run_rom(ops, **common)
    if config.rom.adaptive.enabled:
        adaptive_run = run_rom(ops, adaptive=config.rom.adaptive.to_rom_config(),
                               **common)
    else:
        adaptive_run = run_rom(ops, **common)

    study = LongHorizonStudy(
        horizon_multiple=float(horizon_multiple),
        max_e_diff_constant=float(np.nanmax(np.abs(constant_run.e_diff_traj))),
        max_e_diff_adaptive=float(np.nanmax(np.abs(adaptive_run.e_diff_traj))),
        blow_up_constant=_detect_blow_up(constant_run),
        blow_up_adaptive=_detect_blow_up(adaptive_run),
        constant_run=constant_run,
        adaptive_run=adaptive_run,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label, run in (("constant", constant_run),
                           ("adaptive", adaptive_run)):
            write_csv(out / f"longhorizon_{label}.csv",
                      ("t", "mu", "E_kin", "E_diff", "a_norm"),
                      zip(run.times, run.mu_traj, run.energy_traj,
                          run.e_diff_traj, np.linalg.norm(run.a_traj, axis=0)))
        write_csv(out / "mu.csv", ("t", "mu", "E_diff"),
                  zip(adaptive_run.times, adaptive_run.mu_traj,
                      adaptive_run.e_diff_traj))
    return study


def calibrate_mu(ops, fom_energy_table, dt, n_steps, a0, nu, candidates,
                 t_start=0.0, forcing=None, integrator="bdf2_semi_implicit"):
    """Grid-search the grad-div coefficient against a reference energy table.

    Each candidate integrates the same reduced window; the winner minimizes
    the worst-case absolute energy mismatch (ties keep the first, so the
    search is deterministic).
    """
    candidates = [float(c) for c in candidates]
    if not candidates:
        raise ValueError("need at least one candidate coefficient")
    results = []
    for mu in candidates:
        run = run_rom(ops, dt=dt, n_steps=n_steps, a0=a0, nu=nu,
                      t_start=t_start, forcing=forcing, mu=mu,
                      fom_energy_table=fom_energy_table,
                      integrator=integrator)
        results.append((mu, float(np.nanmax(np.abs(run.e_diff_traj)))))
    best = min(results, key=lambda item: item[1])
    return best[0], results
