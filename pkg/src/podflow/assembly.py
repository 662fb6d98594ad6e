"""Sparse operators for the stabilized solvers: mass, stiffness, divergence
coupling, grad-div, the skew-symmetrized trilinear convection form, and the
local-projection (fluctuation-based) stabilization matrices.

All assembly is vectorized over elements and returns CSR matrices. Quadrature
is exact: degree ``2 l`` for bilinear forms and ``3 l`` for the trilinear
form, where ``l`` is the polynomial degree of the space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fe_space import reference_basis, triangle_quadrature

__all__ = [
    "StabilizationConfig",
    "LPSMatrices",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_divergence",
    "assemble_grad_div",
    "assemble_lps_matrices",
    "assemble_lps_fluctuation",
    "gradient_sample_matrix",
    "convection_matrix",
    "apply_convection",
    "assemble_load",
    "export_operator",
    "load_operator",
]


@dataclass(frozen=True)
class StabilizationConfig:
    """Stabilization parameters.

    ``c_velocity`` and ``c_pressure`` scale the per-element LPS weights
    ``tau = c * h_K``; ``grad_div`` is the grad-div coefficient ``mu``;
    ``projection_degree`` is the polynomial degree of the element-local
    projection target of the fluctuation operator.
    """

    c_velocity: float = 1e-2
    c_pressure: float = 1e-2
    grad_div: float = 1.0
    projection_degree: int = 0

    def __post_init__(self):
        if self.c_velocity <= 0.0 or self.c_pressure <= 0.0:
            raise ValueError("LPS constants must be positive")
        if self.grad_div <= 0.0:
            raise ValueError("grad-div coefficient must be positive")
        if self.projection_degree != 0:
            # a target reproducing all elementwise gradients of the space
            # would make the fluctuation vanish identically
            raise ValueError("only the elementwise-constant projection target is supported")

    def tau_velocity(self, h_K):
        return self.c_velocity * h_K

    def tau_pressure(self, h_K):
        return self.c_pressure * h_K


@dataclass(frozen=True)
class LPSMatrices:
    """Assembled LPS forms: ``velocity`` for the momentum equation,
    ``pressure`` for the pressure gradient stabilization."""

    velocity: sp.csr_matrix
    pressure: sp.csr_matrix


def _tables(space, qdegree):
    rule = triangle_quadrature(qdegree)
    values, ref_grads = reference_basis(space.degree, rule.points)
    return rule, values, ref_grads


def _phys_grads(space, ref_grads):
    """Physical basis gradients, shape (nt, nq, nloc, 2)."""
    _, inv_t, _ = space.mesh.jacobians
    return np.einsum("qib,eab->eqia", ref_grads, inv_t)


def _scatter(space, local, row_comp, col_comp, row_space=None):
    """Accumulate per-element local blocks into COO triplets."""
    row_sp = row_space if row_space is not None else space
    rows = row_sp.cell_dofs(row_comp)[:, :, None]
    cols = space.cell_dofs(col_comp)[:, None, :]
    rows = np.broadcast_to(rows, local.shape).ravel()
    cols = np.broadcast_to(cols, local.shape).ravel()
    return rows, cols, local.ravel()


def _blocks_to_csr(entries, shape):
    rows = np.concatenate([e[0] for e in entries])
    cols = np.concatenate([e[1] for e in entries])
    vals = np.concatenate([e[2] for e in entries])
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


def assemble_mass(space, qdegree=None):
    """L2 mass matrix; block-diagonal over components for vector spaces."""
    rule, values, _ = _tables(space, qdegree or 2 * space.degree)
    _, _, det = space.mesh.jacobians
    ref_local = np.einsum("q,qi,qj->ij", rule.weights, values, values)
    local = det[:, None, None] * ref_local
    n = space.n_dofs
    entries = [_scatter(space, local, c, c) for c in range(space.components)]
    return _blocks_to_csr(entries, (n, n))


def assemble_stiffness(space, qdegree=None):
    """Gradient-gradient matrix; block-diagonal over components."""
    rule, _, ref_grads = _tables(space, qdegree or 2 * space.degree)
    _, _, det = space.mesh.jacobians
    grads = _phys_grads(space, ref_grads)
    local = np.einsum("q,e,eqia,eqja->eij", rule.weights, det, grads, grads)
    n = space.n_dofs
    entries = [_scatter(space, local, c, c) for c in range(space.components)]
    return _blocks_to_csr(entries, (n, n))


def assemble_divergence(vel_space, pres_space, qdegree=None):
    """Pressure-velocity coupling ``B[i, j] = (q_i, div v_j)``.

    Rows are scalar pressure DOFs, columns are vector velocity DOFs.
    """
    if vel_space.mesh is not pres_space.mesh:
        raise ValueError("velocity and pressure spaces must share a mesh")
    if vel_space.components != 2 or pres_space.components != 1:
        raise ValueError("expected a 2-vector velocity space and scalar pressure space")
    qdeg = qdegree or 2 * max(vel_space.degree, pres_space.degree)
    rule = triangle_quadrature(qdeg)
    pres_values, _ = reference_basis(pres_space.degree, rule.points)
    _, vel_ref_grads = reference_basis(vel_space.degree, rule.points)
    grads = _phys_grads(vel_space, vel_ref_grads)
    _, _, det = vel_space.mesh.jacobians
    shape = (pres_space.n_scalar, vel_space.n_dofs)
    entries = []
    for c in range(2):
        local = np.einsum("q,e,qi,eqj->eij", rule.weights, det, pres_values, grads[..., c])
        entries.append(_scatter(vel_space, local, 0, c, row_space=pres_space))
    return _blocks_to_csr(entries, shape)


def assemble_grad_div(space, mu, qdegree=None):
    """Grad-div matrix ``mu * (div u, div v)`` on a vector space."""
    if mu <= 0.0:
        raise ValueError("grad-div coefficient must be positive")
    if space.components != 2:
        raise ValueError("grad-div requires a vector space")
    rule, _, ref_grads = _tables(space, qdegree or 2 * space.degree)
    _, _, det = space.mesh.jacobians
    grads = _phys_grads(space, ref_grads)
    n = space.n_dofs
    entries = []
    for a in range(2):
        for b in range(2):
            local = mu * np.einsum(
                "q,e,eqi,eqj->eij", rule.weights, det, grads[..., a], grads[..., b]
            )
            entries.append(_scatter(space, local, a, b))
    return _blocks_to_csr(entries, (n, n))


def _scalar_lps(space, tau, rule, ref_grads):
    """Fluctuation stabilization of one scalar component.

    With the elementwise-constant projection target, the local form reduces to
    ``tau_K [ (grad u, grad v)_K - |K|^{-1} (int_K grad u) . (int_K grad v) ]``.
    """
    _, _, det = space.mesh.jacobians
    grads = _phys_grads(space, ref_grads)
    stiff = np.einsum("q,e,eqia,eqja->eij", rule.weights, det, grads, grads)
    mean_g = np.einsum("q,e,eqia->eia", rule.weights, det, grads)  # int_K grad phi_i
    areas = 0.5 * det
    local = tau[:, None, None] * (stiff - np.einsum("eia,eja->eij", mean_g, mean_g) / areas[:, None, None])
    return local


def assemble_lps_matrices(vel_space, pres_space, config):
    """Velocity and pressure LPS matrices for the equal-order pair.

    Both are symmetric positive semidefinite; the quadratic form equals the
    ``tau``-weighted L2 norm of the gradient fluctuation.
    """
    if vel_space.degree != 2 or pres_space.degree != 2:
        raise ValueError("LPS stabilization is set up for the equal-order P2/P2 pair")
    rule, values, ref_grads = _tables(pres_space, 2 * pres_space.degree)
    h_K = vel_space.mesh.h_K

    local_v = _scalar_lps(pres_space, config.tau_velocity(h_K), rule, ref_grads)
    n = vel_space.n_dofs
    entries = [_scatter(vel_space, local_v, c, c) for c in range(vel_space.components)]
    velocity = _blocks_to_csr(entries, (n, n))

    local_p = _scalar_lps(pres_space, config.tau_pressure(h_K), rule, ref_grads)
    m = pres_space.n_dofs
    pressure = _blocks_to_csr([_scatter(pres_space, local_p, 0, 0)], (m, m))
    return LPSMatrices(velocity=velocity, pressure=pressure)


def gradient_sample_matrix(space):
    """Map scalar-field coefficients to broken-P1 nodal gradient values.

    For a P2 space the gradient is elementwise linear, so it is determined by
    its values at the element vertices. Row layout: element, then gradient
    component, then local vertex, i.e. row ``(e * 2 + a) * 3 + k``.
    """
    if space.degree != 2 or space.components != 1:
        raise ValueError("gradient sampling is set up for scalar P2 spaces")
    corners = np.eye(3)
    _, ref_grads = reference_basis(space.degree, corners)  # (3 corners, nloc, 2)
    _, inv_t, _ = space.mesh.jacobians
    grad_phys = np.einsum("kib,eab->ekia", ref_grads, inv_t)  # (nt, corner, nloc, comp)
    vals = np.transpose(grad_phys, (0, 3, 1, 2))  # (nt, comp, corner, nloc)
    nt = len(space.mesh.triangles)
    row_ids = (
        (np.arange(nt)[:, None, None] * 2 + np.arange(2)[None, :, None]) * 3
        + np.arange(3)[None, None, :]
    )
    rows = np.broadcast_to(row_ids[..., None], vals.shape)
    cols = np.broadcast_to(space.cell_scalar_dofs[:, None, None, :], vals.shape)
    return sp.coo_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())), shape=(6 * nt, space.n_scalar)
    ).tocsr()


def assemble_lps_fluctuation(space):
    """Block-diagonal fluctuation operator on broken-P1 gradient samples.

    Each ``(element, component)`` block subtracts the element-local constant
    projection: ``I - ones(3,3)/3`` in the vertex-value representation. The
    operator is an orthogonal projector (idempotent) and annihilates exactly
    the gradients of piecewise-linear fields.
    """
    if space.degree != 2:
        raise ValueError("the fluctuation operator is set up for P2 spaces")
    nt = len(space.mesh.triangles)
    block = np.eye(3) - np.full((3, 3), 1.0 / 3.0)
    return sp.block_diag([sp.csr_matrix(block)] * (2 * nt), format="csr")


def _field_at_quadrature(field, rule, values, grads):
    """Values, gradients and divergence of a vector field at quadrature points."""
    space = field.space
    cells = space.cell_scalar_dofs
    comp = [field.coefficients[c * space.n_scalar + cells] for c in range(2)]
    w_vals = np.stack([np.einsum("ei,qi->eq", comp[c], values) for c in range(2)], axis=-1)
    w_grads = np.stack([np.einsum("ei,eqia->eqa", comp[c], grads) for c in range(2)], axis=-2)
    div = w_grads[..., 0, 0] + w_grads[..., 1, 1]
    return w_vals, w_grads, div


def convection_matrix(space, convecting, qdegree=None):
    """Matrix of the skew-symmetrized convection form with frozen first slot.

    Entries are ``C[i, j] = ((w . grad) v_j, v_i) + 1/2 ((div w) v_j, v_i)``
    for the given convecting field ``w``; the block is identical for both
    velocity components.
    """
    if space.components != 2:
        raise ValueError("convection requires a vector space")
    rule, values, ref_grads = _tables(space, qdegree or 3 * space.degree)
    grads = _phys_grads(space, ref_grads)
    _, _, det = space.mesh.jacobians
    w_vals, _, w_div = _field_at_quadrature(convecting, rule, values, grads)
    transport = np.einsum("eqc,eqjc->eqj", w_vals, grads)
    local = np.einsum("q,e,eqj,qi->eij", rule.weights, det, transport, values)
    local += 0.5 * np.einsum("q,e,eq,qj,qi->eij", rule.weights, det, w_div, values, values)
    n = space.n_dofs
    entries = [_scatter(space, local, c, c) for c in range(2)]
    return _blocks_to_csr(entries, (n, n))


def apply_convection(u, v, w, qdegree=None):
    """Evaluate the trilinear form ``((u . grad) v, w) + 1/2 ((div u) v, w)``.

    Direct quadrature evaluation; does not assemble a matrix.
    """
    space = u.space
    if not (space is v.space is w.space):
        raise ValueError("all three fields must share one space")
    rule, values, ref_grads = _tables(space, qdegree or 3 * space.degree)
    grads = _phys_grads(space, ref_grads)
    _, _, det = space.mesh.jacobians
    u_vals, _, u_div = _field_at_quadrature(u, rule, values, grads)
    v_vals, v_grads, _ = _field_at_quadrature(v, rule, values, grads)
    w_vals, _, _ = _field_at_quadrature(w, rule, values, grads)
    transport = np.einsum("eqa,eqca->eqc", u_vals, v_grads)
    integrand = np.einsum("eqc,eqc->eq", transport, w_vals)
    integrand += 0.5 * u_div * np.einsum("eqc,eqc->eq", v_vals, w_vals)
    return float(np.einsum("q,e,eq->", rule.weights, det, integrand))


def assemble_load(space, g, t=None, qdegree=None):
    """Load vector ``(g, v)`` for an analytic source.

    ``g(x, y)`` (or ``g(x, y, t)``) must broadcast over arrays and return one
    array per component.
    """
    rule, values, _ = _tables(space, qdegree or 3 * space.degree)
    mesh = space.mesh
    _, _, det = mesh.jacobians
    pts = np.einsum("qk,ekd->eqd", rule.points, mesh.vertices[mesh.triangles])
    x, y = pts[..., 0], pts[..., 1]
    data = g(x, y) if t is None else g(x, y, t)
    if space.components == 1:
        data = (data,)
    out = np.zeros(space.n_dofs)
    for c in range(space.components):
        gc = np.broadcast_to(np.asarray(data[c], dtype=np.float64), x.shape)
        local = np.einsum("q,e,eq,qi->ei", rule.weights, det, gc, values)
        np.add.at(out, space.cell_dofs(c), local)
    return out


def export_operator(matrix, path):
    """Write a sparse operator in matrix-market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix))


def load_operator(path):
    """Read an operator written by :func:`export_operator`."""
    return sp.csr_matrix(scipy.io.mmread(str(path)))
