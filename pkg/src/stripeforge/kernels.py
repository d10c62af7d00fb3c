"""Element energy/gradient/Hessian kernels for solid-shell prisms.

The core routine integrates a Neo-Hookean (optionally fiber-augmented)
density over one prism, with the deformed map

    x(q) = sum_i N_i(q) x_i + psi(q) sum_i N_i(q) xhat_i

so the same kernel serves plain elements (``psi = 0``) and ridge-enriched cut
elements.  The deformation gradient is linear in the 36 nodal unknowns
(6 positions + 6 enrichments, 3 components each), which gives closed-form
gradients and Hessians per quadrature point.

Derivatives with respect to the level set (which moves both the ridge
function and the sub-prism quadrature geometry) are obtained by complex-step
differentiation: every quantity on that path is analytic once the enrichment
sign pattern is frozen from real parts, so a purely imaginary perturbation
of ``phi`` yields exact derivatives in the imaginary part of the outputs.

Hot loops run through numba when the ``numba`` backend is active; the same
source is executed as plain Python (any dtype) otherwise and for all
complex-valued evaluations.
"""

from __future__ import annotations

import numpy as np

from .backend import USE_NUMBA, jit
from .errors import ElementInversionError
from .shell import (
    Material,
    cut_quadrature,
    enrichment_pointdata,
    is_cut,
    uncut_quadrature,
)

_CS_STEP = 1e-100  # complex-step size; error is O(step^2) with no cancellation


def _element_core(Xe, xe, xhe, qp, qw, psis, dpsis, mu, lam, beta, nf, want_derivs):
    """Energy, gradient, and Hessian of one prism.

    Per-point material parameters allow cut elements with mixed materials in
    a single call.  ``want_derivs`` is a level: 0 energy only, 1 adds the
    gradient, 2 adds the Hessian.  Returns ``(status, U, grad, hess)`` where
    ``status`` is 0 on success or 1 + quadrature-point index on inversion.
    DOF order: the six position nodes' xyz first, then the six enrichment
    nodes' xyz.
    """
    nq = qp.shape[0]
    dt = xe.dtype
    U = 0.0 * xe[0, 0]
    grad = np.zeros(36, dt)
    hess = np.zeros((36, 36), dt)
    G = np.empty((12, 3), dt)
    c = np.empty((12, 3), dt)
    N = np.empty(6, dt)
    dN = np.empty((6, 3), dt)
    J0 = np.empty((3, 3), dt)
    J0inv = np.empty((3, 3), dt)
    F = np.empty((3, 3), dt)
    FinvT = np.empty((3, 3), dt)
    for j in range(nq):
        u = qp[j, 0]
        v = qp[j, 1]
        t = qp[j, 2]
        l0 = 1.0 - u - v
        tm = 0.5 * (1.0 - t)
        tp = 0.5 * (1.0 + t)
        N[0] = l0 * tm
        N[1] = u * tm
        N[2] = v * tm
        N[3] = l0 * tp
        N[4] = u * tp
        N[5] = v * tp
        dN[0, 0] = -tm
        dN[0, 1] = -tm
        dN[0, 2] = -0.5 * l0
        dN[1, 0] = tm
        dN[1, 1] = 0.0
        dN[1, 2] = -0.5 * u
        dN[2, 0] = 0.0
        dN[2, 1] = tm
        dN[2, 2] = -0.5 * v
        dN[3, 0] = -tp
        dN[3, 1] = -tp
        dN[3, 2] = 0.5 * l0
        dN[4, 0] = tp
        dN[4, 1] = 0.0
        dN[4, 2] = 0.5 * u
        dN[5, 0] = 0.0
        dN[5, 1] = tp
        dN[5, 2] = 0.5 * v

        for a in range(3):  # 3x3 rest Jacobian J0 = Xe^T dN
            for b in range(3):
                acc = 0.0 * U
                for i in range(6):
                    acc = acc + Xe[i, a] * dN[i, b]
                J0[a, b] = acc
        detJ0 = (
            J0[0, 0] * (J0[1, 1] * J0[2, 2] - J0[1, 2] * J0[2, 1])
            - J0[0, 1] * (J0[1, 0] * J0[2, 2] - J0[1, 2] * J0[2, 0])
            + J0[0, 2] * (J0[1, 0] * J0[2, 1] - J0[1, 1] * J0[2, 0])
        )
        if detJ0.real <= 0.0:
            return j + 1, U, grad, hess
        J0inv[0, 0] = (J0[1, 1] * J0[2, 2] - J0[1, 2] * J0[2, 1]) / detJ0
        J0inv[0, 1] = (J0[0, 2] * J0[2, 1] - J0[0, 1] * J0[2, 2]) / detJ0
        J0inv[0, 2] = (J0[0, 1] * J0[1, 2] - J0[0, 2] * J0[1, 1]) / detJ0
        J0inv[1, 0] = (J0[1, 2] * J0[2, 0] - J0[1, 0] * J0[2, 2]) / detJ0
        J0inv[1, 1] = (J0[0, 0] * J0[2, 2] - J0[0, 2] * J0[2, 0]) / detJ0
        J0inv[1, 2] = (J0[0, 2] * J0[1, 0] - J0[0, 0] * J0[1, 2]) / detJ0
        J0inv[2, 0] = (J0[1, 0] * J0[2, 1] - J0[1, 1] * J0[2, 0]) / detJ0
        J0inv[2, 1] = (J0[0, 1] * J0[2, 0] - J0[0, 0] * J0[2, 1]) / detJ0
        J0inv[2, 2] = (J0[0, 0] * J0[1, 1] - J0[0, 1] * J0[1, 0]) / detJ0

        psi = psis[j]
        dpsi = dpsis[j]
        # effective rest-space shape gradients: F = sum_k y_k G_k^T
        for i in range(6):
            for a in range(3):
                G[i, a] = (
                    J0inv[0, a] * dN[i, 0]
                    + J0inv[1, a] * dN[i, 1]
                    + J0inv[2, a] * dN[i, 2]
                )
                G[6 + i, a] = (
                    J0inv[0, a] * (psi * dN[i, 0] + N[i] * dpsi[0])
                    + J0inv[1, a] * (psi * dN[i, 1] + N[i] * dpsi[1])
                    + J0inv[2, a] * (psi * dN[i, 2] + N[i] * dpsi[2])
                )

        # F = sum_i x_i g_i^T + xhat_i h_i^T; positions enter relative to
        # node 0 (sum_i g_i = 0 analytically) so translations cancel exactly
        for a in range(3):
            for b in range(3):
                acc = 0.0 * U
                for i in range(1, 6):
                    acc = acc + (xe[i, a] - xe[0, a]) * G[i, b]
                for i in range(6):
                    acc = acc + xhe[i, a] * G[6 + i, b]
                F[a, b] = acc
        detF = (
            F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
            - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
            + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0])
        )
        if detF.real <= 0.0:
            return j + 1, U, grad, hess
        FinvT[0, 0] = (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1]) / detF
        FinvT[1, 0] = (F[0, 2] * F[2, 1] - F[0, 1] * F[2, 2]) / detF
        FinvT[2, 0] = (F[0, 1] * F[1, 2] - F[0, 2] * F[1, 1]) / detF
        FinvT[0, 1] = (F[1, 2] * F[2, 0] - F[1, 0] * F[2, 2]) / detF
        FinvT[1, 1] = (F[0, 0] * F[2, 2] - F[0, 2] * F[2, 0]) / detF
        FinvT[2, 1] = (F[0, 2] * F[1, 0] - F[0, 0] * F[1, 2]) / detF
        FinvT[0, 2] = (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]) / detF
        FinvT[1, 2] = (F[0, 1] * F[2, 0] - F[0, 0] * F[2, 1]) / detF
        FinvT[2, 2] = (F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]) / detF

        logJ = np.log(detF)
        trC = 0.0 * detF
        for a in range(3):
            for b in range(3):
                trC = trC + F[a, b] * F[a, b]
        muj = mu[j]
        lamj = lam[j]
        betaj = beta[j]
        psi_e = 0.5 * (muj * (trC - 3.0) - 2.0 * muj * logJ + lamj * logJ * logJ)
        Fn = np.empty(3, dt)
        for a in range(3):
            Fn[a] = F[a, 0] * nf[0] + F[a, 1] * nf[1] + F[a, 2] * nf[2]
        if betaj != 0.0:
            psi_e = psi_e + 0.5 * betaj * (Fn[0] ** 2 + Fn[1] ** 2 + Fn[2] ** 2)
        w = qw[j] * detJ0
        U = U + w * psi_e

        if want_derivs >= 1:
            # first Piola-Kirchhoff stress
            P = muj * F + (lamj * logJ - muj) * FinvT
            if betaj != 0.0:
                for a in range(3):
                    for b in range(3):
                        P[a, b] = P[a, b] + betaj * Fn[a] * nf[b]
            for k in range(12):
                for a in range(3):
                    grad[3 * k + a] += w * (
                        P[a, 0] * G[k, 0] + P[a, 1] * G[k, 1] + P[a, 2] * G[k, 2]
                    )
                    c[k, a] = (
                        FinvT[a, 0] * G[k, 0]
                        + FinvT[a, 1] * G[k, 1]
                        + FinvT[a, 2] * G[k, 2]
                    )
        if want_derivs >= 2:
            coef = muj - lamj * logJ
            for k in range(12):
                for l in range(12):
                    dot = (
                        G[k, 0] * G[l, 0] + G[k, 1] * G[l, 1] + G[k, 2] * G[l, 2]
                    )
                    diag = muj * dot
                    if betaj != 0.0:
                        nk = G[k, 0] * nf[0] + G[k, 1] * nf[1] + G[k, 2] * nf[2]
                        nl = G[l, 0] * nf[0] + G[l, 1] * nf[1] + G[l, 2] * nf[2]
                        diag = diag + betaj * nk * nl
                    for a in range(3):
                        for b in range(3):
                            val = (
                                coef * c[l, a] * c[k, b]
                                + lamj * c[k, a] * c[l, b]
                            )
                            if a == b:
                                val = val + diag
                            hess[3 * k + a, 3 * l + b] += w * val
    return 0, U, grad, hess


_element_core_jit = jit(_element_core)


def _dispatch_core(Xe, xe, xhe, qp, qw, psis, dpsis, mu, lam, beta, nf, want_derivs):
    """``want_derivs``: 0 energy only, 1 adds gradient, 2 adds Hessian."""
    dt = np.result_type(Xe, xe, xhe, qp, qw, psis, dpsis, np.float64)
    args = tuple(
        np.ascontiguousarray(a, dtype=dt)
        for a in (Xe, xe, xhe, qp, qw, psis, dpsis)
    ) + tuple(
        np.ascontiguousarray(a, dtype=np.float64) for a in (mu, lam, beta, nf)
    )
    use_jit = USE_NUMBA and dt in (np.float64, np.complex128)
    core = _element_core_jit if use_jit else _element_core
    status, U, grad, hess = core(*args, int(want_derivs))
    if status != 0:
        raise ElementInversionError(
            -1, f"element inversion at quadrature point {status - 1}"
        )
    return U, grad, hess


def _material_arrays(nq, stiff_mask, soft: Material, stiff: Material):
    mu = np.where(stiff_mask, stiff.mu, soft.mu).astype(float)
    lam = np.where(stiff_mask, stiff.lam, soft.lam).astype(float)
    beta = np.where(stiff_mask, stiff.beta, soft.beta).astype(float)
    if stiff.beta != 0.0 or soft.beta != 0.0:
        n_st, n_so = stiff.fiber_vector(), soft.fiber_vector()
        if stiff.beta != 0.0 and soft.beta != 0.0 and not np.allclose(n_st, n_so):
            raise ValueError("fiber directions must agree across materials")
        nf = n_st if stiff.beta != 0.0 else n_so
    else:
        nf = np.array([1.0, 0.0, 0.0])
    return mu, lam, beta, nf


def element_integrals(Xe, xe, mat: Material, derivs: bool = True):
    """Energy/gradient/Hessian of an uncut prism (18 position DOFs)."""
    qp, qw = uncut_quadrature()
    zeros = np.zeros((6, 3))
    psis = np.zeros(6)
    dpsis = np.zeros((6, 3))
    mask = np.zeros(6, dtype=bool)
    mu, lam, beta, nf = _material_arrays(6, mask, mat, mat)
    U, grad, hess = _dispatch_core(
        Xe, xe, zeros, qp, qw, psis, dpsis, mu, lam, beta, nf, 2 if derivs else 0
    )
    return U, grad[:18], hess[:18, :18]


def _cut_pointdata(phi_tri):
    qp, qw, stiff_mask = cut_quadrature(phi_tri)
    psis, dpsis = enrichment_pointdata(qp, phi_tri, stiff_mask)
    return qp, qw, stiff_mask, psis, dpsis


def enriched_element_integrals(
    Xe, xe, xhe, phi_tri, soft: Material, stiff: Material, derivs: bool = True
):
    """Energy/gradient/Hessian of a cut prism (36 DOFs: positions then x-hat)."""
    if not is_cut(phi_tri):
        raise ValueError("element is not cut: use element_integrals")
    qp, qw, stiff_mask, psis, dpsis = _cut_pointdata(phi_tri)
    mu, lam, beta, nf = _material_arrays(len(stiff_mask), stiff_mask, soft, stiff)
    return _dispatch_core(
        Xe, xe, xhe, qp, qw, psis, dpsis, mu, lam, beta, nf, 2 if derivs else 0
    )


def enriched_phi_jacobian(Xe, xe, xhe, phi_tri, soft: Material, stiff: Material):
    """Level-set derivatives of a cut prism by complex step.

    Returns ``(dU_dphi, dgrad_dphi)`` of shapes (3,) and (36, 3).  The chain
    runs through both the ridge function and the interface geometry of the
    sub-prism quadrature; the cut classification and sign pattern are frozen
    by the unperturbed real parts.
    """
    phi_tri = np.asarray(phi_tri, dtype=float)
    dU = np.empty(3)
    dgrad = np.empty((36, 3))
    for k in range(3):
        phic = phi_tri.astype(complex)
        phic[k] += 1j * _CS_STEP
        qp, qw, stiff_mask, psis, dpsis = _cut_pointdata(phic)
        mu, lam, beta, nf = _material_arrays(len(stiff_mask), stiff_mask, soft, stiff)
        U, grad, _ = _dispatch_core(
            Xe, xe, xhe, qp, qw, psis, dpsis, mu, lam, beta, nf, 1
        )
        dU[k] = U.imag / _CS_STEP
        dgrad[:, k] = grad.imag / _CS_STEP
    return dU, dgrad
