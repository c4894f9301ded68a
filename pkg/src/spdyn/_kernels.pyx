# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.

ode_loss_grad
    Squared-residual loss of the reset-driven linear latent ODE and its exact
    gradient w.r.t. (eta1..eta4, ic_p, ic_e), by forward sensitivities through
    the closed-form 2x2 matrix exponential.
lasso_cd
    Cyclic coordinate descent for the weighted Lasso in Gram form.

Pure-Python counterparts live in ``latentode.residual_loss_grad_tape`` and
``_pykernels.lasso_cd``.
"""
import numpy as np
from libc.math cimport exp, sqrt, cosh, sinh, cos, sin, fabs

cdef double SERIES_THRESHOLD = 1e-2


cdef inline void _cs(double u, double t, double* C, double* S, double* Su) nogil:
    cdef double w = u * t * t
    cdef double r, t3
    if fabs(w) < SERIES_THRESHOLD:
        # C = sum w^k/(2k)!, S = t sum w^k/(2k+1)!, dS/du = t^3 sum_{k>=1} k w^(k-1)/(2k+1)!
        C[0] = 1.0 + w * (1.0 / 2 + w * (1.0 / 24 + w * (1.0 / 720 + w * (1.0 / 40320))))
        S[0] = t * (1.0 + w * (1.0 / 6 + w * (1.0 / 120 + w * (1.0 / 5040 + w * (1.0 / 362880)))))
        t3 = t * t * t
        Su[0] = t3 * (1.0 / 6 + w * (2.0 / 120 + w * (3.0 / 5040 + w * (4.0 / 362880
                      + w * (5.0 / 39916800 + w * (6.0 / 6227020800.0))))))
        return
    if u > 0:
        r = sqrt(u)
        C[0] = cosh(r * t)
        S[0] = sinh(r * t) / r
    else:
        r = sqrt(-u)
        C[0] = cos(r * t)
        S[0] = sin(r * t) / r
    Su[0] = (t * C[0] - S[0]) / (2.0 * u)


def ode_loss_grad(double[:, ::1] theta, double[:, ::1] dt, double[:, ::1] p_val,
                  double[:, ::1] p_flag, double[:, ::1] e_val, double[:, ::1] e_flag,
                  double[:, ::1] r_val, double[:, ::1] r_flag):
    cdef Py_ssize_t K = theta.shape[0]
    cdef Py_ssize_t L = dt.shape[1]
    loss_arr = np.zeros(K)
    grad_arr = np.zeros((K, 6))
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t k, l, j, p
    cdef double a, b, c, d, t, m, h, u, C, S, Su, Cu, em
    cdef double e11, e12, e21, e22, x0, x1, n0, n1, r
    cdef double s0[6]
    cdef double s1[6]
    cdef double ns0[6]
    cdef double ns1[6]
    # dE/d(a, b, c, d) as 2x2 blocks
    cdef double dE[4][4]
    cdef double mp, up, q11, q12, q21, q22
    # theta column of each of a, b, c, d
    cdef int col[4]
    col[0] = 0
    col[1] = 1
    col[2] = 3
    col[3] = 2

    with nogil:
        for k in range(K):
            a = theta[k, 0]
            b = theta[k, 1]
            d = theta[k, 2]
            c = theta[k, 3]
            x0 = theta[k, 4]
            x1 = theta[k, 5]
            for j in range(6):
                s0[j] = 0.0
                s1[j] = 0.0
            s0[4] = 1.0
            s1[5] = 1.0
            m = 0.5 * (a + d)
            h = 0.5 * (a - d)
            u = h * h + b * c
            for l in range(L):
                t = dt[k, l]
                if t != 0.0:
                    _cs(u, t, &C, &S, &Su)
                    Cu = 0.5 * t * S
                    em = exp(m * t)
                    e11 = em * (C + S * h)
                    e12 = em * S * b
                    e21 = em * S * c
                    e22 = em * (C - S * h)
                    for p in range(4):
                        if p == 0:
                            mp = 0.5
                            up = h
                        elif p == 3:
                            mp = 0.5
                            up = -h
                        elif p == 1:
                            mp = 0.0
                            up = c
                        else:
                            mp = 0.0
                            up = b
                        # em * (Cu up I + Su up N + S dN)
                        q11 = Cu * up + Su * up * h
                        q12 = Su * up * b
                        q21 = Su * up * c
                        q22 = Cu * up - Su * up * h
                        if p == 0:
                            q11 += 0.5 * S
                            q22 -= 0.5 * S
                        elif p == 3:
                            q11 -= 0.5 * S
                            q22 += 0.5 * S
                        elif p == 1:
                            q12 += S
                        else:
                            q21 += S
                        dE[p][0] = mp * t * e11 + em * q11
                        dE[p][1] = mp * t * e12 + em * q12
                        dE[p][2] = mp * t * e21 + em * q21
                        dE[p][3] = mp * t * e22 + em * q22
                    for j in range(6):
                        ns0[j] = e11 * s0[j] + e12 * s1[j]
                        ns1[j] = e21 * s0[j] + e22 * s1[j]
                    for p in range(4):
                        j = col[p]
                        ns0[j] += dE[p][0] * x0 + dE[p][1] * x1
                        ns1[j] += dE[p][2] * x0 + dE[p][3] * x1
                    n0 = e11 * x0 + e12 * x1
                    n1 = e21 * x0 + e22 * x1
                    x0 = n0
                    x1 = n1
                    for j in range(6):
                        s0[j] = ns0[j]
                        s1[j] = ns1[j]
                if p_flag[k, l] != 0.0:
                    r = x0 - p_val[k, l]
                    loss[k] += r * r
                    for j in range(6):
                        grad[k, j] += 2.0 * r * s0[j]
                if e_flag[k, l] != 0.0:
                    r = x1 - e_val[k, l]
                    loss[k] += r * r
                    for j in range(6):
                        grad[k, j] += 2.0 * r * s1[j]
                if r_flag[k, l] != 0.0:
                    x1 = r_val[k, l]
                    for j in range(6):
                        s1[j] = 0.0
    return loss_arr, grad_arr


def lasso_cd(double[:, ::1] G, double[::1] c, double[::1] pen, double[::1] beta,
             double tol, int max_sweeps):
    """Minimize 0.5 b'Gb - c'b + sum pen_j |b_j| in place; returns (sweeps, last max |delta|)."""
    cdef Py_ssize_t p = G.shape[0]
    cdef Py_ssize_t i, j
    cdef int sweep = 0
    cdef double rho, z, new, delta, max_delta = 0.0
    q_arr = np.asarray(G) @ np.asarray(beta)
    cdef double[::1] q = q_arr
    with nogil:
        while sweep < max_sweeps:
            sweep += 1
            max_delta = 0.0
            for j in range(p):
                if G[j, j] <= 0.0:
                    continue
                rho = c[j] - q[j] + G[j, j] * beta[j]
                if rho > pen[j]:
                    new = (rho - pen[j]) / G[j, j]
                elif rho < -pen[j]:
                    new = (rho + pen[j]) / G[j, j]
                else:
                    new = 0.0
                delta = new - beta[j]
                if delta != 0.0:
                    beta[j] = new
                    for i in range(p):
                        q[i] += delta * G[i, j]
                    if fabs(delta) > max_delta:
                        max_delta = fabs(delta)
            if max_delta < tol:
                break
    return sweep, max_delta
