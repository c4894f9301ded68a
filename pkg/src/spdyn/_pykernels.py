"""Pure-Python versions of the compiled kernels (same signatures)."""
import numpy as np

from .latentode import EventBatch, residual_loss_grad_tape


def ode_loss_grad(theta, dt, p_val, p_flag, e_val, e_flag, r_val, r_flag):
    batch = EventBatch(dt, p_val, p_flag, e_val, e_flag, r_val, r_flag)
    return residual_loss_grad_tape(theta, batch)


def lasso_cd(G, c, pen, beta, tol, max_sweeps):
    p = G.shape[0]
    diag = np.diag(G).copy()
    q = G @ beta
    sweep = 0
    max_delta = 0.0
    while sweep < max_sweeps:
        sweep += 1
        max_delta = 0.0
        for j in range(p):
            gjj = diag[j]
            if gjj <= 0.0:
                continue
            rho = c[j] - q[j] + gjj * beta[j]
            if rho > pen[j]:
                new = (rho - pen[j]) / gjj
            elif rho < -pen[j]:
                new = (rho + pen[j]) / gjj
            else:
                new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                beta[j] = new
                q += delta * G[:, j]
                max_delta = max(max_delta, abs(delta))
        if max_delta < tol:
            break
    return sweep, max_delta
