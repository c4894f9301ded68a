"""Select the compiled kernels when available, else the pure-Python ones.

Set ``SPDYN_PURE_PYTHON=1`` to force the fallback.
"""
import os
import types

from . import _pykernels

python = types.SimpleNamespace(
    name="python", ode_loss_grad=_pykernels.ode_loss_grad, lasso_cd=_pykernels.lasso_cd)

compiled = None
try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None
else:
    compiled = types.SimpleNamespace(
        name="cython", ode_loss_grad=_kernels.ode_loss_grad, lasso_cd=_kernels.lasso_cd)

if compiled is not None and not os.environ.get("SPDYN_PURE_PYTHON"):
    active = compiled
else:
    active = python

BACKEND = active.name


def available():
    return [b for b in (compiled, python) if b is not None]


def ode_loss_grad(theta, batch, backend=None):
    b = backend or active
    return b.ode_loss_grad(theta, batch.dt, batch.p_val, batch.p_flag, batch.e_val,
                           batch.e_flag, batch.r_val, batch.r_flag)


def lasso_cd(G, c, pen, beta, tol, max_sweeps, backend=None):
    b = backend or active
    return b.lasso_cd(G, c, pen, beta, tol, max_sweeps)
