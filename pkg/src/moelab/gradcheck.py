"""Finite-difference verification of tape gradients.

Central differences with step ``eps`` approximate dL/dtheta to O(eps^2);
float64 rounding adds noise of order |L| * 1e-16 / eps. With the default
eps=1e-5 both effects sit around 1e-10, far below the default relative
tolerance for gradients of ordinary magnitude. An absolute floor absorbs
elements whose true gradient is (near) zero, where a relative test would
amplify that noise into spurious failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .tensor import no_grad


def _probe(loss_fn, where):
    value = float(loss_fn().data)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at probe {where}")
    return value


@dataclass
class GradCheckReport:
    ok: bool
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    worst_analytic: float
    worst_numeric: float
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} at "
            f"{self.worst_param}{list(self.worst_index)} "
            f"(analytic {self.worst_analytic:.6e}, numeric {self.worst_numeric:.6e})"
        )


def grad_check(loss_fn, params, names=None, eps=1e-5, rel_tol=1e-6, abs_tol=1e-8):
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic and rebuild its graph from the current
    contents of ``params`` on every call. Each element's error is
    |a - n| / max(|a|, |n|, abs_tol / rel_tol); the check passes when every
    error is <= rel_tol. The denominator floor makes the test absolute for
    near-zero gradients, where rounding noise would dominate a pure ratio.
    """
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(float(loss.data)):
        raise NumericalError("non-finite loss at the unperturbed point")
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    ok = True
    max_rel = 0.0
    worst = ("", (), 0.0, 0.0)
    per_param = {}
    floor = abs_tol / rel_tol
    with no_grad():
        for p, a, name in zip(params, analytic, names):
            flat = p.data.reshape(-1)
            param_max = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                lo_hi = _probe(loss_fn, f"{name}[{j}] + eps")
                flat[j] = orig - eps
                lo_lo = _probe(loss_fn, f"{name}[{j}] - eps")
                flat[j] = orig
                numeric = (lo_hi - lo_lo) / (2.0 * eps)
                a_j = float(a.reshape(-1)[j])
                diff = abs(a_j - numeric)
                rel = diff / max(abs(a_j), abs(numeric), floor)
                if rel > param_max:
                    param_max = rel
                if rel > max_rel:
                    max_rel = rel
                    idx = np.unravel_index(j, p.data.shape)
                    worst = (name, idx, a_j, numeric)
                if rel > rel_tol:
                    ok = False
            per_param[name] = param_max
    return GradCheckReport(
        ok=ok,
        max_rel_error=max_rel,
        worst_param=worst[0],
        worst_index=tuple(int(i) for i in worst[1]),
        worst_analytic=worst[2],
        worst_numeric=worst[3],
        per_param=per_param,
    )
