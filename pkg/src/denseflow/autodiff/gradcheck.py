"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    name: str
    tol: float
    # one (input label, max relative error) pair per checked input
    errors: list = field(default_factory=list)

    @property
    def max_error(self):
        return max((e for _, e in self.errors), default=0.0)

    @property
    def passed(self):
        return all(e < self.tol for _, e in self.errors)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        parts = " ".join(f"{label}={err:.2e}" for label, err in self.errors)
        return f"{status} {self.name} max_rel_err={self.max_error:.3e} tol={self.tol:.0e} {parts}"


def relative_error(analytic, numeric):
    """Max-norm relative discrepancy ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numerical_gradient(fn, inputs, target, step=1e-5, indices=None):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[target]``.

    ``indices`` restricts the probe to a subset of flat positions; the returned
    array then has one entry per probed index.
    """
    data = inputs[target].data
    flat = data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    out = []
    for k in probe:
        orig = flat[k]
        flat[k] = orig + step
        up = float(fn(*inputs).data)
        flat[k] = orig - step
        down = float(fn(*inputs).data)
        flat[k] = orig
        out.append((up - down) / (2.0 * step))
    return np.asarray(out)


def gradcheck(fn, inputs, tol=1e-4, step=1e-5, name="fn", labels=None, indices=None):
    """Compare analytic gradients of scalar ``fn`` against central differences.

    Every input with ``requires_grad`` is checked.  ``indices`` optionally maps
    an input position to the flat indices to probe (all of them otherwise).
    Failure is reported, never raised.
    """
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    loss.backward()
    report = GradcheckReport(name=name, tol=tol)
    indices = indices or {}
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        label = labels[pos] if labels else f"input{pos}"
        idx = indices.get(pos)
        numeric = numerical_gradient(fn, inputs, pos, step=step, indices=idx)
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        analytic = analytic.reshape(-1)
        if idx is not None:
            analytic = analytic[np.asarray(idx)]
        report.errors.append((label, relative_error(analytic, numeric)))
    return report
