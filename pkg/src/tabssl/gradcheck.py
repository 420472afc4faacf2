"""Finite-difference verification of analytic gradients.

`check_gradient` compares the gradients produced by the reverse-mode
engine against central finite differences, coordinate by coordinate. The
function under test must be deterministic; this is enforced by evaluating
it twice and requiring bitwise-identical outputs, since a stochastic
function would make the comparison meaningless.

Relative error uses a unit floor in the denominator,
``|a - b| / max(|a|, |b|, 1)``, so near-zero gradients are compared
absolutely instead of amplifying finite-difference noise.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OracleError
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    """Per-parameter worst relative errors from one gradient check."""

    max_rel_err: float
    tolerance: float
    passed: bool
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.1e} over {len(self.per_param)} params"
        )


def _named(params):
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            name, t = p
        else:
            name, t = f"param{i}", p
        if not isinstance(t, Tensor):
            raise ConfigError(f"check_gradient param {name!r} is not a Tensor")
        out.append((str(name), t))
    return out


def check_gradient(f, params, step: float = 1e-5, tolerance: float = 1e-6) -> GradCheckReport:
    """Verify df/dparam for a scalar-valued function of Tensor parameters.

    Args:
        f: zero-argument callable returning a scalar Tensor; must read the
           current values of `params` and be re-evaluatable.
        params: Tensors, or (name, Tensor) pairs, to check. Each must have
           requires_grad set.
        step: central-difference step size.
        tolerance: maximum allowed relative error.
    """
    named = _named(params)
    if not named:
        raise ConfigError("check_gradient needs at least one parameter")
    for name, t in named:
        if not t.requires_grad:
            raise ConfigError(f"param {name!r} does not have requires_grad set")

    first = f()
    second = f()
    if first.data.shape != second.data.shape or not np.array_equal(
        first.data, second.data
    ):
        raise OracleError(
            "function is not deterministic: two evaluations differ bitwise; "
            "disable dropout/masking randomness before checking gradients"
        )

    for _, t in named:
        t.grad = None
    loss = f()
    backward(loss)

    analytic = {}
    for name, t in named:
        if t.grad is None:
            analytic[name] = np.zeros_like(t.data)
        else:
            analytic[name] = np.array(t.grad, dtype=np.float64, copy=True)

    per_param = {}
    worst = 0.0
    for name, t in named:
        flat = t.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            a = float(grad_flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            if rel > param_worst:
                param_worst = rel
        per_param[name] = param_worst
        worst = max(worst, param_worst)

    return GradCheckReport(
        max_rel_err=worst,
        tolerance=tolerance,
        passed=worst < tolerance,
        per_param=per_param,
    )
