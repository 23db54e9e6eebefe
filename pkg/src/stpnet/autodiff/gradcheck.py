"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractViolation, InvalidArgumentError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    passed: bool
    worst: Optional[Tuple[int, int]] = None
    name: str = ""
    errors: List[float] = field(default_factory=list, repr=False)
    n_kinks: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        kinks = f", {self.n_kinks} kink coords replaced" if self.n_kinks else ""
        return (
            f"{status} {self.name or 'grad_check'}: max_rel_error={self.max_rel_error:.3e} "
            f"over {self.n_checked} coords (tol {self.tol:g}{kinks})"
        )


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise InvalidArgumentError("grad_check needs a scalar-valued function")
    return float(out.data.reshape(()))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int = 100,
    seed: int = 0,
    name: str = "",
    kink_tol: Optional[float] = None,
) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` takes no arguments and closes over ``params``, which are perturbed in
    place.  ``n_samples`` coordinates are drawn across all parameters (all of
    them when there are fewer).  The relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.

    With ``kink_tol`` set, a coordinate whose two one-sided slopes disagree
    by more than ``kink_tol`` relative to their magnitude is taken to straddle
    a ReLU/max kink, where central differences are meaningless; it is replaced
    by a fresh coordinate.  A wrong backward pass still fails, because its
    one-sided slopes agree with each other but not with the analytic value.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise InvalidArgumentError("grad_check requires 64-bit tensors")
        p.requires_grad = True
        p.grad = None

    with no_grad():
        first, second = _scalar(f()), _scalar(f())
    if first != second:
        raise ContractViolation(
            f"function is not deterministic: {first!r} != {second!r}"
        )

    out = f()
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    order = np.random.default_rng(seed).permutation(total)
    f0 = first

    errors = []
    worst, worst_err = None, -1.0
    n_kinks = 0
    with no_grad():
        for c in order:
            if len(errors) >= n_samples:
                break
            pi = int(np.searchsorted(offsets, c, side="right") - 1)
            i = int(c - offsets[pi])
            flat = params[pi].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            if kink_tol is not None:
                up, down = fp - f0, f0 - fm
                if abs(up - down) > kink_tol * (abs(up) + abs(down)) + 1e-12:
                    n_kinks += 1
                    continue
            num = (fp - fm) / (2 * eps)
            a = float(analytic[pi].reshape(-1)[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            errors.append(err)
            if err > worst_err:
                worst, worst_err = (pi, i), err
    max_err = max(errors) if errors else 0.0
    return GradCheckReport(
        max_rel_error=max_err,
        n_checked=len(errors),
        tol=tol,
        passed=max_err <= tol,
        worst=worst,
        name=name,
        errors=errors,
        n_kinks=n_kinks,
    )
