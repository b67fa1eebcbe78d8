"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self):
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    def failures(self):
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    def __str__(self):
        status = "PASS" if self.passed else f"FAIL ({', '.join(self.failures())})"
        rows = ", ".join(f"{k}={e:.2e}" for k, e in self.errors.items())
        return f"gradcheck {status} tol={self.tolerance:g}: {rows}"


def relative_error(analytic, numeric, floor=1e-4):
    """Max abs difference scaled by the larger of the two max magnitudes.

    ``floor`` bounds the scale from below so tensors whose true gradient is
    identically zero (e.g. attention key biases) compare against round-off.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    return diff / max(scale, floor)


def numeric_gradient(loss_fn, array, h=1e-5, indices=None):
    """Central differences of ``loss_fn()`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_difference_check(loss_fn, tensors, analytic, h=1e-5, tolerance=1e-4,
                            max_entries=None, seed=0):
    """Compare analytic gradients against central differences.

    Parameters
    ----------
    loss_fn : callable
        Zero-argument function returning a scalar; it must read the arrays
        in ``tensors`` so in-place perturbation is visible to it.
    tensors : dict of str -> ndarray
        Arrays to perturb.
    analytic : dict of str -> ndarray
        Analytic gradients, same keys and shapes as ``tensors``.
    max_entries : int, optional
        Check only a random subset of this many entries per tensor.

    Returns
    -------
    GradCheckReport
        Max relative error per tensor; ``failures()`` names offending tensors.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in tensors.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != arr.shape:
            raise ValueError(f"{name}: analytic shape {a.shape} != {arr.shape}")
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort(rng.choice(arr.size, max_entries, replace=False))
        else:
            idx = np.arange(arr.size)
        num = numeric_gradient(loss_fn, arr, h, idx)
        report.errors[name] = relative_error(a.reshape(-1)[idx], num.reshape(-1)[idx])
    return report
