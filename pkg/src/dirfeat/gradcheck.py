"""Central-difference gradient oracle.

Deliberately independent of the layer code: a check needs nothing but a
scalar function of a flat parameter vector and the analytic gradient to
test against.  The oracle itself is validated against closed-form
derivatives in the test suite before anything else trusts it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative error denominator floor, so 0/0 never fakes a failure.
REL_FLOOR = 1e-8
DEFAULT_STEP = 1e-5


def central_difference(f, theta, index: int, step: float = DEFAULT_STEP) -> float:
    """(f(theta + h*e_i) - f(theta - h*e_i)) / 2h at coordinate `index`."""
    theta = np.asarray(theta, dtype=np.float64)
    tp = theta.copy()
    tp[index] += step
    fp = float(f(tp))
    tm = theta.copy()
    tm[index] -= step
    fm = float(f(tm))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError(f"non-finite evaluation while probing coordinate {index}")
    return (fp - fm) / (2.0 * step)


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_probed: int
    worst_index: int
    step: float
    tolerance: float
    failures: list = field(default_factory=list)  # (coordinate, rel_error) over tolerance
    n_skipped: int = 0  # probes rejected because they straddled a kink/tie

    @property
    def ok(self) -> bool:
        return not self.failures

    def row(self, name: str) -> str:
        status = "ok" if self.ok else "FAIL"
        return (
            f"{name:<28s} {status:>4s}  max={self.max_rel_error:.3e} "
            f"mean={self.mean_rel_error:.3e}  probes={self.n_probed} "
            f"skipped={self.n_skipped} tol={self.tolerance:.1e} "
            f"worst_coord={self.worst_index}"
        )


def check_gradients(
    f,
    theta,
    analytic,
    *,
    tolerance: float,
    n_probes: int = 200,
    step: float = DEFAULT_STEP,
    rng=None,
    exclude=None,
    fingerprint=None,
) -> GradCheckReport:
    """Compare `analytic` to central differences on a random coordinate subset.

    `exclude` is an optional boolean mask of coordinates that must not be
    probed (e.g. inputs sitting within 10*step of a kink, where the central
    difference itself is wrong).

    `fingerprint`, if given, is a zero-argument callable returning the
    discrete state of the last `f` evaluation (activation sign masks,
    pooling argmax indices, ...).  A probe whose two evaluations land in
    different regions straddles a non-differentiable point, so it is
    skipped and replaced by the next candidate coordinate.

    Relative error per probe is |a - n| / max(|a|, |n|, 1e-8).
    """
    theta = np.asarray(theta, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.size != theta.size:
        raise ValueError("analytic gradient and parameter vector sizes differ")
    allowed = np.arange(theta.size)
    if exclude is not None:
        allowed = allowed[~np.asarray(exclude, dtype=bool).ravel()]
    if allowed.size == 0:
        raise ValueError("no probe-able coordinates left after exclusion")
    if rng is None:
        rng = np.random.default_rng(0)
    k = min(int(n_probes), allowed.size)
    candidates = rng.permutation(allowed)

    rel_errors = []
    probed = []
    failures = []
    n_skipped = 0
    for i in candidates:
        if len(probed) == k:
            break
        i = int(i)
        tp = theta.copy()
        tp[i] += step
        fp = float(f(tp))
        fp_region = fingerprint() if fingerprint is not None else None
        tm = theta.copy()
        tm[i] -= step
        fm = float(f(tm))
        fm_region = fingerprint() if fingerprint is not None else None
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation while probing coordinate {i}")
        if fingerprint is not None and fp_region != fm_region:
            n_skipped += 1
            continue
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
        probed.append(i)
        rel_errors.append(rel)
        if rel > tolerance:
            failures.append((i, float(rel)))
    if not probed:
        raise ValueError("every candidate probe straddled a non-differentiable point")
    rel_errors = np.asarray(rel_errors)
    worst = probed[int(np.argmax(rel_errors))]
    return GradCheckReport(
        max_rel_error=float(rel_errors.max()),
        mean_rel_error=float(rel_errors.mean()),
        n_probed=len(probed),
        worst_index=worst,
        step=step,
        tolerance=tolerance,
        failures=failures,
        n_skipped=n_skipped,
    )


def pack(arrays) -> np.ndarray:
    """Flatten a list of arrays into one fp64 vector (copies)."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unpack_into(vector, arrays) -> None:
    """Scatter a flat vector back into the given arrays, in place."""
    vector = np.asarray(vector, dtype=np.float64)
    off = 0
    for a in arrays:
        a[...] = vector[off : off + a.size].reshape(a.shape)
        off += a.size
    if off != vector.size:
        raise ValueError(f"vector has {vector.size} entries, arrays take {off}")
