"""Central-difference verification of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from .autograd import record_kinks


@dataclass
class CoordinateResult:
    param: str
    index: tuple
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    worst: dict = field(default_factory=dict)   # param name -> CoordinateResult
    coordinates: int = 0
    resamples: int = 0
    kink_skips: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.error <= self.tol for r in self.worst.values())

    @property
    def failures(self):
        return [r for r in self.worst.values() if r.error > self.tol]

    @property
    def max_error(self):
        return max((r.error for r in self.worst.values()), default=0.0)

    def summary(self):
        lines = [f"gradcheck eps={self.eps:g} tol={self.tol:g} coords={self.coordinates} "
                 f"kink-skips={len(self.kink_skips)} resamples={self.resamples} "
                 f"-> {'PASS' if self.passed else 'FAIL'}"]
        for r in self.worst.values():
            flag = "ok  " if r.error <= self.tol else "FAIL"
            lines.append(f"  {flag} {r.param}{list(r.index)} analytic={r.analytic:.6g} "
                         f"numeric={r.numeric:.6g} err={r.error:.3g}")
        return "\n".join(lines)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _evaluate(fn):
    with record_kinks() as log:
        value = float(fn().value)
    return value, log.signature()


def gradient_check(fn, params, eps=1e-4, tol=1e-3, resample=None, max_resamples=20):
    """Compare backprop gradients of ``fn()`` with central differences.

    ``fn`` builds a scalar-output graph from ``params`` (float64 Params) on
    every call and must be a pure function of their values.  While the forward
    pass lies within ``10 * eps`` of a ReLU or max-pool tie, ``resample()`` is
    called (at most ``max_resamples`` times) to draw fresh inputs.  A coordinate
    whose perturbed passes land on a different activation pattern than the
    unperturbed one straddles a kink; it is listed in ``kink_skips`` instead of
    being scored.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise InvalidArgument(f"gradient_check needs float64 params, {p.name} is {p.value.dtype}")
    report = GradCheckReport(tol=tol, eps=eps)
    if not params:
        return report

    while True:
        with record_kinks() as log:
            out = fn()
        if not len(log) or min(log) >= 10 * eps:
            break
        if resample is None or report.resamples >= max_resamples:
            break
        resample()
        report.resamples += 1
    base_signature = log.signature()

    if out.value.size != 1:
        raise InvalidArgument("gradient_check needs a scalar-output graph")
    for p in params:
        p.zero_grad()
    out.backward()
    analytic = {id(p): p.grad.copy() for p in params}

    for p in params:
        worst = None
        grad = analytic[id(p)]
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + eps
            f_plus, sig_plus = _evaluate(fn)
            p.value[idx] = orig - eps
            f_minus, sig_minus = _evaluate(fn)
            p.value[idx] = orig
            if sig_plus != base_signature or sig_minus != base_signature:
                report.kink_skips.append((p.name, idx))
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            err = relative_error(float(grad[idx]), numeric)
            report.coordinates += 1
            if worst is None or err > worst.error:
                worst = CoordinateResult(p.name, idx, float(grad[idx]), numeric, err)
        if worst is not None:
            report.worst[p.name] = worst
    return report
