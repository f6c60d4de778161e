"""Central-difference gradient checking for the classifier (float64 only)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


@dataclass
class GradCheckReport:
    worst_rel_error: float = 0.0
    worst_name: str = ""
    checked: int = 0
    # coordinates whose +-h stencil crossed a PReLU kink, with the step that
    # finally kept the stencil inside one linear region
    kinked: list[tuple[str, tuple[int, ...], float]] = field(default_factory=list)
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _objective(spec, params, x, upstream):
    logits, trace = nn.forward(spec, params, x)
    pattern = np.concatenate([np.concatenate([(b["z1"] >= 0).ravel(), (b["z2"] >= 0).ravel()])
                              for b in trace.blocks])
    return float(np.sum(logits * upstream)), pattern


def check_gradients(spec, params, x, upstream, h=1e-3, tol=1e-4, include_input=True,
                    input_voxels=None, max_refinements=8) -> GradCheckReport:
    """Compare :func:`nn.backward` to central differences on every coordinate.

    ``params`` and ``x`` must be float64.  ``input_voxels`` restricts the input
    check to a list of flat indices.  The objective is piecewise linear in any
    single coordinate, so where the ``h`` stencil straddles a PReLU kink the
    step is shrunk (by 4x, at most ``max_refinements`` times) until both probes
    land in the base point's linear region.
    """
    if params["head.weight"].dtype != np.float64 or x.dtype != np.float64:
        raise TypeError("gradient checks run in float64")
    params = {k: v.copy() for k, v in params.items()}
    x = x.copy()
    logits, trace = nn.forward(spec, params, x)
    grads, gx = nn.backward(trace, params, upstream)
    _, base_pattern = _objective(spec, params, x, upstream)
    report = GradCheckReport()

    def central(arr, idx, step):
        orig = arr[idx]
        arr[idx] = orig + step
        fp, pp = _objective(spec, params, x, upstream)
        arr[idx] = orig - step
        fm, pm = _objective(spec, params, x, upstream)
        arr[idx] = orig
        smooth = np.array_equal(pp, base_pattern) and np.array_equal(pm, base_pattern)
        return (fp - fm) / (2 * step), smooth

    def probe(arr, idx, analytic, name):
        fd, smooth = central(arr, idx, h)
        if not smooth:
            step = h
            for _ in range(max_refinements):
                step /= 4
                fd, smooth = central(arr, idx, step)
                if smooth:
                    break
            report.kinked.append((name, idx, step))
        err = rel_error(analytic, fd)
        report.checked += 1
        if err > report.worst_rel_error:
            report.worst_rel_error, report.worst_name = err, f"{name}{list(idx)}"
        if err >= tol:
            report.failures.append((name, idx, analytic, fd))

    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            probe(value, idx, float(grads[name][idx]), name)
    if include_input:
        flat = range(x.size) if input_voxels is None else input_voxels
        for i in flat:
            idx = np.unravel_index(int(i), x.shape)
            probe(x, idx, float(gx[idx]), "input")
    return report
