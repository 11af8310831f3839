"""Finite-difference validation of every analytic backward pass.

Runs at 64-bit precision and compares each hand-written gradient against
central differences. One row per layer type (conv2d, conv3d, relu,
batchnorm, loss) plus a depth-3 end-to-end network; the worst coordinate
of each check is reported with its analytic and numeric values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .network import NetworkVariant, build_network, parameter_entries, with_parameters
from .training import _backward, _forward_cached, loss_and_gradient

CHECK_NAMES = ("conv2d", "conv3d", "relu", "batchnorm", "loss", "end_to_end")


@dataclass
class GradcheckRow:
    name: str
    max_rel_error: float
    worst_coordinate: str
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return np.abs(analytic - numeric) / scale


def _compare(name: str, parts, tolerance: float, corrupt: bool) -> GradcheckRow:
    """parts: iterable of (label, analytic_grad, numeric_grad)."""
    worst = (-1.0, "", 0.0, 0.0)
    for label, a, n in parts:
        a = np.asarray(a, dtype=np.float64)
        if corrupt:
            a = a + 1e-2
        errs = _relative_errors(a, n)
        idx = np.unravel_index(np.argmax(errs), errs.shape) if errs.size else ()
        if errs.size and errs[idx] > worst[0]:
            coord = f"{label}[{', '.join(str(int(i)) for i in idx)}]"
            worst = (float(errs[idx]), coord, float(a[idx]), float(n[idx]))
    err, coord, av, nv = worst
    return GradcheckRow(name=name, max_rel_error=err, worst_coordinate=coord,
                        analytic=av, numeric=nv, passed=err < tolerance)


def run_gradcheck(variant_kind: str = "2d", seed: int = 0, step: float = 1e-5,
                  tolerance: float = 1e-4, corrupt: str | None = None) -> GradcheckReport:
    """Validate all backward passes against finite differences.

    ``corrupt`` names a check whose analytic gradient is deliberately
    perturbed — a negative control proving the harness can fail.
    """
    report = GradcheckReport(tolerance=tolerance)
    rng = T.seeded_rng(seed, purpose=7)
    with T.precision(np.float64):
        report.rows.append(_check_conv(rng, 2, step, tolerance, corrupt == "conv2d"))
        report.rows.append(_check_conv(rng, 3, step, tolerance, corrupt == "conv3d"))
        report.rows.append(_check_relu(rng, step, tolerance, corrupt == "relu"))
        report.rows.append(_check_batchnorm(rng, step, tolerance, corrupt == "batchnorm"))
        report.rows.append(_check_loss(rng, step, tolerance, corrupt == "loss"))
        report.rows.append(_check_end_to_end(variant_kind, seed, rng, step, tolerance,
                                             corrupt == "end_to_end"))
    return report


def _check_conv(rng, rank: int, step: float, tol: float, corrupt: bool) -> GradcheckRow:
    spatial = (5, 5) if rank == 2 else (3, 4, 4)
    x = rng.standard_normal((2, 2) + spatial)
    kernel = T.ConvKernel(weights=rng.standard_normal((3, 2) + (3,) * rank),
                          bias=rng.standard_normal(3))
    upstream = rng.standard_normal((2, 3) + spatial)
    grad_x, grad_w, grad_b = T.conv_backward(x, kernel, upstream)

    def objective_x(arr):
        return float(np.vdot(upstream, T.conv_forward(arr, kernel)))

    def objective_w(arr):
        k = T.ConvKernel(weights=arr, bias=kernel.bias)
        return float(np.vdot(upstream, T.conv_forward(x, k)))

    def objective_b(arr):
        k = T.ConvKernel(weights=kernel.weights, bias=arr)
        return float(np.vdot(upstream, T.conv_forward(x, k)))

    parts = [
        ("input", grad_x, T.finite_diff_gradient(objective_x, x, step)),
        ("weights", grad_w, T.finite_diff_gradient(objective_w, kernel.weights, step)),
        ("bias", grad_b, T.finite_diff_gradient(objective_b, kernel.bias, step)),
    ]
    return _compare(f"conv{rank}d", parts, tol, corrupt)


def _check_relu(rng, step: float, tol: float, corrupt: bool) -> GradcheckRow:
    x = rng.standard_normal((4, 3, 5, 5))
    x = np.where(np.abs(x) < 1e-3, 0.1, x)  # keep coordinates away from the kink
    upstream = rng.standard_normal(x.shape)
    grad = T.relu_backward(x, upstream)

    def objective(arr):
        return float(np.vdot(upstream, T.relu_forward(arr)))

    return _compare("relu", [("input", grad, T.finite_diff_gradient(objective, x, step))],
                    tol, corrupt)


def _check_batchnorm(rng, step: float, tol: float, corrupt: bool) -> GradcheckRow:
    x = rng.standard_normal((3, 2, 4, 4))
    state = T.BatchNormState(gamma=rng.standard_normal(2) + 1.0,
                             beta=rng.standard_normal(2),
                             running_mean=np.zeros(2), running_var=np.ones(2))
    upstream = rng.standard_normal(x.shape)
    grad_x, grad_gamma, grad_beta = T.batchnorm_backward(x, state, upstream, mode="train")

    def objective_x(arr):
        out, _ = T.batchnorm_forward(arr, state, mode="train")
        return float(np.vdot(upstream, out))

    def objective_gamma(arr):
        st = T.BatchNormState(gamma=arr, beta=state.beta, running_mean=state.running_mean,
                              running_var=state.running_var)
        out, _ = T.batchnorm_forward(x, st, mode="train")
        return float(np.vdot(upstream, out))

    def objective_beta(arr):
        st = T.BatchNormState(gamma=state.gamma, beta=arr, running_mean=state.running_mean,
                              running_var=state.running_var)
        out, _ = T.batchnorm_forward(x, st, mode="train")
        return float(np.vdot(upstream, out))

    parts = [
        ("input", grad_x, T.finite_diff_gradient(objective_x, x, step)),
        ("gamma", grad_gamma, T.finite_diff_gradient(objective_gamma, state.gamma, step)),
        ("beta", grad_beta, T.finite_diff_gradient(objective_beta, state.beta, step)),
    ]
    return _compare("batchnorm", parts, tol, corrupt)


def _check_loss(rng, step: float, tol: float, corrupt: bool) -> GradcheckRow:
    predictions = rng.standard_normal((4, 1, 5, 5))
    targets = rng.standard_normal((4, 1, 5, 5))
    _, grad = loss_and_gradient(predictions, targets)

    def objective(arr):
        value, _ = loss_and_gradient(arr, targets)
        return value

    return _compare("loss", [("predictions", grad,
                              T.finite_diff_gradient(objective, predictions, step))],
                    tol, corrupt)


def _check_end_to_end(kind: str, seed: int, rng, step: float, tol: float,
                      corrupt: bool) -> GradcheckRow:
    window = 1 if kind == "2d" else (3 if kind == "2.5d" else 3)
    variant = NetworkVariant(kind=kind, window=window, depth=3, width=2)
    params = build_network(variant, seed)
    # randomize biases/beta so the objective is not positively homogeneous
    arrays = [a + 0.05 * rng.standard_normal(a.shape) for _, a in parameter_entries(params)]
    params = with_parameters(params, arrays)
    if kind == "3d":
        x = rng.standard_normal((2, 1, window, 6, 6))
        t = rng.standard_normal((2, 1, window, 6, 6))
    else:
        x = rng.standard_normal((2, window, 6, 6))
        t = rng.standard_normal((2, 1, 6, 6))

    out, caches = _forward_cached(params, x, "train")
    _, upstream = loss_and_gradient(out, t)
    analytic = _backward(params, caches, upstream, "train")

    entries = parameter_entries(params)
    parts = []
    for i, (name, arr) in enumerate(entries):
        def objective(candidate, _i=i):
            trial = [candidate if j == _i else a for j, (_, a) in enumerate(entries)]
            trial_params = with_parameters(params, trial)
            trial_out, _ = _forward_cached(trial_params, x, "train")
            value, _ = loss_and_gradient(trial_out, t)
            return value

        parts.append((name, analytic[i], T.finite_diff_gradient(objective, arr, step)))
    return _compare("end_to_end", parts, tol, corrupt)


def format_report(report: GradcheckReport) -> str:
    lines = [f"{'check':<12} {'max rel err':>12} {'worst coordinate':<28} "
             f"{'analytic':>13} {'numeric':>13} result"]
    for r in report.rows:
        lines.append(f"{r.name:<12} {r.max_rel_error:>12.3e} {r.worst_coordinate:<28} "
                     f"{r.analytic:>13.6e} {r.numeric:>13.6e} "
                     f"{'pass' if r.passed else 'FAIL'}")
    lines.append(f"overall: {'pass' if report.passed else 'FAIL'} "
                 f"(tolerance {report.tolerance:g})")
    return "\n".join(lines)
