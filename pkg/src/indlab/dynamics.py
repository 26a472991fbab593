"""Exact loss, gradients and gradient flow of the three-parameter induction head.

With orthonormal inputs, the query on the last pair, the self-excluding
causal mask, and only (alpha, beta, gamma) = (a3, b2, g3) nonzero, the loss
depends on nothing but the three parameters and N:

    G = e^alpha + 2N - 2,   F = 2N - 1,
    s = exp(beta e^alpha / G),   r = s + F,
    L = gamma^2 (s^2 + F) / r^2 - 2 gamma s / r + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class IntegrationError(RuntimeError):
    """The flow left the finite regime or ran out of horizon."""


@dataclass(frozen=True)
class ClosedFormAux:
    s: float
    G: float
    F: float
    r: float


def aux(a: float, b: float, n: int) -> ClosedFormAux:
    if n < 2:
        raise ValueError(f"closed form needs N >= 2, got {n}")
    ea = math.exp(a)
    G = ea + 2 * n - 2
    F = 2 * n - 1
    s = math.exp(b * ea / G)
    return ClosedFormAux(s, G, F, s + F)


def closed_loss(a: float, b: float, g: float, n: int) -> float:
    x = aux(a, b, n)
    return g * g * (x.s * x.s + x.F) / x.r**2 - 2.0 * g * x.s / x.r + 1.0


def closed_grad(a: float, b: float, g: float, n: int) -> tuple[float, float, float]:
    """(dL/dalpha, dL/dbeta, dL/dgamma)."""
    x = aux(a, b, n)
    ea = math.exp(a)
    common = g * g * (x.s - 1.0) / x.r**3 - g / x.r**2
    d_beta = 2.0 * x.F * x.s * ea / x.G * common
    d_alpha = 4.0 * b * (n - 1) * x.F * x.s * ea / x.G**2 * common
    d_gamma = 2.0 * g * (x.s * x.s + x.F) / x.r**2 - 2.0 * x.s / x.r
    return d_alpha, d_beta, d_gamma


def flow_rhs(state: np.ndarray, n: int) -> np.ndarray:
    return -np.array(closed_grad(state[0], state[1], state[2], n))


# Butcher tableaux: (c, A, b)
_TABLEAUX = {
    "rk4": (
        (0.0, 0.5, 0.5, 1.0),
        ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        (1 / 6, 1 / 3, 1 / 3, 1 / 6),
    ),
    "rk38": (
        (0.0, 1 / 3, 2 / 3, 1.0),
        ((), (1 / 3,), (-1 / 3, 1.0), (1.0, -1.0, 1.0)),
        (1 / 8, 3 / 8, 3 / 8, 1 / 8),
    ),
}


def rk_step(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, h: float, k1: np.ndarray, method: str = "rk4") -> np.ndarray:
    """One explicit Runge-Kutta step of an autonomous system; ``k1 = f(y)``."""
    _, a, b = _TABLEAUX[method]
    ks = [k1]
    for row in a[1:]:
        ks.append(f(y + h * sum(coef * k for coef, k in zip(row, ks))))
    return y + h * sum(coef * k for coef, k in zip(b, ks))


@dataclass(frozen=True)
class StepControl:
    """Step rule: h = min(h_max, max_change / max|f|).

    ``h_max`` defaults to N^2 / 400 when None, so step counts stay roughly
    flat in N while the horizon grows like N^2.
    """

    max_change: float = 1e-3
    h_max: float | None = None
    method: str = "rk4"

    def cap(self, n: int) -> float:
        return self.h_max if self.h_max is not None else n * n / 400.0

    def halved(self, n: int) -> "StepControl":
        return StepControl(self.max_change / 2, self.cap(n) / 2, self.method)

    def with_method(self, method: str) -> "StepControl":
        return StepControl(self.max_change, self.h_max, method)


@dataclass
class Thresholds:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5

    @classmethod
    def parse(cls, value: "float | Sequence[float] | Thresholds") -> "Thresholds":
        if isinstance(value, Thresholds):
            return value
        if isinstance(value, (int, float)):
            return cls(float(value), float(value), float(value))
        a, b, g = value
        return cls(float(a), float(b), float(g))

    def as_tuple(self) -> tuple[float, float, float]:
        return self.alpha, self.beta, self.gamma

    def to_json(self) -> float | dict:
        if self.alpha == self.beta == self.gamma:
            return self.alpha
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}


@dataclass
class EmergenceRecord:
    N: int
    threshold: Thresholds
    T_alpha: float
    T_beta: float
    T_gamma: float

    @property
    def t_icl(self) -> float:
        return max(self.T_alpha, self.T_beta, self.T_gamma)

    @property
    def ordering_ok(self) -> bool:
        return self.T_gamma < self.T_beta < self.T_alpha

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "threshold": self.threshold.to_json(),
            "T_alpha": self.T_alpha,
            "T_beta": self.T_beta,
            "T_gamma": self.T_gamma,
            "t_icl": self.t_icl,
            "ordering_ok": self.ordering_ok,
        }


@dataclass
class FlowTrajectory:
    t: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    loss: np.ndarray

    def state_at(self, times: np.ndarray) -> np.ndarray:
        """Linear interpolation of (alpha, beta, gamma) at ``times``."""
        times = np.asarray(times, dtype=np.float64)
        return np.stack([np.interp(times, self.t, v) for v in (self.alpha, self.beta, self.gamma)], axis=-1)

    def rows(self):
        return zip(self.t, self.alpha, self.beta, self.gamma, self.loss)


def integrate_flow(
    n: int,
    threshold: float | Sequence[float] | Thresholds = 0.5,
    step: StepControl | None = None,
    t_max: float | None = None,
    *,
    extra_time: float = 0.0,
) -> tuple[FlowTrajectory, EmergenceRecord]:
    """Integrate d(alpha, beta, gamma)/dt = -grad L from the origin.

    Stops once all three parameters have crossed their thresholds (plus
    ``extra_time`` more, if requested). Crossing times are located by linear
    interpolation inside the crossing step.
    """
    if n < 2:
        raise ValueError(f"closed form needs N >= 2, got {n}")
    step = step or StepControl()
    thr = Thresholds.parse(threshold)
    t_max = 100.0 * n * n if t_max is None else float(t_max)
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    h_max = step.cap(n)

    def f(y):
        return flow_rhs(y, n)

    y = np.zeros(3)
    t = 0.0
    ts, ys, ls = [0.0], [y.copy()], [closed_loss(0.0, 0.0, 0.0, n)]
    cross: list[float | None] = [None, None, None]
    levels = thr.as_tuple()
    stop_at = None
    while True:
        k1 = f(y)
        rate = float(np.max(np.abs(k1)))
        h = h_max if rate == 0.0 else min(h_max, step.max_change / rate)
        if stop_at is not None:
            h = min(h, stop_at - t)
        y_new = rk_step(f, y, h, k1, step.method)
        if not np.all(np.isfinite(y_new)):
            raise IntegrationError(f"non-finite state at t={t}")
        t_new = t + h
        for i in range(3):
            if cross[i] is None and y_new[i] >= levels[i]:
                frac = (levels[i] - y[i]) / (y_new[i] - y[i]) if y_new[i] != y[i] else 1.0
                cross[i] = float(t + frac * h)
        t, y = t_new, y_new
        ts.append(t)
        ys.append(y.copy())
        ls.append(closed_loss(y[0], y[1], y[2], n))
        if stop_at is None and all(c is not None for c in cross):
            stop_at = t + extra_time
        if stop_at is not None and t >= stop_at - 1e-12:
            break
        if t >= t_max:
            raise IntegrationError(
                f"horizon t_max={t_max} exhausted before all parameters crossed (N={n}, crossed={cross})"
            )
    arr = np.array(ys)
    traj = FlowTrajectory(np.array(ts), arr[:, 0], arr[:, 1], arr[:, 2], np.array(ls))
    rec = EmergenceRecord(n, thr, cross[0], cross[1], cross[2])
    return traj, rec


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class ScalingResult:
    records: list[EmergenceRecord]
    slopes: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"slopes": dict(self.slopes), "records": [r.to_json() for r in self.records]}


def _scan_one(args):
    n, thr, step = args
    return integrate_flow(n, thr, step)[1]


def scaling_scan(
    n_list: Sequence[int],
    threshold: float | Sequence[float] | Thresholds = 0.5,
    step: StepControl | None = None,
    *,
    jobs: int = 1,
    validate: bool = True,
) -> ScalingResult:
    """Emergence records per N and the log-log slopes of each emergence time."""
    n_list = [int(n) for n in n_list]
    if validate:
        if n_list != sorted(n_list):
            raise ValueError("n_list must be sorted")
        if len(n_list) < 4 or max(n_list) < 16:
            raise ValueError("scaling scan needs at least 4 values of N with max >= 16")
    work = [(n, threshold, step) for n in n_list]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_scan_one, work))
    else:
        records = [_scan_one(w) for w in work]
    slopes = {
        "T_gamma": loglog_slope(n_list, [r.T_gamma for r in records]),
        "T_beta": loglog_slope(n_list, [r.T_beta for r in records]),
        "T_alpha": loglog_slope(n_list, [r.T_alpha for r in records]),
        "t_icl": loglog_slope(n_list, [r.t_icl for r in records]),
    }
    return ScalingResult(records, slopes)


def flow_on_grid(n: int, times: Sequence[float], max_change: float = 1e-4, method: str = "rk4") -> np.ndarray:
    """Flow state at each of the sorted ``times`` (shape (len(times), 3)).

    Every grid interval is split into RK substeps small enough that no
    parameter moves by more than ``max_change`` per substep.
    """
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be sorted and non-negative")

    def f(y):
        return flow_rhs(y, n)

    out = np.empty((times.size, 3))
    y, t = np.zeros(3), 0.0
    for i, target in enumerate(times):
        while t < target:
            k1 = f(y)
            rate = float(np.max(np.abs(k1)))
            h = target - t if rate == 0.0 else min(target - t, max_change / rate)
            y = rk_step(f, y, h, k1, method)
            t = target if h == target - t else t + h
        out[i] = y
    return out
