"""Kaplan-Meier and Nelson-Aalen estimators on right-continuous step curves.

Tie convention: at a time shared by deaths and censorings the deaths are
processed first.  For the survival curve this means censored subjects are
still at risk at their censoring time.  The censoring-distribution estimator
mirrors it: deaths leave the risk set before censorings at the same time are
counted.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepCurve:
    """Piecewise-constant function with jumps at ``jump_times``.

    ``values[j]`` holds on ``[jump_times[j], jump_times[j+1])`` and
    ``initial_value`` on ``[0, jump_times[0])``.
    """

    jump_times: np.ndarray
    values: np.ndarray
    initial_value: float = 1.0

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if jt.size != v.size:
            raise ValueError("jump_times and values must have the same length")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] <= 0):
            raise ValueError("jump_times must be strictly increasing and positive")
        jt.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "initial_value", float(self.initial_value))

    def __call__(self, t):
        return curve_eval(self, t)

    def left(self, t):
        return curve_eval_left(self, t)

    @property
    def final_value(self):
        return float(self.values[-1]) if self.values.size else self.initial_value

    def to_rows(self):
        """(time, value) rows starting with the value at time 0."""
        rows = [(0.0, self.initial_value)]
        rows += [(float(t), float(v)) for t, v in zip(self.jump_times, self.values)]
        return rows

    def to_dict(self):
        return {"jump_times": [float(t) for t in self.jump_times],
                "values": [float(v) for v in self.values],
                "initial_value": self.initial_value}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["jump_times"], dtype=float), np.asarray(d["values"], dtype=float),
                   d.get("initial_value", 1.0))


def curve_eval(curve, t):
    """Value of the last jump at or before ``t`` (right-continuous)."""
    t = np.asarray(t, dtype=float)
    idx = np.searchsorted(curve.jump_times, t, side="right") - 1
    full = np.concatenate([[curve.initial_value], curve.values])
    out = full[idx + 1]
    return float(out) if out.ndim == 0 else out


def curve_eval_left(curve, t):
    """Left limit: value of the last jump strictly before ``t``."""
    t = np.asarray(t, dtype=float)
    idx = np.searchsorted(curve.jump_times, t, side="left") - 1
    full = np.concatenate([[curve.initial_value], curve.values])
    out = full[idx + 1]
    return float(out) if out.ndim == 0 else out


def risk_table(times, events, death_weights, risk_weights):
    """Per distinct time: weighted deaths, weighted censorings and weighted number at risk.

    Deaths are weighted by ``death_weights``; the risk set by ``risk_weights``
    (they differ only for the Breslow estimator).  Returns
    ``(unique_times, deaths, censored, at_risk)``.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    uniq, inv = np.unique(times, return_inverse=True)
    m = uniq.size
    ev = events == 1
    deaths = np.bincount(inv[ev], weights=np.asarray(death_weights, dtype=float)[ev], minlength=m)
    censored = np.bincount(inv[~ev], weights=np.asarray(death_weights, dtype=float)[~ev],
                           minlength=m)
    per_time = np.bincount(inv, weights=np.asarray(risk_weights, dtype=float), minlength=m)
    at_risk = np.cumsum(per_time[::-1])[::-1]
    return uniq, deaths, censored, at_risk


def _weights(times, weights):
    if weights is None:
        return np.ones(np.asarray(times).size)
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative with at least one positive")
    # dividing by the maximum turns any constant weight vector into exact ones
    return w / w.max()


def _check(times, events):
    times = np.asarray(times, dtype=float).ravel()
    events = np.asarray(events).ravel()
    if times.size == 0:
        raise ValueError("need at least one observation")
    if times.size != events.size:
        raise ValueError("times and events differ in length")
    if np.any(times <= 0):
        raise ValueError("times must be strictly positive")
    return times, events


def kaplan_meier(times, events, weights=None):
    times, events = _check(times, events)
    w = _weights(times, weights)
    uniq, d, _, n = risk_table(times, events, w, w)
    jump = d > 0
    factors = 1.0 - d[jump] / n[jump]
    return StepCurve(uniq[jump], np.cumprod(factors), 1.0)


def nelson_aalen(times, events, weights=None):
    times, events = _check(times, events)
    w = _weights(times, weights)
    uniq, d, _, n = risk_table(times, events, w, w)
    jump = d > 0
    return StepCurve(uniq[jump], np.cumsum(d[jump] / n[jump]), 0.0)


def censoring_km(times, events, weights=None):
    """Kaplan-Meier estimate of the censoring survival function G."""
    times, events = _check(times, events)
    w = _weights(times, weights)
    uniq, d, c, n = risk_table(times, events, w, w)
    at_risk = n - d
    jump = c > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        factors = np.where(at_risk[jump] > 0, 1.0 - c[jump] / at_risk[jump], 0.0)
    return StepCurve(uniq[jump], np.cumprod(factors), 1.0)


def write_curves_csv(path_or_fh, curves):
    """Write ``{name: StepCurve}`` as ``curve,time,value`` rows."""
    from .serialize import format_float
    lines = ["curve,time,value"]
    for name, curve in curves.items():
        for t, v in curve.to_rows():
            lines.append(f"{name},{format_float(t)},{format_float(v)}")
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_fh, "write"):
        path_or_fh.write(text)
        return text
    from .serialize import atomic_write_text
    atomic_write_text(path_or_fh, text)
    return text
