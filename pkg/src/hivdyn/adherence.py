"""MEMS adherence summarization.

A MEMS cap log is a list of bottle-opening timestamps. For each study visit
the adherence rate is the number of credited dosing events divided by the
number prescribed over an assessment window. Thirteen window conventions
are supported, named ``M`` and ``Mf.l`` where the frame ``f`` (0-3 weeks)
is the delay of the window end before the visit and the length ``l``
(1-3 weeks) is the window size:

* ``M``      - the full previous-visit-to-visit interval, ending the day
  before the visit;
* ``Mf.l``   - an ``l``-week window ending ``max(7f, 1)`` days before the
  visit day (the zero-frame windows stop the day before the visit; delayed
  frames stop exactly ``7f`` days before).

For the week-8 visit (day 56) these give the windows 28-55 (M), 49-55,
42-55, 35-55 (M0.x), 43-49, 36-49, 29-49 (M1.x), 36-42, 29-42, 22-42
(M2.x), and 29-35, 22-35, 15-35 (M3.x).

Openings on a calendar day are credited up to the prescribed doses per day,
so curiosity openings never push a rate above 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .efficacy import AdherenceProfile
from .errors import DomainError


@dataclass(frozen=True)
class MemsLog:
    """Bottle-opening timestamps (fractional days) and the dosing schedule."""

    events: tuple
    doses_per_day: int = 2

    def __post_init__(self):
        events = tuple(float(e) for e in self.events)
        if any(b < a for a, b in zip(events, events[1:])):
            raise DomainError("events must be sorted nondecreasing")
        if any(e < 0 or not math.isfinite(e) for e in events):
            raise DomainError("events must be finite and nonnegative")
        if self.doses_per_day < 1:
            raise DomainError("doses_per_day must be >= 1")
        object.__setattr__(self, "events", events)


@dataclass(frozen=True)
class VisitSchedule:
    """Study days of viral-load measurements; day 0 is enrollment."""

    visit_days: tuple

    def __post_init__(self):
        days = tuple(int(d) for d in self.visit_days)
        if tuple(float(d) for d in self.visit_days) != tuple(
                float(d) for d in days):
            raise DomainError("visit days must be whole days")
        if len(days) < 2:
            raise DomainError("need at least two visits")
        if days[0] != 0:
            raise DomainError("first visit day must be 0")
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DomainError("visit days must be strictly increasing")
        object.__setattr__(self, "visit_days", days)


@dataclass(frozen=True)
class MetricSpec:
    """One of the 13 window conventions. ``frame_weeks``/``length_weeks``
    are None for the full-interval reference metric ``M``."""

    name: str
    frame_weeks: int | None
    length_weeks: int | None


METRICS = {
    "M": MetricSpec("M", None, None),
    **{
        f"M{f}.{l}": MetricSpec(f"M{f}.{l}", f, l)
        for f in range(4)
        for l in range(1, 4)
    },
}

METRIC_NAMES = tuple(METRICS)
MODEL_LABELS = METRIC_NAMES + ("control",)

#: Carry-forward default for a first interval whose window clips to nothing.
FIRST_INTERVAL_DEFAULT_RATE = 1.0


def window_for_visit(spec, schedule, visit_index):
    """Inclusive day range over which adherence is assessed for a visit.

    Returns ``None`` when the window is empty after clipping at day 0
    (callers carry the previous rate forward). ``visit_index`` counts from
    1; the enrollment visit has no adherence window.
    """
    if not 1 <= visit_index < len(schedule.visit_days):
        raise DomainError(
            f"visit_index must be in [1, {len(schedule.visit_days) - 1}], "
            f"got {visit_index}"
        )
    visit_day = schedule.visit_days[visit_index]
    if spec.frame_weeks is None:
        start = schedule.visit_days[visit_index - 1]
        end = visit_day - 1
    else:
        end = visit_day - max(7 * spec.frame_weeks, 1)
        start = end - 7 * spec.length_weeks + 1
    start = max(start, 0)
    if end < start:
        return None
    return start, end


def adherence_rate(log, window):
    """Credited dosing events over prescribed events in an inclusive
    day window."""
    start, end = window
    if start > end:
        raise DomainError(f"empty window ({start}, {end})")
    n_days = end - start + 1
    if log.events:
        days = np.floor(np.asarray(log.events))
        in_window = days[(days >= start) & (days <= end)]
        _, counts = np.unique(in_window, return_counts=True)
        credited = int(np.minimum(counts, log.doses_per_day).sum())
    else:
        credited = 0
    return credited / (log.doses_per_day * n_days)


def visit_rates(log, schedule, spec):
    """Per-visit rates with carry-forward bookkeeping.

    Returns a list of ``(rate, carried)`` pairs, one per between-visit
    interval; ``carried`` marks rates reused from the previous interval
    (or the optimistic default for a clipped-away first window).
    """
    out = []
    prev = FIRST_INTERVAL_DEFAULT_RATE
    for k in range(1, len(schedule.visit_days)):
        window = window_for_visit(spec, schedule, k)
        if window is None:
            out.append((prev, True))
        else:
            rate = adherence_rate(log, window)
            out.append((rate, False))
            prev = rate
    return out


def build_profile(log, schedule, spec):
    """Adherence step function on the visit grid under one window metric."""
    rates = [rate for rate, _ in visit_rates(log, schedule, spec)]
    return AdherenceProfile(knots=tuple(float(d) for d in schedule.visit_days),
                            rates=tuple(rates))
