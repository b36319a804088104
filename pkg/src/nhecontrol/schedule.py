"""Piecewise control laws u(t) in R^{q+2}.

A schedule is an ordered list of segments.  Each segment either holds a
constant vector or linearly interpolates samples.  Time inside a segment is
measured from the segment start.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConstantLaw:
    value: np.ndarray

    def __post_init__(self):
        v = np.array(self.value, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "value", v)

    @property
    def size(self):
        return self.value.shape[0]

    def pieces(self, duration):
        return [(0.0, duration, self.value, self.value)]

    def sup(self):
        return float(np.max(np.abs(self.value))) if self.value.size else 0.0


@dataclass(frozen=True)
class SampledLaw:
    """Linear interpolation of ``values[i]`` at relative ``times[i]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if t.ndim != 1 or v.ndim != 2 or v.shape[0] != t.shape[0] or t.shape[0] < 2:
            raise ValueError("sampled law needs >= 2 times and a (len(times), q+2) array")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("sample times must start at 0 and increase strictly")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def size(self):
        return self.values.shape[1]

    def pieces(self, duration):
        t, v = self.times, self.values
        return [(t[i], t[i + 1], v[i], v[i + 1]) for i in range(len(t) - 1)]

    def sup(self):
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class Segment:
    duration: float
    law: object

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("segment duration must be positive")
        if isinstance(self.law, SampledLaw) and not math.isclose(
                self.law.times[-1], self.duration, rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError("sampled law must span the segment")


class ControlSchedule:
    """Ordered, immutable sequence of control segments."""

    def __init__(self, segments, size=None):
        segments = tuple(segments)
        if size is None:
            if not segments:
                raise ValueError("empty schedule needs an explicit size")
            size = segments[0].law.size
        for s in segments:
            if s.law.size != size:
                raise ValueError("all segments must have the same control dimension")
        self._segments = segments
        self._size = int(size)

    # constructors
    @classmethod
    def constant(cls, value, duration):
        value = np.asarray(value, dtype=float)
        return cls([Segment(float(duration), ConstantLaw(value))], value.shape[0])

    @classmethod
    def free(cls, duration, size):
        return cls.constant(np.zeros(size), duration)

    @classmethod
    def sampled(cls, times, values):
        times = np.asarray(times, dtype=float)
        return cls([Segment(float(times[-1]), SampledLaw(times, values))])

    @classmethod
    def empty(cls, size):
        return cls([], size)

    @classmethod
    def concat(cls, schedules, size=None):
        schedules = list(schedules)
        if size is None:
            size = schedules[0].size
        segs = []
        for s in schedules:
            if s.size != size:
                raise ValueError("control dimensions differ")
            segs.extend(s.segments)
        return cls(segs, size)

    # properties
    @property
    def segments(self):
        return self._segments

    @property
    def size(self):
        return self._size

    @property
    def duration(self):
        return math.fsum(s.duration for s in self._segments)

    def is_empty(self):
        return not self._segments

    def then(self, other):
        """This schedule followed by ``other``."""
        return ControlSchedule.concat([self, other], self._size)

    __add__ = then

    def starts(self):
        """Absolute start time of each segment."""
        out, acc = [], []
        for s in self._segments:
            out.append(math.fsum(acc))
            acc.append(s.duration)
        return out

    def pieces(self):
        """Linear pieces (t0, t1, u0, u1) in absolute time."""
        out = []
        for start, seg in zip(self.starts(), self._segments):
            for a, b, u0, u1 in seg.law.pieces(seg.duration):
                out.append((start + a, start + b, u0, u1, seg))
        return out

    def value_at(self, t):
        """u(t); at a breakpoint the later segment wins."""
        for t0, t1, u0, u1, _ in reversed(self.pieces()):
            if t >= t0 - 1e-15:
                if t1 == t0:
                    return np.array(u1)
                s = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
                return (1 - s) * u0 + s * u1
        return np.zeros(self._size)

    def l2_norm(self):
        """Euclidean-in-components L^2(0,T) norm, exact for piecewise linear laws."""
        total = 0.0
        for t0, t1, u0, u1, _ in self.pieces():
            h = t1 - t0
            total += h * float(np.sum(u0**2 + u0 * u1 + u1**2)) / 3.0
        return math.sqrt(total)

    def h1_norm(self, components=None):
        """H^1(0,T) norm of the selected components.

        Only meaningful when those components are continuous; jumps between
        segments are ignored.
        """
        idx = slice(None) if components is None else list(components)
        total = 0.0
        for t0, t1, u0, u1, _ in self.pieces():
            a, b = np.asarray(u0)[idx], np.asarray(u1)[idx]
            h = t1 - t0
            total += h * float(np.sum(a**2 + a * b + b**2)) / 3.0
            total += float(np.sum((b - a) ** 2)) / h
        return math.sqrt(total)

    def l2_distance(self, other):
        """||u - v||_{L^2} over the common horizon, exact for linear pieces."""
        breaks = sorted({0.0, *(p[0] for p in self.pieces()), *(p[1] for p in self.pieces()),
                         *(p[0] for p in other.pieces()), *(p[1] for p in other.pieces())})
        T = min(self.duration, other.duration)
        breaks = [b for b in breaks if b <= T]
        total = 0.0
        for a, b in zip(breaks[:-1], breaks[1:]):
            if b - a <= 0:
                continue
            # Simpson is exact for the square of a linear function.
            da = self._inside(a, b, 0.0) - other._inside(a, b, 0.0)
            dm = self._inside(a, b, 0.5) - other._inside(a, b, 0.5)
            db = self._inside(a, b, 1.0) - other._inside(a, b, 1.0)
            total += (b - a) / 6.0 * float(np.sum(da**2 + 4 * dm**2 + db**2))
        return math.sqrt(total)

    def _inside(self, a, b, frac):
        """Value at a + frac*(b-a) using the piece that contains (a, b)."""
        mid = 0.5 * (a + b)
        for t0, t1, u0, u1, _ in self.pieces():
            if t0 <= mid <= t1:
                t = a + frac * (b - a)
                s = (t - t0) / (t1 - t0)
                return (1 - s) * u0 + s * u1
        return np.zeros(self._size)

    def sup_norm(self):
        return max((s.law.sup() for s in self._segments), default=0.0)

    def __repr__(self):
        return (f"ControlSchedule(segments={len(self._segments)}, size={self._size}, "
                f"duration={self.duration:.6g})")


def write_schedule_csv(sched, path):
    """CSV ``t_start,t_end,u_0..u_{q+1}``.

    A constant segment is one row with t_start < t_end.  A sampled segment
    is written as its sample rows with t_start = t_end = sample time.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_start", "t_end", *[f"u_{i}" for i in range(sched.size)]])
        for start, seg in zip(sched.starts(), sched.segments):
            if isinstance(seg.law, ConstantLaw):
                w.writerow([repr(start), repr(start + seg.duration),
                            *[repr(float(v)) for v in seg.law.value]])
            else:
                for t, v in zip(seg.law.times, seg.law.values):
                    w.writerow([repr(start + float(t)), repr(start + float(t)),
                                *[repr(float(x)) for x in v]])


def read_schedule_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    size = len(rows[0]) - 2
    segs, samples = [], []

    def flush():
        if samples:
            t = np.array([r[0] for r in samples])
            v = np.array([r[1] for r in samples])
            segs.append(Segment(float(t[-1] - t[0]), SampledLaw(t - t[0], v)))
            samples.clear()

    for row in rows[1:]:
        a, b = float(row[0]), float(row[1])
        vals = [float(x) for x in row[2:]]
        if a == b:
            if samples and a == samples[-1][0]:
                flush()
            samples.append((a, vals))
        else:
            flush()
            segs.append(Segment(b - a, ConstantLaw(vals)))
    flush()
    return ControlSchedule(segs, size)
