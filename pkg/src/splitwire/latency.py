"""Completion-time model, deadline-aware offloading plans and rate-trace simulation.

Units: sizes in bytes, rates in bits per second, times in seconds. All
arithmetic is written with ``+ - * /`` only, so passing
:class:`fractions.Fraction` inputs gives exact rational results.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from numbers import Real
from typing import Iterable, Mapping

MAX_TENSOR_BYTES = 2**63 - 1


def tensor_bytes(c: int, h: int, w: int) -> int:
    """Size of a float32 ``[C, H, W]`` tensor."""
    for v in (c, h, w):
        if int(v) != v or v < 1:
            raise ValueError(f"extents must be integers >= 1, got {(c, h, w)}")
    size = 4 * int(c) * int(h) * int(w)
    if size > MAX_TENSOR_BYTES:
        raise OverflowError(f"tensor of {size} bytes exceeds the supported range")
    return size


def comm_time(size_bytes, ratio, rate):
    """Seconds to send ``size_bytes / ratio`` bytes at ``rate`` bit/s."""
    if not rate > 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    if not ratio >= 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    return 8 * size_bytes / (ratio * rate)


# ---- profiles ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitProfile:
    shape: tuple  # (C, H, W) of the uncompressed intermediate tensor
    t_es: Real  # server compute after the split
    t_iot: Mapping[int, Real]  # ratio -> device compute incl. encoding

    @property
    def size_bytes(self) -> int:
        return tensor_bytes(*self.shape)


@dataclass(frozen=True)
class LatencyProfile:
    splits: Mapping[int, SplitProfile]
    t_local: Real
    t_full_offload_compute: Real
    input_image_bytes: int
    name: str = ""
    synthetic: bool = False

    def __post_init__(self):
        times = [self.t_local, self.t_full_offload_compute]
        for s in self.splits.values():
            times += [s.t_es, *s.t_iot.values()]
        if any(not t >= 0 for t in times):
            raise ValueError("profile times must be >= 0")
        if self.input_image_bytes < 0:
            raise ValueError("input_image_bytes must be >= 0")

    def t_iot(self, l: int, ratio) -> Real:
        try:
            return self.splits[l].t_iot[ratio]
        except KeyError:
            raise KeyError(f"profile has no t_iot entry for split {l}, ratio {ratio}") from None

    def t_es(self, l: int) -> Real:
        try:
            return self.splits[l].t_es
        except KeyError:
            raise KeyError(f"profile has no split point {l}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "synthetic": self.synthetic,
            "input_image_bytes": self.input_image_bytes,
            "t_local": self.t_local,
            "t_full_offload_compute": self.t_full_offload_compute,
            "split_points": {
                str(l): {"shape": list(s.shape), "t_es": s.t_es,
                         "t_iot": {str(k): v for k, v in sorted(s.t_iot.items())}}
                for l, s in sorted(self.splits.items())
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatencyProfile":
        def need(obj, key, where):
            if key not in obj:
                raise ValueError(f"profile field {where}{key!r} is missing")
            return obj[key]

        splits = {}
        for l, s in need(d, "split_points", "").items():
            where = f"split_points.{l}."
            shape = tuple(need(s, "shape", where))
            if len(shape) != 3:
                raise ValueError(f"profile field {where}'shape' must have 3 extents")
            t_iot = {int(k): v for k, v in need(s, "t_iot", where).items()}
            splits[int(l)] = SplitProfile(shape, need(s, "t_es", where), t_iot)
        return cls(splits, need(d, "t_local", ""), need(d, "t_full_offload_compute", ""),
                   need(d, "input_image_bytes", ""), d.get("name", ""), d.get("synthetic", False))


def load_profile(path) -> LatencyProfile:
    with open(path) as f:
        return LatencyProfile.from_dict(json.load(f))


def demo_profile() -> LatencyProfile:
    """Synthetic profile shipped with the package (not measured on real hardware)."""
    text = resources.files("splitwire").joinpath("data/demo_profile.json").read_text()
    return LatencyProfile.from_dict(json.loads(text))


def demo_results() -> str:
    """Synthetic accuracy table matching :func:`demo_profile`."""
    return resources.files("splitwire").joinpath("data/demo_results.csv").read_text()


# ---- decisions and completion times ----------------------------------------


@dataclass(frozen=True, order=True)
class Decision:
    kind: str  # "local", "full_offload" or "split"
    split_point: int | None = None
    ratio: int | None = None

    def __post_init__(self):
        if self.kind not in ("local", "full_offload", "split"):
            raise ValueError(f"unknown decision kind {self.kind!r}")
        if (self.kind == "split") != (self.split_point is not None and self.ratio is not None):
            raise ValueError("split decisions need split_point and ratio; others take neither")

    @classmethod
    def split(cls, l: int, ratio: int) -> "Decision":
        return cls("split", int(l), int(ratio))

    @classmethod
    def parse(cls, text: str) -> "Decision":
        if text in ("local", "full_offload"):
            return cls(text)
        parts = text.split(":")
        if len(parts) == 3 and parts[0] == "split":
            return cls.split(int(parts[1]), int(parts[2]))
        raise ValueError(f"cannot parse decision {text!r}")

    def __str__(self):
        return self.kind if self.kind != "split" else f"split:{self.split_point}:{self.ratio}"

    def tie_key(self):
        """(ratio, split point) with local as (1, inf) and full offload as (1, 0)."""
        if self.kind == "split":
            return (self.ratio, self.split_point)
        return (1, math.inf if self.kind == "local" else 0)


def _as_decision(key) -> Decision:
    if isinstance(key, Decision):
        return key
    if isinstance(key, str):
        return Decision.parse(key)
    l, ratio = key
    return Decision.split(l, ratio)


def completion_time(profile: LatencyProfile, l: int, ratio, rate):
    """Transmission plus device and server compute for a split at ``l``."""
    if l not in profile.splits:
        raise KeyError(f"profile has no split point {l}")
    size = profile.splits[l].size_bytes
    return comm_time(size, ratio, rate) + profile.t_iot(l, ratio) + profile.t_es(l)


def full_offload_time(profile: LatencyProfile, rate):
    return comm_time(profile.input_image_bytes, 1, rate) + profile.t_full_offload_compute


def decision_time(profile: LatencyProfile, decision: Decision, rate):
    if decision.kind == "local":
        return profile.t_local
    if decision.kind == "full_offload":
        return full_offload_time(profile, rate)
    return completion_time(profile, decision.split_point, decision.ratio, rate)


@dataclass(frozen=True)
class Plan:
    decision: Decision
    completion_s: Real
    accuracy: Real
    feasible: bool = True

    def to_dict(self) -> dict:
        return {"decision": str(self.decision), "split_point": self.decision.split_point,
                "ratio": self.decision.ratio, "completion_s": float(self.completion_s),
                "accuracy": float(self.accuracy), "feasible": self.feasible}


def plan(profile: LatencyProfile, accuracy_table: Mapping, rate, deadline) -> Plan:
    """Most accurate option finishing within ``deadline``.

    ``accuracy_table`` maps decisions (or ``(l, ratio)`` pairs, or the
    strings ``"local"``/``"full_offload"``) to accuracy; only listed options
    are considered. Ties go to lower completion time, then lower ratio, then
    lower split point. If nothing fits, the fastest option is returned with
    ``feasible=False``.
    """
    if not accuracy_table:
        raise ValueError("accuracy table is empty")
    if not deadline > 0:
        raise ValueError("deadline must be > 0")
    options = [(_as_decision(k), acc) for k, acc in accuracy_table.items()]
    timed = [(d, decision_time(profile, d, rate), acc) for d, acc in options]
    feasible = [o for o in timed if o[1] <= deadline]
    if feasible:
        d, t, acc = min(feasible, key=lambda o: (-o[2], o[1], o[0].tie_key()))
        return Plan(d, t, acc, True)
    d, t, acc = min(timed, key=lambda o: (o[1], -o[2], o[0].tie_key()))
    return Plan(d, t, acc, False)


def accuracy_table_from_results(text: str, base_accuracy=None) -> dict:
    """Decision -> AECNN accuracy (fraction) from a results CSV.

    With ``base_accuracy`` the uncompressed local and full-offload options
    are added too.
    """
    from .compression import read_results

    table = {Decision.split(int(r["split_point"]), int(r["ratio"])):
             float(r["accuracy_aecnn"]) / 100 for r in read_results(text)}
    if base_accuracy is not None:
        table[Decision("local")] = base_accuracy
        table[Decision("full_offload")] = base_accuracy
    return table


def crossover_rate(profile: LatencyProfile, l: int, ratio):
    """Rate at which split inference and full offloading take equally long.

    Both completion times have the form ``a + b / r``; returns ``None`` when
    the lines never cross at a positive rate.
    """
    a_split = profile.t_iot(l, ratio) + profile.t_es(l)
    b_split = Fraction(8 * profile.splits[l].size_bytes, ratio)
    a_full = profile.t_full_offload_compute
    b_full = 8 * profile.input_image_bytes
    da, db = a_split - a_full, b_full - b_split
    if da == 0 or db == 0:
        return None
    r = db / da
    return r if r > 0 else None


# ---- traces -----------------------------------------------------------------


class TraceExhausted(ValueError):
    pass


@dataclass(frozen=True)
class RateTrace:
    """Piecewise-constant rate: ``rates[i]`` holds on ``[times[i], times[i+1])``.

    The last rate persists until ``horizon`` (forever when ``None``).
    """

    times: tuple
    rates: tuple
    horizon: Real | None = None

    def __post_init__(self):
        if not self.times or len(self.times) != len(self.rates):
            raise ValueError("trace needs equally many (>= 1) times and rates")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trace times must be strictly increasing")
        if any(not r > 0 for r in self.rates):
            raise ValueError("trace rates must be > 0")
        if self.horizon is not None and not self.horizon > self.times[-1]:
            raise ValueError("trace horizon must follow the last sample time")

    @classmethod
    def constant(cls, rate, start=0) -> "RateTrace":
        return cls((start,), (rate,))

    def transfer_end(self, start, bits):
        """Time at which ``bits`` sent from ``start`` have been delivered."""
        if start < self.times[0]:
            raise TraceExhausted(f"transfer starts at {start} before the trace begins")
        remaining, t = bits, start
        for i, rate in enumerate(self.rates):
            seg_end = self.times[i + 1] if i + 1 < len(self.times) else self.horizon
            if seg_end is not None and seg_end <= t:
                continue
            if seg_end is None or remaining <= rate * (seg_end - t):
                return t + remaining / rate
            remaining -= rate * (seg_end - t)
            t = seg_end
        raise TraceExhausted(f"trace ends before {bits} bits sent from {start} are delivered")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "rate_bps"])
        w.writerows(zip(self.times, self.rates))
        if self.horizon is not None:
            w.writerow([self.horizon, ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RateTrace":
        """Rows of ``time_s,rate_bps``; a final row with an empty rate sets the horizon."""
        rows = list(csv.DictReader(io.StringIO(text)))
        for col in ("time_s", "rate_bps"):
            if rows and col not in rows[0]:
                raise ValueError(f"trace field {col!r} is missing")
        horizon = None
        if rows and not rows[-1]["rate_bps"].strip():
            horizon = float(rows.pop()["time_s"])
        return cls(tuple(float(r["time_s"]) for r in rows),
                   tuple(float(r["rate_bps"]) for r in rows), horizon)


def simulate_trace(profile: LatencyProfile, decisions, trace: RateTrace,
                   task_arrivals: Iterable) -> list:
    """Completion time (finish minus arrival) of every task under ``trace``.

    ``decisions`` is one decision for all tasks or one per task. A split task
    computes on the device, transmits, then computes on the server; full
    offloading transmits the raw input first. There is no queueing.
    """
    arrivals = list(task_arrivals)
    if isinstance(decisions, (Decision, str, tuple)):
        decisions = [decisions] * len(arrivals)
    decisions = [_as_decision(d) for d in decisions]
    if len(decisions) != len(arrivals):
        raise ValueError("need one decision per task")
    out = []
    for d, t0 in zip(decisions, arrivals):
        if d.kind == "local":
            out.append(profile.t_local)
        elif d.kind == "full_offload":
            end = trace.transfer_end(t0, 8 * profile.input_image_bytes)
            out.append(end - t0 + profile.t_full_offload_compute)
        else:
            l, k = d.split_point, d.ratio
            start = t0 + profile.t_iot(l, k)
            end = trace.transfer_end(start, Fraction(8 * profile.splits[l].size_bytes, k))
            out.append(end - t0 + profile.t_es(l))
    return out


SWEEP_COLUMNS = ["rate", "decision", "completion_s", "accuracy"]


def sweep(profile: LatencyProfile, accuracy_table: Mapping, rates: Iterable) -> list[dict]:
    """One row per (rate, decision), for plotting completion time against rate."""
    options = sorted((_as_decision(k), acc) for k, acc in accuracy_table.items())
    return [
        {"rate": r, "decision": str(d), "completion_s": decision_time(profile, d, r),
         "accuracy": acc}
        for r in rates for d, acc in options
    ]


def rows_to_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, Fraction)) else v)
                    for k, v in row.items()})
    return buf.getvalue()
