"""Closed-form forward-pass (NFE) counts for each sampling method.

One NFE is one predictor call on one chunk, whatever the chunk size. The
``nfe_*`` functions are the published per-method totals; ``plan_nfe`` is the
engine-exact count for a concrete chunk plan and agrees with them whenever
the plan has the canonical ``ceil((L - k) / s) + 1`` chunks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

METHODS = ("mgm", "fm", "df", "rolling")
DEFAULT_STEPS = {"mgm": 20, "fm": 250, "df": 250, "rolling": 250}


def num_chunks(L: int, k: int, s: int) -> int:
    if L < k:
        raise ValueError(f"video length {L} shorter than chunk {k}")
    if s < 1:
        raise ValueError("stride must be >= 1")
    return math.ceil((L - k) / s) + 1


def nfe_mgm(L: int, k: int, s: int, T: int = 20) -> int:
    return num_chunks(L, k, s) * T


def nfe_fm(L: int, k: int, s: int, T: int = 250) -> int:
    return num_chunks(L, k, s) * T


def nfe_df(L: int, k: int, s: int, T: int = 250) -> int:
    return num_chunks(L, k, s) * (k + T)


def nfe_rolling(L: int, k: int, m: int, T: int = 250) -> int:
    if L < k:
        raise ValueError(f"video length {L} shorter than window {k}")
    if not 0 <= m < k:
        raise ValueError("need 0 <= m < k")
    return T + (L - k) * math.ceil(T / (k - m)) + T


def predicted_nfe(method: str, L: int, k: int, m: int, s: int, T: int | None = None) -> int:
    if method not in DEFAULT_STEPS:
        raise ValueError(f"unknown method {method!r}")
    T = DEFAULT_STEPS[method] if T is None else T
    if method == "mgm":
        return nfe_mgm(L, k, s, T)
    if method == "fm":
        return nfe_fm(L, k, s, T)
    if method == "df":
        return nfe_df(L, k, s, T)
    return nfe_rolling(L, k, m, T)


def mgm_chunk_passes(masked_tokens: int, T: int) -> int:
    """MGM commits at least one token per pass and stops once none are left."""
    return min(T, masked_tokens)


def plan_nfe(method: str, plan, T: int, tokens_per_frame: int, guided: bool = False) -> int:
    """Exact forward passes the engine spends executing ``plan``."""
    if method == "rolling":
        total = nfe_rolling(plan.length, plan.k, plan.steps[0].m, T)
    elif method == "mgm":
        total = sum(mgm_chunk_passes(st.h * tokens_per_frame, T) for st in plan.steps)
    elif method == "fm":
        total = T * len(plan.steps)
    elif method == "df":
        total = (plan.k + T) * len(plan.steps)
    else:
        raise ValueError(f"unknown method {method!r}")
    return 3 * total if guided else total


@dataclass
class NfeReport:
    method: str
    L: int
    k: int
    m: int
    s: int
    T: int
    predicted: int
    measured: int
    seconds: float

    def check(self) -> NfeReport:
        if self.predicted != self.measured:
            raise AssertionError(
                f"{self.method}: measured {self.measured} forward passes, predicted {self.predicted}")
        return self


REPORT_FIELDS = [f.name for f in fields(NfeReport)]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in reports:
        writer.writerow([getattr(r, name) for name in REPORT_FIELDS])
    return buf.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2)


@dataclass(frozen=True)
class PublishedCell:
    table: str
    dataset: str
    method: str
    factor: int
    L: int
    k: int
    m: int
    s: int
    reported: int
    note: str = ""

    def formula(self) -> int:
        return predicted_nfe(self.method, self.L, self.k, self.m, self.s)


FFS = dict(k=16, m=2, s=14)
DMLAB = dict(k=36, m=12, s=24)
FFS_AR = dict(k=16, m=15, s=1)
DMLAB_AR = dict(k=36, m=35, s=1)

_SWAPPED = "reported value belongs to the other 2x row (FM/Rolling transposed)"


def _cells():
    out = []

    def add(table, dataset, method, factor, geom, reported, note=""):
        out.append(PublishedCell(table, dataset, method, factor, factor * geom["k"],
                                 geom["k"], geom["m"], geom["s"], reported, note))

    # main extrapolation table, FFS, full sequence
    add("1", "ffs", "df", 2, FFS, 798)
    add("1", "ffs", "rolling", 2, FFS, 750, _SWAPPED)
    add("1", "ffs", "fm", 2, FFS, 788, _SWAPPED)
    add("1", "ffs", "mgm", 2, FFS, 60)
    add("1", "ffs", "df", 5, FFS, 1596)
    add("1", "ffs", "rolling", 5, FFS, 1652)
    add("1", "ffs", "fm", 5, FFS, 1500)
    add("1", "ffs", "mgm", 5, FFS, 120)
    add("1", "ffs", "df", 10, FFS, 3192)
    add("1", "ffs", "rolling", 10, FFS, 3092)
    add("1", "ffs", "fm", 10, FFS, 3000)
    add("1", "ffs", "mgm", 10, FFS, 240)
    # stride table, MGM
    for factor, full, ar in ((2, 60, 340), (5, 120, 1300), (10, 240, 2900)):
        add("2", "ffs", "mgm", factor, FFS, full)
        add("2", "ffs", "mgm", factor, FFS_AR, ar)
    for factor, full, ar in ((2, 60, 740), (5, 140, 2900)):
        add("2", "dmlab", "mgm", factor, DMLAB, full)
        add("2", "dmlab", "mgm", factor, DMLAB_AR, ar)
    # speed comparison table, both datasets
    for dataset, geom, ar_geom, rows in (
        ("dmlab", DMLAB, DMLAB_AR, {1: (286, 500, 20, None), 2: (858, 896, 60, 740),
                                    5: (2002, 2084, 140, 2900)}),
        ("ffs", FFS, FFS_AR, {1: (266, 500, 20, None), 2: (798, 788, 60, 340),
                              5: (1596, 1652, 120, 1300)}),
    ):
        for factor, (df, rolling, mgm, ar) in rows.items():
            add("S1", dataset, "df", factor, geom, df)
            add("S1", dataset, "rolling", factor, geom, rolling)
            add("S1", dataset, "mgm", factor, geom, mgm)
            if ar is not None:
                add("S1", dataset, "mgm", factor, ar_geom, ar)
    # 10x autoregressive DMLab figure rollout
    add("fig", "dmlab", "mgm", 10, DMLAB_AR, 6500)
    return out


PUBLISHED_CELLS = tuple(_cells())
