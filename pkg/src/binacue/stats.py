"""Results ingestion, regression, baseline-relative SRTs, paired t-tests and BH correction."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .io import atomic_path

log = logging.getLogger(__name__)

SRT_COLUMNS = ("subject_id", "condition", "layout", "repetition", "srt_db")
ITD_COLUMNS = ("subject_id", "freq_hz", "repetition", "itd_threshold_us")
BASELINE = "unprocessed"


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ResultsTable:
    """Long-format results; ``kind`` is "srt" or "itd"."""
    kind: str
    rows: tuple

    def __post_init__(self):
        cols = SRT_COLUMNS if self.kind == "srt" else ITD_COLUMNS
        value = cols[-1]
        seen = set()
        clean = []
        for r in self.rows:
            try:
                row = {c: r[c] for c in cols}
            except KeyError as exc:
                raise StatsError(f"row {r!r} lacks column {exc}") from None
            row["subject_id"] = str(row["subject_id"])
            row["repetition"] = int(row["repetition"])
            row[value] = float(row[value])
            if self.kind == "itd":
                row["freq_hz"] = float(row["freq_hz"])
            if not np.isfinite(row[value]):
                raise StatsError(f"non-finite {value} in row {row}")
            key = tuple(row[c] for c in cols[:-1])
            if key in seen:
                raise StatsError(f"duplicate key {key}")
            seen.add(key)
            clean.append(row)
        object.__setattr__(self, "rows", tuple(clean))

    @classmethod
    def from_csv(cls, path) -> "ResultsTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = set(reader.fieldnames or ())
            if set(SRT_COLUMNS) <= header:
                kind = "srt"
            elif set(ITD_COLUMNS) <= header:
                kind = "itd"
            else:
                raise StatsError(f"{path}: header must contain {SRT_COLUMNS} or {ITD_COLUMNS}")
            try:
                return cls(kind, tuple(reader))
            except ValueError as exc:
                raise StatsError(f"{path}: {exc}") from exc

    @property
    def subjects(self) -> list:
        return sorted({r["subject_id"] for r in self.rows})

    def means(self, keys) -> dict:
        """Average over repetitions, grouped by ``keys``."""
        value = SRT_COLUMNS[-1] if self.kind == "srt" else ITD_COLUMNS[-1]
        groups = defaultdict(list)
        for r in self.rows:
            groups[tuple(r[k] for k in keys)].append(r[value])
        return {k: float(np.mean(v)) for k, v in groups.items()}


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r: float
    r_squared: float
    n: int

    def as_dict(self):
        return asdict(self)


def linear_fit(x, y) -> RegressionFit:
    """Least-squares line with its coefficient of determination.

    R^2 = 1 - SS_res/SS_tot, which for a least-squares line equals the squared
    Pearson correlation; r is computed in the symmetric Pearson form so that
    r(x, y) == r(y, x) exactly, and R^2 is reported as r*r.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("x and y must be 1-D and of equal length")
    if x.size < 2:
        raise StatsError("linear_fit needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy, sxy = dx @ dx, dy @ dy, dx @ dy
    if sxx == 0:
        raise StatsError("x is constant; slope undefined")
    slope = sxy / sxx
    intercept = y.mean() - slope * x.mean()
    if syy == 0:
        log.warning("y is constant; R^2 defined as 0")
        r = 0.0
    else:
        r = float(np.clip(sxy / np.sqrt(sxx * syy), -1.0, 1.0))
    return RegressionFit(float(slope), float(intercept), r, r * r, int(x.size))


def mean_abs_dev(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise StatsError("mean_abs_dev needs at least one value")
    return float(np.mean(np.abs(v - v.mean())))


def baseline_layout(condition, layout) -> str:
    """Colocated results are referenced to the central unprocessed condition."""
    return "central" if condition == "colocated" or layout == "colocated" else layout


def delta_srt(table: ResultsTable) -> list:
    """Repetition-averaged SRT minus the same subject's unprocessed SRT in the same layout."""
    if table.kind != "srt":
        raise StatsError("delta_srt needs an SRT table")
    means = table.means(("subject_id", "condition", "layout"))
    out = []
    for (subj, cond, layout), srt in sorted(means.items()):
        ref_layout = baseline_layout(cond, layout)
        key = (subj, BASELINE, ref_layout)
        if key not in means:
            raise StatsError(f"subject {subj}: no '{BASELINE}' baseline in layout '{ref_layout}'")
        out.append({"subject_id": subj, "condition": cond, "layout": layout,
                    "srt_db": srt, "delta_srt_db": srt - means[key]})
    return out


def paired_t(x, y) -> dict:
    """Two-sided paired t-test on x - y; p from the Student t distribution."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("paired_t needs two 1-D samples of equal length")
    n = x.size
    if n < 2:
        raise StatsError("paired_t needs n >= 2")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0:
        raise StatsError("differences have zero variance; t is undefined")
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    return {"t": float(t), "df": df, "p_two_sided": float(2 * sps.t.sf(abs(t), df)),
            "mean_diff": float(d.mean()), "n": n}


def benjamini_hochberg(pvals, q=0.05):
    """Step-up FDR control.

    Returns
    -------
    rejected : np.ndarray of bool
    adjusted : np.ndarray
        ``min_{j >= i} m * p_(j) / j`` in sorted order, capped at 1, mapped back
        to the input order.
    """
    p = np.asarray(pvals, dtype=np.float64).reshape(-1)
    if p.size == 0:
        return np.zeros(0, bool), np.zeros(0)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise StatsError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    return adjusted <= q, adjusted


def posthoc(table: ResultsTable, q=0.05) -> list:
    """Paired t-tests of each condition against the unprocessed baseline.

    Subject means (over repetitions) are the pairing unit. BH correction is
    applied separately within the central and the lateral family; colocated
    results belong to the central family.
    """
    means = table.means(("subject_id", "condition", "layout"))
    cells = sorted({(c, l) for (_, c, l) in means
                    if (c, l) != (BASELINE, baseline_layout(c, l))})
    results = []
    for cond, layout in cells:
        ref = baseline_layout(cond, layout)
        subjects = [s for s in table.subjects
                    if (s, cond, layout) in means and (s, BASELINE, ref) in means]
        x = [means[(s, cond, layout)] for s in subjects]
        y = [means[(s, BASELINE, ref)] for s in subjects]
        res = paired_t(x, y)
        results.append({"condition": cond, "layout": layout, "family": ref, **res})
    for fam in sorted({r["family"] for r in results}):
        members = [r for r in results if r["family"] == fam]
        rej, adj = benjamini_hochberg([r["p_two_sided"] for r in members], q)
        for r, a, k in zip(members, adj, rej):
            r["p_bh"] = float(a)
            r["significant"] = bool(k)
    return results


def itd_audiogram_fit(itd: ResultsTable, hearing_levels: dict, freq_hz) -> RegressionFit:
    """Fit per-subject hearing level (y) against mean ITD threshold (x) at one frequency."""
    means = itd.means(("subject_id", "freq_hz"))
    subjects = [s for s in itd.subjects if (s, float(freq_hz)) in means and s in hearing_levels]
    if len(subjects) < 2:
        raise StatsError(f"fewer than 2 subjects with data at {freq_hz} Hz")
    return linear_fit([means[(s, float(freq_hz))] for s in subjects],
                      [hearing_levels[s] for s in subjects])


def write_rows_csv(path, rows, columns=None) -> None:
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def plot_delta_srt(rows, path) -> None:
    """Bar chart of mean delta SRT per condition and layout with MAD error bars (SVG)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = defaultdict(list)
    for r in rows:
        if r["condition"] != BASELINE:
            groups[(r["layout"], r["condition"])].append(r["delta_srt_db"])
    keys = sorted(groups)
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(keys)), 3.5))
    ax.bar(range(len(keys)), [np.mean(groups[k]) for k in keys],
           yerr=[mean_abs_dev(groups[k]) for k in keys], capsize=3)
    ax.set_xticks(range(len(keys)), [f"{l}\n{c}" for l, c in keys], fontsize=7)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_ylabel("SRT re unprocessed / dB")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)


def subject_fit_from_csv(path, freq_hz) -> RegressionFit:
    """Hearing level vs ITD threshold fit from a per-subject CSV.

    Columns: subject_id, freq_hz, itd_threshold_us, hearing_level_db. Multiple
    rows per subject and frequency are averaged first.
    """
    itd, hl = defaultdict(list), defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if float(row["freq_hz"]) == float(freq_hz):
                itd[row["subject_id"]].append(float(row["itd_threshold_us"]))
                hl[row["subject_id"]].append(float(row["hearing_level_db"]))
    subjects = sorted(itd)
    if len(subjects) < 2:
        raise StatsError(f"{path}: fewer than 2 subjects at {freq_hz} Hz")
    return linear_fit([np.mean(itd[s]) for s in subjects], [np.mean(hl[s]) for s in subjects])
