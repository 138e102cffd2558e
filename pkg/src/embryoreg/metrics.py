"""Overlap and volume metrics, the Wilcoxon signed-rank test and run reports."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from typing import Dict, Sequence

import numpy as np

from .errors import InputError, InsufficientDataError
from .volume import Mask, check_same_dims, load_mask

EXACT_MAX_N = 25
MIN_PAIRS = 5


def dice(a: Mask, b: Mask) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1."""
    check_same_dims(a, b)
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a.data & b.data)) / (na + nb)


def ev_from_mask(m: Mask, voxel_size_mm=None) -> float:
    """Embryonic volume in mm^3."""
    vs = m.voxel_size if voxel_size_mm is None else float(voxel_size_mm)
    return m.count() * vs ** 3


def ev_error(ev: float, ev_gt: float) -> float:
    if not ev_gt > 0:
        raise InputError(f"ground-truth volume must be positive, got {ev_gt}")
    return abs(ev - ev_gt) / ev_gt


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_lower_tail(doubled: Sequence[int], t2: int) -> float:
    """P(W+ <= t) under the null, given doubled (integer) ranks and ``t2 = 2t``."""
    total = sum(doubled)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    hits = sum(counts[: t2 + 1])
    return hits / 2 ** len(doubled)


def wilcoxon_two_sided(x, y):
    """Two-sided signed-rank test on paired samples; returns ``(statistic, p)``.

    Zero differences are dropped and tied magnitudes get average ranks.  The
    statistic is ``min(W+, W-)``.  The p-value is exact for up to 25 pairs
    and uses the tie-corrected normal approximation with continuity
    correction beyond that.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("paired samples must be 1-D and of equal length")
    diff = x - y
    diff = diff[diff != 0]
    n = len(diff)
    if n < MIN_PAIRS:
        raise InsufficientDataError(f"{n} nonzero differences; at least {MIN_PAIRS} needed")
    ranks = _average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        p = 2.0 * _exact_lower_tail(doubled, int(round(2 * stat)))
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(diff), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
        z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
        p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return stat, min(1.0, p)


# --------------------------------------------------------------------------
# Reports


def _case_dirs(root):
    if not os.path.isdir(root):
        raise InputError(f"{root!r} is not a directory")
    return {name: os.path.join(root, name) for name in sorted(os.listdir(root))
            if os.path.isfile(os.path.join(root, name, "seg.mmask"))}


def evaluate_cases(preds: Dict[str, Dict[str, Mask]], truths: Dict[str, Mask]) -> dict:
    """Per-case metrics, summaries and pairwise Wilcoxon p-values between runs."""
    runs = {}
    for run, cases in preds.items():
        missing = sorted(set(truths) - set(cases))
        if missing:
            raise InputError(f"run {run!r} lacks cases {missing}")
        rows = []
        for name in sorted(truths):
            gt, pr = truths[name], cases[name]
            ev, ev_gt = ev_from_mask(pr, gt.voxel_size), ev_from_mask(gt)
            rows.append({"case": name, "dice": dice(pr, gt), "ev_mm3": ev, "ev_gt_mm3": ev_gt,
                         "ev_error": ev_error(ev, ev_gt)})
        d = [r["dice"] for r in rows]
        e = [r["ev_error"] for r in rows]
        runs[run] = {"cases": rows, "summary": {
            "median_dice": float(np.median(d)), "mean_dice": float(np.mean(d)),
            "median_ev_error": float(np.median(e)), "mean_ev_error": float(np.mean(e)),
            "n": len(rows)}}
    tests = {}
    for metric in ("dice", "ev_error"):
        table = {}
        for a, b in itertools.combinations(sorted(runs), 2):
            xa = [r[metric] for r in runs[a]["cases"]]
            xb = [r[metric] for r in runs[b]["cases"]]
            try:
                stat, p = wilcoxon_two_sided(xa, xb)
                table[f"{a}|{b}"] = {"statistic": stat, "p": p}
            except InsufficientDataError as exc:
                table[f"{a}|{b}"] = {"statistic": None, "p": None, "reason": exc.detail}
        tests[metric] = table
    return {"runs": runs, "wilcoxon": tests}


def evaluate(preds: Dict[str, str], gt_dir: str, out_path: str, plots: bool = True) -> dict:
    """Compare result directories against ground truth and write the report.

    Besides ``out_path`` (JSON), writes ``<stem>_cases.csv`` and, when
    ``plots`` is set, ``<stem>_dice.png`` and ``<stem>_ev_error.png``.
    """
    gt_cases = _case_dirs(gt_dir)
    if not gt_cases:
        raise InputError(f"{gt_dir!r} holds no case with seg.mmask")
    truths = {k: load_mask(os.path.join(p, "seg.mmask")) for k, p in gt_cases.items()}
    loaded = {}
    for run, root in preds.items():
        found = _case_dirs(root)
        loaded[run] = {k: load_mask(os.path.join(p, "seg.mmask")) for k, p in found.items()
                       if k in truths}
    report = evaluate_cases(loaded, truths)
    report["gt"] = os.path.abspath(gt_dir)
    report["pred"] = {k: os.path.abspath(v) for k, v in preds.items()}
    stem = os.path.splitext(out_path)[0]
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(stem + "_cases.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "case", "dice", "ev_mm3", "ev_gt_mm3", "ev_error"])
        for run in sorted(report["runs"]):
            for r in report["runs"][run]["cases"]:
                w.writerow([run, r["case"], repr(r["dice"]), repr(r["ev_mm3"]),
                            repr(r["ev_gt_mm3"]), repr(r["ev_error"])])
    if plots:
        from .plotting import metric_boxplot
        for metric in ("dice", "ev_error"):
            values = {run: [r[metric] for r in report["runs"][run]["cases"]]
                      for run in sorted(report["runs"])}
            metric_boxplot(values, metric, f"{stem}_{metric}.png")
    return report
