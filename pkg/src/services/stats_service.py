"""
Statistics Service for AMOC Lab
Handles paired t-tests between score vectors and report files
"""

import json
import math
from dataclasses import dataclass

import numpy as np
import structlog
from scipy import stats

from src.errors import ArgumentError, FormatError
from src.models.report import RobustnessReport

log = structlog.get_logger()


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False

    def to_dict(self):
        return {'t': self.t, 'p': self.p, 'n': self.n, 'degenerate': self.degenerate}


def paired_ttest(scores_a, scores_b):
    """Two-sided paired t-test on index-aligned scores (n - 1 degrees of freedom)"""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"paired scores need equal 1-d shapes, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ArgumentError("paired t-test needs at least two pairs")
    diff = a - b
    if np.all(diff == 0):
        log.info("ttest_degenerate", reason="all differences are zero", n=int(a.size))
        return TTestResult(t=0.0, p=1.0, n=int(a.size), degenerate=True)
    if np.all(diff == diff[0]):
        log.info("ttest_degenerate", reason="constant nonzero differences", n=int(a.size))
        return TTestResult(t=math.copysign(math.inf, diff[0]), p=0.0, n=int(a.size), degenerate=True)
    result = stats.ttest_rel(a, b)
    return TTestResult(t=float(result.statistic), p=float(result.pvalue), n=int(a.size))


def load_scores(path, metric=None):
    """Score vector from a report, a list of reports or a plain list of numbers"""
    try:
        with open(path) as handle:
            data = json.load(handle)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}")
    if isinstance(data, dict):
        return RobustnessReport.from_dict(data).scores()
    if isinstance(data, list) and all(isinstance(v, (int, float)) for v in data):
        return [float(v) for v in data]
    if isinstance(data, list):
        reports = [RobustnessReport.from_dict(item) for item in data]
        return [_metric(report, metric) for report in reports]
    raise FormatError(f"{path}: expected a report, a list of reports or a list of numbers")


def _metric(report, metric):
    if metric in (None, 'clean'):
        return report.clean
    if metric not in report.attacks:
        raise ArgumentError(f"report has no attack column {metric!r}")
    return report.attacks[metric]
