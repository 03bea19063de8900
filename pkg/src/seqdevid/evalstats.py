"""Statistical comparison of repeated accuracy runs.

The hypothesis tests here are written out longhand (midranks, continued
fraction for the incomplete beta) because the comparison pipeline treats
their numeric behaviour as part of the contract: exact enumeration for small
Mann-Whitney samples, a tie-corrected normal tail otherwise, and an F tail
computed through our own regularized incomplete beta.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

__all__ = [
    "StatsError",
    "IncompleteRuns",
    "ConvergenceFailure",
    "AnovaResult",
    "UTestResult",
    "RunMatrix",
    "PairwiseResult",
    "ComparisonReport",
    "regularized_incomplete_beta",
    "anova_oneway",
    "mann_whitney_u",
    "is_significant",
    "compare_architectures",
    "run_experiment",
    "report_to_json",
    "report_from_json",
]

EXACT_LIMIT = 16  # pooled size at or below which the U test enumerates


class StatsError(Exception):
    pass


class IncompleteRuns(StatsError):
    """Statistics refused because the run matrix has missing or ragged cells."""


class ConvergenceFailure(StatsError):
    pass


# ------------------------------------------------ regularized incomplete beta


def _betacf(x, a, b, max_iter=300, eps=3e-16, tiny=1e-300):
    # modified Lentz evaluation of the continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ConvergenceFailure(f"betacf failed to converge for x={x}, a={a}, b={b}")


def regularized_incomplete_beta(x, a, b):
    """I_x(a, b) to better than 1e-12 absolute for positive a, b."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (a * math.log(x) + b * math.log1p(-x)
                + math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b))
    front = math.exp(ln_front)
    # the continued fraction converges fast only on one side of the split point
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(x, a, b) / a
    return 1.0 - front * _betacf(1.0 - x, b, a) / b


# --------------------------------------------------------------------- anova


@dataclass(frozen=True)
class AnovaResult:
    f_stat: float
    df_between: int
    df_within: int
    p_value: float


def anova_oneway(groups):
    """One-way fixed-effects ANOVA over two or more groups of observations.

    Zero within-group variance is degenerate: identical group means give
    (F=0, p=1), separated means give (F=inf, p=0).
    """
    data = [[float(v) for v in g] for g in groups]
    if len(data) < 2:
        raise ValueError("anova needs at least two groups")
    if any(len(g) == 0 for g in data):
        raise ValueError("anova groups must be non-empty")

    n_total = sum(len(g) for g in data)
    grand = sum(sum(g) for g in data) / n_total
    means = [sum(g) / len(g) for g in data]
    ss_between = sum(len(g) * (m - grand) ** 2 for g, m in zip(data, means))
    ss_within = sum(sum((v - m) ** 2 for v in g) for g, m in zip(data, means))
    df_between = len(data) - 1
    df_within = n_total - len(data)

    ms_between = ss_between / df_between
    ms_within = ss_within / df_within if df_within > 0 else 0.0
    if ms_within == 0.0:
        if ms_between == 0.0:
            return AnovaResult(0.0, df_between, df_within, 1.0)
        return AnovaResult(math.inf, df_between, df_within, 0.0)

    f = ms_between / ms_within
    # F survival via the incomplete beta: P(F > f) = I_x(d2/2, d1/2)
    x = df_within / (df_within + df_between * f)
    p = regularized_incomplete_beta(x, df_within / 2.0, df_between / 2.0)
    return AnovaResult(f, df_between, df_within, p)


# -------------------------------------------------------------- mann-whitney


@dataclass(frozen=True)
class UTestResult:
    u_stat: float
    u_a: float
    u_b: float
    n_a: int
    n_b: int
    p_value: float
    method: str


def _midranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0  # 1-based positions i+1 .. j+1 share their mean
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks, n_a, u_obs):
    # Enumerate every assignment of n_a pooled positions to group a. Midranks
    # are multiples of 0.5 so every U in the walk is exact in binary. Callers
    # pass u_obs = min(U_a, U_b), which makes the two tail counts disjoint and
    # their sum exactly P(min(U_a, U_b) <= u_obs): the canonical two-sided
    # tail for the min statistic, symmetric under swapping the groups. With
    # tie-free data it reduces to the classic doubled lower tail.
    n_b = len(ranks) - n_a
    mirror = n_a * n_b - u_obs
    base = n_a * (n_a + 1) / 2.0
    total = 0
    low = 0
    high = 0
    for sel in combinations(range(len(ranks)), n_a):
        u = sum(ranks[i] for i in sel) - base
        total += 1
        if u <= u_obs:
            low += 1
        if u >= mirror:
            high += 1
    return min(1.0, (low + high) / total)


def _normal_two_sided_p(pooled, n_a, n_b, u_obs):
    n_total = n_a + n_b
    tie_sum = sum(t ** 3 - t for t in Counter(pooled).values())
    variance = (n_a * n_b / 12.0) * (
        (n_total + 1) - tie_sum / (n_total * (n_total - 1)))
    if variance <= 0.0:
        return 1.0  # every pooled value identical
    mu = n_a * n_b / 2.0
    distance = max(mu - u_obs - 0.5, 0.0)  # 0.5 continuity correction
    return min(1.0, math.erfc(distance / math.sqrt(2.0 * variance)))


def mann_whitney_u(a, b, method="auto"):
    """Two-sided Mann-Whitney U test with midrank tie handling.

    U is min(U_a, U_b). "auto" enumerates the exact permutation distribution
    when the pooled sample has at most 16 values and falls back to the
    tie-corrected normal approximation with continuity correction otherwise.
    """
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise ValueError("mann_whitney_u needs two non-empty samples")

    pooled = a + b
    ranks = _midranks(pooled)
    u_a = sum(ranks[:n_a]) - n_a * (n_a + 1) / 2.0
    u_b = n_a * n_b - u_a
    u_obs = min(u_a, u_b)

    if method == "auto":
        method = "exact" if n_a + n_b <= EXACT_LIMIT else "normal"
    if method == "exact":
        p = _exact_two_sided_p(ranks, n_a, u_obs)
    elif method == "normal":
        p = _normal_two_sided_p(pooled, n_a, n_b, u_obs)
    else:
        raise ValueError(f"unknown method {method!r}")
    return UTestResult(u_obs, u_a, u_b, n_a, n_b, p, method)


def is_significant(p_value, alpha):
    return p_value < alpha


# ----------------------------------------------------------------- run matrix


@dataclass
class RunMatrix:
    """Per-architecture accuracy samples; None marks a failed training cell."""

    runs: dict[str, list]
    diagnostics: list = field(default_factory=list)

    def architectures(self):
        return list(self.runs)


@dataclass(frozen=True)
class PairwiseResult:
    a: str
    b: str
    u_stat: float
    p_value: float
    method: str
    significant: bool


@dataclass
class ComparisonReport:
    architectures: list
    repeats: int
    runs: dict
    means: dict
    quartiles: dict
    anova: AnovaResult
    pairwise: list
    alpha_anova: float
    alpha_pairwise: float


def _quartiles(values):
    lo, q1, med, q3, hi = np.percentile(values, [0, 25, 50, 75, 100])
    return {"min": float(lo), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(hi)}


def compare_architectures(run_matrix, alpha=0.05):
    """ANOVA plus Bonferroni-corrected pairwise U tests over a full RunMatrix."""
    archs = run_matrix.architectures()
    if len(archs) < 2:
        raise ValueError("need at least two architectures to compare")
    lengths = {len(run_matrix.runs[k]) for k in archs}
    if len(lengths) != 1:
        raise IncompleteRuns(f"ragged run matrix: repeat counts {sorted(lengths)}")
    repeats = lengths.pop()
    for arch in archs:
        missing = [r for r, v in enumerate(run_matrix.runs[arch]) if v is None]
        if missing:
            raise IncompleteRuns(f"{arch} missing repeats {missing}")

    runs = {k: [float(v) for v in run_matrix.runs[k]] for k in archs}
    pairs = list(combinations(archs, 2))
    alpha_pairwise = alpha / len(pairs)

    pairwise = []
    for a, b in pairs:
        res = mann_whitney_u(runs[a], runs[b])
        pairwise.append(PairwiseResult(
            a, b, res.u_stat, res.p_value, res.method,
            is_significant(res.p_value, alpha_pairwise)))

    return ComparisonReport(
        architectures=archs,
        repeats=repeats,
        runs=runs,
        means={k: float(np.mean(runs[k])) for k in archs},
        quartiles={k: _quartiles(runs[k]) for k in archs},
        anova=anova_oneway([runs[k] for k in archs]),
        pairwise=pairwise,
        alpha_anova=alpha,
        alpha_pairwise=alpha_pairwise,
    )


# ------------------------------------------------------------ run experiment


def repeat_seed(master_seed, repeat_index):
    """Stable per-repeat seed; every architecture shares it so runs pair up."""
    seq = np.random.SeedSequence(entropy=(int(master_seed), int(repeat_index)))
    return int(seq.generate_state(1)[0])


def _run_cell(spec, dataset, cfg):
    from . import models  # deferred so the statistics half imports standalone

    model = models.train(spec, dataset, cfg)
    _, test_idx = models.split_dataset(dataset, cfg.train_fraction, cfg.seed)
    return models.evaluate(model, [dataset[i] for i in test_idx]).accuracy


def run_experiment(dataset, arch_specs, cfg, repeats, master_seed, jobs=1):
    """Train every architecture for every repeat and collect test accuracies.

    arch_specs is an ordered list of (label, ModelSpec). Failed cells stay
    None with a diagnostic; compare_architectures then refuses the matrix.
    """
    if repeats < 2:
        raise ValueError("need at least two repeats for any statistics")
    seeds = [repeat_seed(master_seed, r) for r in range(repeats)]
    matrix = RunMatrix(runs={label: [None] * repeats for label, _ in arch_specs})

    cells = [(label, spec, r) for label, spec in arch_specs for r in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_run_cell, spec, dataset, replace(cfg, seed=seeds[r])):
                (label, r)
                for label, spec, r in cells}
            for fut, (label, r) in futures.items():
                try:
                    matrix.runs[label][r] = fut.result()
                except Exception as exc:  # noqa: BLE001 - cell failure is data
                    matrix.diagnostics.append(f"{label} repeat {r}: {exc}")
    else:
        for label, spec, r in cells:
            try:
                matrix.runs[label][r] = _run_cell(spec, dataset, replace(cfg, seed=seeds[r]))
            except Exception as exc:  # noqa: BLE001
                matrix.diagnostics.append(f"{label} repeat {r}: {exc}")
    return matrix


# -------------------------------------------------------------- serialization


REPORT_FORMAT = "seqdevid-report"
REPORT_VERSION = 1


def report_to_json(report):
    """Canonical JSON for a ComparisonReport: sorted keys, two-space indent,
    trailing newline. Rerunning with identical inputs gives identical bytes."""
    payload = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "architectures": report.architectures,
        "repeats": report.repeats,
        "alpha_anova": report.alpha_anova,
        "alpha_pairwise": report.alpha_pairwise,
        "alpha_pairwise_display": f"{report.alpha_pairwise:.4f}",
        "runs": report.runs,
        "means": report.means,
        "quartiles": report.quartiles,
        "anova": {
            "f_stat": report.anova.f_stat,
            "df_between": report.anova.df_between,
            "df_within": report.anova.df_within,
            "p_value": report.anova.p_value,
        },
        "pairwise": [
            {"a": p.a, "b": p.b, "u_stat": p.u_stat, "p_value": p.p_value,
             "method": p.method, "significant": p.significant}
            for p in report.pairwise
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_from_json(text):
    payload = json.loads(text)
    if payload.get("format") != REPORT_FORMAT:
        raise StatsError("not a comparison report")
    if payload.get("version") != REPORT_VERSION:
        raise StatsError(f"unsupported report version {payload.get('version')}")
    anova = AnovaResult(
        f_stat=payload["anova"]["f_stat"],
        df_between=payload["anova"]["df_between"],
        df_within=payload["anova"]["df_within"],
        p_value=payload["anova"]["p_value"],
    )
    pairwise = [
        PairwiseResult(p["a"], p["b"], p["u_stat"], p["p_value"],
                       p["method"], p["significant"])
        for p in payload["pairwise"]
    ]
    return ComparisonReport(
        architectures=payload["architectures"],
        repeats=payload["repeats"],
        runs=payload["runs"],
        means=payload["means"],
        quartiles=payload["quartiles"],
        anova=anova,
        pairwise=pairwise,
        alpha_anova=payload["alpha_anova"],
        alpha_pairwise=payload["alpha_pairwise"],
    )
