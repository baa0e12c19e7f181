"""Cross-run aggregation: seed means, standard errors and differences to a baseline."""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .evaluation import SCHEMA_VERSION, MetricsReport


def standard_error(values) -> float:
    """Sample standard deviation over sqrt(n); 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(v.size))


def load_reports(paths) -> list[MetricsReport]:
    """Load reports, refusing a mix of schema versions (or an unknown one)."""
    raw = [(Path(p), json.loads(Path(p).read_text())) for p in paths]
    versions = sorted({str(d.get("schema_version")) for _, d in raw})
    if len(versions) > 1:
        raise ValueError(f"reports mix schema versions {', '.join(versions)}")
    if raw and versions[0] != str(SCHEMA_VERSION):
        raise ValueError(f"report schema version {versions[0]} is not supported (expected {SCHEMA_VERSION})")
    return [MetricsReport.from_dict(d) for _, d in raw]


def _scores(report: MetricsReport, mode: str) -> dict[tuple[float, str], float]:
    out = {}
    for p in report.probes:
        if p.mode != mode:
            continue
        for d, v in p.per_domain.items():
            out[(p.budget_fraction, str(d))] = v
        out[(p.budget_fraction, "overall")] = p.overall
    return out


def summary_table(reports, mode: str = "linear") -> list[dict]:
    """Seed-mean score and standard error per (objective, strategy, budget, domain)."""
    acc = defaultdict(list)
    for r in reports:
        for (b, d), v in _scores(r, mode).items():
            acc[(r.objective, r.strategy, b, d)].append(v)
    return [
        {"objective": o, "strategy": s, "budget_fraction": b, "domain": d,
         "mean": float(np.mean(v)), "se": standard_error(v), "n": len(v)}
        for (o, s, b, d), v in sorted(acc.items())
    ]


def difference_report(reports_or_paths, baseline: str = "standard", mode: str = "linear") -> dict:
    """Per-seed paired differences (strategy minus baseline), then mean and SE over seeds."""
    reports = [r if isinstance(r, MetricsReport) else None for r in reports_or_paths]
    if any(r is None for r in reports):
        reports = load_reports(reports_or_paths)
    base = {(r.objective, r.seed): r for r in reports if r.strategy == baseline}
    acc = defaultdict(list)
    sep = defaultdict(list)
    for r in reports:
        ref = base.get((r.objective, r.seed))
        if ref is None:
            continue
        mine, theirs = _scores(r, mode), _scores(ref, mode)
        for key in sorted(set(mine) & set(theirs)):
            acc[(r.objective, r.strategy) + key].append(mine[key] - theirs[key])
        if r.separability is not None and ref.separability is not None:
            sep[(r.objective, r.strategy)].append(r.separability - ref.separability)
    rows = [
        {"objective": o, "strategy": s, "budget_fraction": b, "domain": d,
         "mean_diff": float(np.mean(v)), "se": standard_error(v), "n_seeds": len(v)}
        for (o, s, b, d), v in sorted(acc.items())
    ]
    sep_rows = [
        {"objective": o, "strategy": s, "mean_diff": float(np.mean(v)), "se": standard_error(v), "n_seeds": len(v)}
        for (o, s), v in sorted(sep.items())
    ]
    return {"schema_version": SCHEMA_VERSION, "baseline": baseline, "mode": mode,
            "sign": "strategy minus baseline", "rows": rows, "separability": sep_rows}
