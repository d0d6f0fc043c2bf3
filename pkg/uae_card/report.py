"""
Batch estimation with progressive sampling and q-error reports (mean, median,
95th percentile and max per suite).
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .data import EncodedTable
from .errors import ValidationError
from .metrics import floored_qerror, nearest_rank
from .model import ResMadeModel
from .sampler import progressive_sample_estimate
from .workload import LabeledQuery, Query, to_region

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 200

RESULT_HEADER = ("index", "true_card", "est_card", "est_selectivity", "qerror", "latency_ms")
REPORT_HEADER = ("suite", "count", "mean", "median", "p95", "max")


@dataclass(frozen=True)
class QueryResult:
    index: int
    est_selectivity: float
    est_card: float
    latency_ms: float
    true_card: Optional[int] = None
    qerror: Optional[float] = None


@dataclass(frozen=True)
class ErrorReport:
    count: int
    mean: float
    median: float
    p95: float
    max: float
    latency_mean_ms: float = 0.0
    latency_median_ms: float = 0.0
    latency_max_ms: float = 0.0

    @classmethod
    def from_qerrors(cls, qerrors: Sequence[float], latencies_ms: Sequence[float] = ()) -> ErrorReport:
        if not qerrors:
            raise ValidationError("no queries to report on")
        lat = list(latencies_ms) or [0.0]
        return cls(
            count=len(qerrors),
            mean=float(np.mean(qerrors)),
            median=nearest_rank(qerrors, 50.0),
            p95=nearest_rank(qerrors, 95.0),
            max=max(qerrors),
            latency_mean_ms=float(np.mean(lat)),
            latency_median_ms=nearest_rank(lat, 50.0),
            latency_max_ms=max(lat),
        )

    @classmethod
    def from_results(cls, results: Sequence[QueryResult]) -> ErrorReport:
        qerrors = [r.qerror for r in results if r.qerror is not None]
        return cls.from_qerrors(qerrors, [r.latency_ms for r in results])

    def row(self, suite: str) -> list[str]:
        return [suite, str(self.count), repr(self.mean), repr(self.median), repr(self.p95), repr(self.max)]


def _threads(threads: Optional[int]) -> int:
    return max(1, threads or 1)


def estimate_queries(model: ResMadeModel, table: EncodedTable, queries: Sequence[Query],
                     samples: int = DEFAULT_SAMPLES, seed: int = 0,
                     threads: Optional[int] = None,
                     cards: Optional[Sequence[int]] = None) -> list[QueryResult]:
    """
    Progressive-sampling estimate of every query. Query i draws from its own
    generator seeded with (seed, i), so results do not depend on `threads`.
    """
    if cards is not None and len(cards) != len(queries):
        raise ValidationError("one cardinality per query is required")
    regions = [to_region(q, table) for q in queries]
    n = table.row_count

    def run(i: int) -> QueryResult:
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        sel = progressive_sample_estimate(model, regions[i], samples, rng)
        elapsed = (time.perf_counter() - start) * 1000.0
        true_card = None if cards is None else int(cards[i])
        q = None if true_card is None else floored_qerror(true_card, sel, n)
        return QueryResult(i, sel, sel * n, elapsed, true_card, q)

    workers = _threads(threads)
    if workers == 1 or len(queries) < 2:
        results = [run(i) for i in range(len(queries))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(queries))))
    logger.debug("estimated %d queries with %d samples on %d threads", len(queries), samples, workers)
    return results


def evaluate(model: ResMadeModel, table: EncodedTable, labeled: Sequence[LabeledQuery],
             samples: int = DEFAULT_SAMPLES, seed: int = 0,
             threads: Optional[int] = None) -> tuple[list[QueryResult], ErrorReport]:
    results = estimate_queries(
        model, table, [q.query for q in labeled], samples, seed, threads,
        cards=[q.cardinality for q in labeled],
    )
    return results, ErrorReport.from_results(results)


# ----------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------

def write_results_csv(path: Union[str, Path], results: Sequence[QueryResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(RESULT_HEADER)
        for r in results:
            writer.writerow([
                r.index,
                "" if r.true_card is None else r.true_card,
                repr(r.est_card),
                repr(r.est_selectivity),
                "" if r.qerror is None else repr(r.qerror),
                f"{r.latency_ms:.3f}",
            ])


def write_report_csv(path: Union[str, Path], reports: Mapping[str, ErrorReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_HEADER)
        for suite, report in reports.items():
            writer.writerow(report.row(suite))


def format_reports(reports: Mapping[str, ErrorReport]) -> str:
    head = f"{'suite':<16}{'count':>8}{'mean':>10}{'median':>10}{'95th':>10}{'MAX':>10}{'ms/query':>11}"
    lines = [head, "-" * len(head)]
    for suite, r in reports.items():
        lines.append(
            f"{suite:<16}{r.count:>8}{r.mean:>10.3f}{r.median:>10.3f}{r.p95:>10.3f}"
            f"{r.max:>10.3f}{r.latency_mean_ms:>11.2f}"
        )
    return "\n".join(lines)
