"""Retrieval, Recall@N, and report emission."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Descriptor

DEFAULT_NS = (1, 5, 10, 15, 20, 25)


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalResult:
    query_id: str
    ranked_ids: list[str]
    ranked_scores: list[float]

    def __post_init__(self):
        if len(self.ranked_ids) != len(self.ranked_scores):
            raise EvaluationError("ranked ids and scores are misaligned")
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise EvaluationError("ranked ids contain duplicates")
        if any(a < b - 1e-12 for a, b in zip(self.ranked_scores, self.ranked_scores[1:])):
            raise EvaluationError("scores must be sorted descending")


@dataclass
class RecallReport:
    recall_at: dict[int, float]
    query_count: int
    excluded_count: int
    tau_pos: float


def _as_array(d) -> np.ndarray:
    return d.values if isinstance(d, Descriptor) else np.asarray(d, dtype=np.float64)


def retrieve(query, database: list[tuple[str, object]], top_n: int,
             query_id: str = "") -> RetrievalResult:
    """Rank the ``top_n`` most cosine-similar database entries.

    Ties break deterministically by id ascending.
    """
    if not database:
        raise EvaluationError("database is empty")
    if top_n > len(database):
        raise EvaluationError(f"top_n {top_n} exceeds database size {len(database)}")
    q = _as_array(query)
    qn = q / max(np.linalg.norm(q), 1e-12)
    ids = [rid for rid, _ in database]
    mat = np.stack([_as_array(d) for _, d in database])
    if mat.shape[1] != q.shape[0]:
        raise EvaluationError(
            f"descriptor dimension mismatch: query {q.shape[0]} vs database {mat.shape[1]}")
    norms = np.linalg.norm(mat, axis=1)
    sims = mat @ qn / np.maximum(norms, 1e-12)
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:top_n]
    return RetrievalResult(query_id=query_id,
                           ranked_ids=[ids[i] for i in order],
                           ranked_scores=[float(sims[i]) for i in order])


def recall_at_n(results: list[RetrievalResult], positives: dict[str, list[str]],
                ns=DEFAULT_NS, tau_pos: float = 0.0) -> RecallReport:
    """Fraction of queries whose top-N retrieval hits a geometric positive.

    Queries with empty positive sets are excluded from the denominator and
    reported in ``excluded_count``.
    """
    ns = sorted(ns)
    counted = 0
    excluded = 0
    hits = {n: 0 for n in ns}
    for res in results:
        pos = set(positives.get(res.query_id, []))
        if not pos:
            excluded += 1
            continue
        counted += 1
        for n in ns:
            if pos & set(res.ranked_ids[:n]):
                hits[n] += 1
    recall = {n: (hits[n] / counted if counted else 0.0) for n in ns}
    return RecallReport(recall_at=recall, query_count=counted,
                        excluded_count=excluded, tau_pos=tau_pos)


def emit_report(reports: list[tuple[str, RecallReport]], out_dir,
                fmt: str = "table", dataset: str = "scene") -> list[Path]:
    """Emit labeled recall reports as a CSV table or Recall-vs-N curve plots.

    CSV columns: label, dataset, N, recall, query_count, excluded_count.
    Plot files are named ``recall_<dataset>.png``.
    """
    if not reports:
        raise EvaluationError("need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "table":
        path = out_dir / f"recall_{dataset}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "dataset", "N", "recall", "query_count",
                             "excluded_count"])
            for label, rep in reports:
                for n in sorted(rep.recall_at):
                    writer.writerow([label, dataset, n, repr(rep.recall_at[n]),
                                     rep.query_count, rep.excluded_count])
        written.append(path)
    elif fmt == "curve_plot":
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, rep in reports:
            ns = sorted(rep.recall_at)
            ax.plot(ns, [rep.recall_at[n] for n in ns], marker="o", label=label)
        ax.set_xlabel("N")
        ax.set_ylabel("Recall@N")
        ax.set_ylim(0, 1.05)
        ax.set_title(dataset)
        ax.legend()
        path = out_dir / f"recall_{dataset}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    else:
        raise EvaluationError(f"unknown report format {fmt!r}")
    return written


def parse_report_csv(path) -> dict[str, dict[int, float]]:
    """Read back an emitted CSV into {label: {N: recall}}."""
    out: dict[str, dict[int, float]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(row["label"], {})[int(row["N"])] = float(row["recall"])
    return out
