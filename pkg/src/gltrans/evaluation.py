"""Query/gallery retrieval metrics: distance matrix, CMC and mAP."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = fraction of valid queries with a hit in the top k
    ap: np.ndarray  # per query; NaN for queries without a valid match
    first_hit: np.ndarray  # 1-based rank of the first valid match; 0 if none
    rankings: list[np.ndarray]  # gallery indices per query, after filtering
    num_skipped: int

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict[str, float]:
        return {
            "mAP": self.mAP,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
        }


def l2_normalize(x: np.ndarray, what: str = "feature") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if len(zero):
        raise ValueError(f"zero-norm {what} at index {int(zero[0])}")
    return x / norms


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distance between L2-normalized rows, shape ``(Q, G)``."""
    queries = np.atleast_2d(queries)
    gallery = np.atleast_2d(gallery)
    if queries.shape[1] != gallery.shape[1]:
        raise ValueError(f"feature dims differ: query {queries.shape[1]}, gallery {gallery.shape[1]}")
    q = l2_normalize(queries, "query feature")
    g = l2_normalize(gallery, "gallery feature")
    sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.clip(sq, 0.0, None))


def _one_query(dist_row, q_id, q_cam, g_ids, g_cams, cam_filter):
    order = np.argsort(dist_row, kind="stable")
    if cam_filter:
        keep = ~((g_ids[order] == q_id) & (g_cams[order] == q_cam))
        order = order[keep]
    hits = g_ids[order] == q_id
    if not hits.any():
        return order, float("nan"), 0
    positions = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(positions) + 1) / positions
    return order, float(precision.mean()), int(positions[0])


def evaluate(
    dist: np.ndarray,
    query_ids,
    gallery_ids,
    query_cams=None,
    gallery_cams=None,
    cam_filter: bool = True,
    threads: int | None = None,
) -> EvalReport:
    """Rank the gallery for each query and score the rankings.

    Gallery entries sharing both identity and camera with the query are
    dropped when ``cam_filter`` is set. Ties keep ascending gallery index.
    Queries without any valid match are skipped and counted.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if np.isnan(dist).any():
        raise ValueError("distance matrix contains NaN")
    nq, ng = dist.shape
    q_ids, g_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    q_cams = np.zeros(nq, int) if query_cams is None else np.asarray(query_cams)
    g_cams = np.zeros(ng, int) if gallery_cams is None else np.asarray(gallery_cams)
    if threads is None:
        threads = int(os.environ.get("GLTRANS_THREADS", "1"))

    def run(i):
        return _one_query(dist[i], q_ids[i], q_cams[i], g_ids, g_cams, cam_filter)

    if threads > 1 and nq > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(nq)))
    else:
        results = [run(i) for i in range(nq)]

    rankings = [r[0] for r in results]
    ap = np.array([r[1] for r in results], dtype=np.float64)
    first = np.array([r[2] for r in results], dtype=np.int64)
    valid = first > 0
    cmc = np.zeros(ng, dtype=np.float64)
    if valid.any():
        for f in first[valid]:
            cmc[f - 1 :] += 1
        cmc /= valid.sum()
        m_ap = float(ap[valid].mean())
    else:
        m_ap = 0.0
    return EvalReport(
        mAP=m_ap, cmc=cmc, ap=ap, first_hit=first, rankings=rankings,
        num_skipped=int((~valid).sum()),
    )


def write_report(report: EvalReport, path: str | os.PathLike, comments: list[str] = ()) -> None:
    """Per-query CSV (query_id, AP, first_hit_rank) followed by a summary file."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["query_id", "AP", "first_hit_rank"])
        for i, (ap, fh_rank) in enumerate(zip(report.ap, report.first_hit)):
            w.writerow([i, "" if np.isnan(ap) else f"{ap:.6f}", int(fh_rank)])
    summary_path = os.path.splitext(str(path))[0] + "_summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        s = report.summary()
        w.writerow(["mAP", "CMC@1", "CMC@5", "CMC@10", "skipped_queries"])
        w.writerow([f"{s['mAP']:.6f}", f"{s['rank1']:.6f}", f"{s['rank5']:.6f}", f"{s['rank10']:.6f}", report.num_skipped])
