"""Retrieval evaluation: embeddings, distances, CMC and mAP (single query)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import no_grad

logger = logging.getLogger(__name__)

RANKS = (1, 3, 5, 10)


@dataclass
class EvalReport:
    cmc: dict
    mAP: float
    num_query: int
    num_gallery: int
    num_skipped: int = 0
    keep_ratio: float | None = None
    throughput: float | None = None

    HEADER = "rank1,rank3,rank5,rank10,mAP,num_query,num_gallery,num_skipped,keep_ratio,throughput"

    def csv_row(self) -> str:
        vals = [self.cmc[k] for k in RANKS] + [self.mAP]
        extra = [self.num_query, self.num_gallery, self.num_skipped,
                 "" if self.keep_ratio is None else self.keep_ratio,
                 "" if self.throughput is None else f"{self.throughput:.2f}"]
        return ",".join([f"{v:.6f}" for v in vals] + [str(e) for e in extra])

    def table(self) -> str:
        lines = [f"{'metric':<10}{'value':>10}"]
        lines += [f"{'Rank-' + str(k):<10}{self.cmc[k]:>10.4f}" for k in RANKS]
        lines.append(f"{'mAP':<10}{self.mAP:>10.4f}")
        lines.append(f"queries {self.num_query} (skipped {self.num_skipped}), gallery {self.num_gallery}")
        return "\n".join(lines)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def extract_embeddings(model, images, batch_size: int = 64, mode: str = "infer") -> np.ndarray:
    """Post-BN class features, unit length. The classifier is never touched."""
    from .distill import batch_norm

    feats = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            f = model.forward_features(chunk, mode=mode, reweight=False).feature
            if model.cfg.bn_neck and "head.bn.running_mean" in model.params:
                f = batch_norm(f, model.params, training=False)
            feats.append(np.asarray(f.data, dtype=np.float64))
    return l2_normalize(np.concatenate(feats))


def distance_matrix(queries, gallery) -> np.ndarray:
    """Squared Euclidean distances ``Q x G``."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature sizes differ: {q.shape[1]} vs {g.shape[1]}")
    d = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.maximum(d, 0.0)


def average_precision(hits: np.ndarray) -> float:
    """AP of a ranked boolean hit list: mean precision at each hit."""
    hits = np.asarray(hits, dtype=bool)
    positions = np.flatnonzero(hits) + 1
    if positions.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, positions.size + 1) / positions))


def cmc_map(dist, q_ids, g_ids, q_cams, g_cams, ranks=RANKS) -> EvalReport:
    """Cross-camera CMC and mAP; same-identity same-camera gallery entries are ignored.

    Ties in distance are broken by gallery identity then camera so the result
    does not depend on the order the gallery was supplied in.
    """
    dist = np.asarray(dist)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    max_rank = max(ranks)
    hits_at = np.zeros(max_rank)
    aps = []
    skipped = 0
    for i in range(len(q_ids)):
        order = np.lexsort((g_cams, g_ids, dist[i]))
        valid = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        matches = g_ids[order][valid] == q_ids[i]
        if not matches.any():
            skipped += 1
            continue
        first = int(np.argmax(matches))
        if first < max_rank:
            hits_at[first:] += 1
        aps.append(average_precision(matches))
    n = len(aps)
    if skipped:
        logger.info("%d queries have no valid gallery match and were skipped", skipped)
    cmc = {k: (hits_at[k - 1] / n if n else 0.0) for k in ranks}
    return EvalReport(cmc, float(np.mean(aps)) if n else 0.0, len(q_ids), len(g_ids), skipped)


def occlude_queries(images, patches, seed: int = 0) -> np.ndarray:
    """Paste a held-out occluder onto every query image (query ``i`` uses patch ``i mod n``)."""
    from .augment import apply_noda, sample_rng

    if not patches:
        raise ValueError("no occluder patches to build occluded queries from")
    return np.stack([apply_noda(img, patches[i % len(patches)], sample_rng(seed, 0, i, 9))
                     for i, img in enumerate(images)])


def evaluate(model, dataset, query_images=None, batch_size: int = 64) -> EvalReport:
    """Embed the query/gallery split of ``dataset`` and score it."""
    qx, qid, qcam = dataset.subset("query")
    gx, gid, gcam = dataset.subset("gallery")
    if query_images is not None:
        qx = query_images
    qf = extract_embeddings(model, qx, batch_size)
    gf = extract_embeddings(model, gx, batch_size)
    report = cmc_map(distance_matrix(qf, gf), qid, gid, qcam, gcam)
    if model.cfg.sparsify is not None:
        report.keep_ratio = model.cfg.sparsify.base_ratio
    return report
