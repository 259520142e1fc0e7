"""Descriptor matching and the re-identification evaluation protocol.

Matching is plain Euclidean distance.  Under the cross-camera protocol
("veri") every gallery image sharing the query's camera is removed from
that query's ranking; queries whose relevant set is emptied by the
exclusion are skipped and reported, not scored zero.  Ties in distance are
broken by gallery sample_id ascending, which makes rankings deterministic
and permutation invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROTOCOLS = ("plain", "veri")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    """One manifest row."""

    sample_id: str
    image_path: str
    vehicle_id: str
    camera_id: str
    role: str  # train | query | gallery


@dataclass
class RankingResult:
    """Per-query ordered gallery indices/distances after exclusion."""

    order: list  # query -> int array of gallery row indices, best first
    distances: list  # query -> distances aligned with `order`
    excluded: list  # query -> boolean mask over the gallery (True = removed)
    ap: list = field(default_factory=list)  # filled by evaluate(); None = skipped


@dataclass
class EvalReport:
    map: float
    cmc: np.ndarray  # cmc[r-1] = fraction of used queries with a hit at rank <= r
    n_queries_used: int
    n_skipped: int
    protocol: str

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    @property
    def rank5(self) -> float:
        return float(self.cmc[min(4, len(self.cmc) - 1)])

    def summary(self) -> str:
        return f"map={self.map:.4f} rank1={self.rank1:.4f} rank5={self.rank5:.4f}"


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, computed pair by pair (no norm tricks,
    so tiny distances keep full precision)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if queries.shape[1] != gallery.shape[1]:
        raise ValueError(
            f"descriptor length mismatch: {queries.shape[1]} vs {gallery.shape[1]}"
        )
    out = np.empty((queries.shape[0], gallery.shape[0]))
    for i, q in enumerate(queries):
        out[i] = np.sqrt(((gallery - q) ** 2).sum(axis=1))
    return out


def rank_with_exclusion(dist, query_records, gallery_records, protocol: str) -> RankingResult:
    if protocol not in PROTOCOLS:
        raise EvalError(f"unknown protocol {protocol!r}")
    dist = np.asarray(dist)
    if dist.shape != (len(query_records), len(gallery_records)):
        raise ValueError("distance matrix does not match the record lists")
    g_ids = np.array([g.sample_id for g in gallery_records])
    g_cams = [g.camera_id for g in gallery_records]
    if protocol == "veri":
        missing = [r.sample_id for r in list(query_records) + list(gallery_records) if not r.camera_id]
        if missing:
            raise EvalError(f"protocol 'veri' needs camera ids; missing for {missing}")
    result = RankingResult(order=[], distances=[], excluded=[])
    for qi, q in enumerate(query_records):
        if protocol == "veri":
            mask = np.array([cam == q.camera_id for cam in g_cams])
        else:
            mask = np.zeros(len(gallery_records), dtype=bool)
        keep = np.flatnonzero(~mask)
        row = dist[qi, keep]
        # primary key distance, secondary key sample_id ascending
        order = keep[np.lexsort((g_ids[keep], row))]
        result.order.append(order)
        result.distances.append(dist[qi, order])
        result.excluded.append(mask)
    return result


def average_precision(relevant_flags) -> float:
    """AP of one ranking: mean over relevant hits of (hits so far / rank)."""
    flags = np.asarray(relevant_flags, dtype=bool)
    n_rel = int(flags.sum())
    if n_rel == 0:
        raise EvalError("average_precision needs a non-empty relevant set")
    ranks = np.flatnonzero(flags) + 1
    hits = np.arange(1, n_rel + 1)
    return float((hits / ranks).mean())


def evaluate(query_records, gallery_records, q_desc, g_desc, protocol: str = "plain") -> EvalReport:
    """mAP and CMC over the usable queries.

    CMC(r) is the fraction of used queries whose first same-vehicle hit
    sits at rank <= r; its length equals the gallery size.
    """
    dist = distance_matrix(q_desc, g_desc)
    ranking = rank_with_exclusion(dist, query_records, gallery_records, protocol)
    g_vids = np.array([g.vehicle_id for g in gallery_records])
    aps = []
    first_hits = []
    ranking.ap = []
    for qi, q in enumerate(query_records):
        rel = g_vids[ranking.order[qi]] == q.vehicle_id
        if not rel.any():
            ranking.ap.append(None)
            continue
        ap = average_precision(rel)
        ranking.ap.append(ap)
        aps.append(ap)
        first_hits.append(int(np.flatnonzero(rel)[0]) + 1)
    if not aps:
        raise EvalError("no usable queries (every relevant set is empty)")
    max_rank = len(gallery_records)
    hits = np.asarray(first_hits)
    cmc = np.array([(hits <= r).mean() for r in range(1, max_rank + 1)])
    return EvalReport(
        map=float(np.mean(aps)),
        cmc=cmc,
        n_queries_used=len(aps),
        n_skipped=len(query_records) - len(aps),
        protocol=protocol,
    )


def vehicleid_split(records, split_size: int, rng):
    """Sample `split_size` identities; one random image each becomes gallery,
    the rest become probes.  Returns (gallery_records, probe_records)."""
    by_vid = {}
    for r in records:
        by_vid.setdefault(r.vehicle_id, []).append(r)
    vids = sorted(by_vid)
    if len(vids) < split_size:
        raise EvalError(f"need >= {split_size} identities, manifest has {len(vids)}")
    chosen = rng.choice(len(vids), size=split_size, replace=False)
    gallery, probes = [], []
    for vi in sorted(int(v) for v in chosen):
        group = sorted(by_vid[vids[vi]], key=lambda r: r.sample_id)
        pick = int(rng.integers(len(group)))
        gallery.append(group[pick])
        probes.extend(g for i, g in enumerate(group) if i != pick)
    return gallery, probes
