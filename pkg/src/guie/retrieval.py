"""Exact cosine kNN and retrieval scoring (AP, mAP, per-vertical mAP, P@k)."""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .datastore import DatasetManifest, FeatureBank
from .numkit import l2_normalize_rows


@dataclass
class Index:
    vectors: np.ndarray
    ids: list[str]
    classes: list[str]
    verticals: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def lookup(self, key: str) -> tuple[str, str]:
        i = self.ids.index(key)
        return self.classes[i], self.verticals[i]


@dataclass
class Ranking:
    query_id: str | None
    ids: list[str]
    scores: list[float]
    positions: list[int] = field(default_factory=list)


def build_index(bank: FeatureBank, manifest: DatasetManifest) -> Index:
    if len(bank) == 0:
        raise ValueError("cannot index an empty bank")
    meta = manifest.lookup()
    missing = [k for k in bank.ids if k not in meta]
    if len(missing) == len(bank):
        raise ValueError("no bank id appears in the manifest")
    if missing:
        raise ValueError(f"{len(missing)} bank ids missing from the manifest, e.g. {missing[0]!r}")
    return Index(
        l2_normalize_rows(bank.vectors),
        list(bank.ids),
        [meta[k][0] for k in bank.ids],
        [meta[k][1] for k in bank.ids],
    )


def knn(index: Index, queries, k: int, exclude_self: bool = False, query_ids=None) -> list[Ranking]:
    """Top-k index rows by cosine similarity for every query row.

    Ties are broken by ascending id (string order). With ``exclude_self`` an
    index row whose id equals the query id is never returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != index.vectors.shape[1]:
        raise ValueError(f"queries must be Q x {index.vectors.shape[1]}, got {q.shape}")
    if query_ids is None:
        if exclude_self:
            raise ValueError("exclude_self needs query_ids")
        query_ids = [None] * len(q)
    elif len(query_ids) != len(q):
        raise ValueError(f"{len(query_ids)} query ids for {len(q)} queries")
    available = len(index) - (1 if exclude_self else 0)
    if k > available:
        warnings.warn(f"k={k} exceeds the {available} available candidates; clipping", stacklevel=2)
        k = available
    pos = {key: i for i, key in enumerate(index.ids)}
    id_rank = np.empty(len(index), dtype=np.int64)
    id_rank[np.argsort(np.array(index.ids, dtype=object), kind="stable")] = np.arange(len(index))
    sims = l2_normalize_rows(q) @ index.vectors.T
    out = []
    for qi, row in enumerate(sims):
        order = np.lexsort((id_rank, -row))
        if exclude_self and query_ids[qi] in pos:
            order = order[order != pos[query_ids[qi]]]
        top = order[:k]
        out.append(Ranking(query_ids[qi], [index.ids[j] for j in top],
                           [float(row[j]) for j in top], [int(j) for j in top]))
    return out


def average_precision(ranking: Ranking, relevant, total_relevant: int) -> float:
    """AP over the retrieved depth, normalised by ``total_relevant``."""
    if total_relevant < 1:
        raise ValueError("average_precision needs at least one relevant item")
    relevant = set(relevant)
    hits = 0
    acc = 0.0
    for rank, key in enumerate(ranking.ids, start=1):
        if key in relevant:
            hits += 1
            acc += hits / rank
    return acc / total_relevant


@dataclass
class EvalReport:
    per_query_ap: dict[str, float]
    mAP: float
    per_vertical_mAP: dict[str, float]
    per_vertical_count: dict[str, int]
    precision_at_k: float
    k: int
    p_at: int
    skipped: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"mAP,{self.mAP!r}",
            f"precision_at_{self.p_at},{self.precision_at_k!r}",
            f"k,{self.k}",
            f"n_queries,{len(self.per_query_ap)}",
            f"n_skipped,{len(self.skipped)}",
        ]
        for v in sorted(self.per_vertical_mAP):
            lines.append(f"vertical,{v},{self.per_vertical_mAP[v]!r},{self.per_vertical_count[v]}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "mAP": self.mAP,
            f"precision_at_{self.p_at}": self.precision_at_k,
            "k": self.k,
            "per_vertical_mAP": self.per_vertical_mAP,
            "per_vertical_count": self.per_vertical_count,
            "per_query_ap": self.per_query_ap,
            "skipped": self.skipped,
        }, sort_keys=True, indent=1)

    def ap_dump(self) -> str:
        return "query_id,ap\n" + "".join(f"{q},{ap!r}\n" for q, ap in self.per_query_ap.items())


def evaluate(index: Index, queries: FeatureBank, query_manifest: DatasetManifest, k: int = 100,
             p_at: int = 5, exclude_self: bool = True) -> EvalReport:
    """Score every query against the index; relevance means same class label.

    Queries with no relevant item left in the index are skipped and listed
    in ``skipped``.
    """
    meta = query_manifest.lookup()
    missing = [q for q in queries.ids if q not in meta]
    if missing:
        raise ValueError(f"query id {missing[0]!r} missing from the query manifest")
    members = defaultdict(set)
    for key, c in zip(index.ids, index.classes):
        members[c].add(key)
    depth = min(k, len(index) - (1 if exclude_self else 0))
    rankings = knn(index, queries.vectors, max(depth, 1), exclude_self, queries.ids)

    per_query, skipped = {}, []
    by_vertical = defaultdict(list)
    p_hits = []
    for r in rankings:
        cls, vert = meta[r.query_id]
        relevant = members.get(cls, set())
        if exclude_self:
            relevant = relevant - {r.query_id}
        if not relevant:
            skipped.append(r.query_id)
            continue
        ap = average_precision(r, relevant, len(relevant))
        per_query[r.query_id] = ap
        by_vertical[vert].append(ap)
        p_hits.append(sum(key in relevant for key in r.ids[:p_at]) / p_at)
    if not per_query:
        raise ValueError("no evaluable queries: every query class is absent from the index")
    return EvalReport(
        per_query_ap=per_query,
        mAP=float(np.mean(list(per_query.values()))),
        per_vertical_mAP={v: float(np.mean(a)) for v, a in sorted(by_vertical.items())},
        per_vertical_count={v: len(a) for v, a in sorted(by_vertical.items())},
        precision_at_k=float(np.mean(p_hits)),
        k=depth,
        p_at=p_at,
        skipped=skipped,
    )


def retrieval_map(vectors, manifest: DatasetManifest, k: int = 100) -> float:
    """mAP of a bank searched against itself, self-matches excluded."""
    bank = FeatureBank(list(manifest.ids), vectors)
    return evaluate(build_index(bank, manifest), bank, manifest, k=k).mAP
