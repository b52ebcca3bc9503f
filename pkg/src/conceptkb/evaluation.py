"""Filtered link-prediction ranking: mean rank and hits@10.

For every query triple, one side is hidden and every entity in the
knowledge base is scored as its replacement.  The filtered rank discounts
candidates that would form another known-true triple (from any split);
ties on energy count against the true entity only when the tying
candidate has the lower id, which makes ranks independent of iteration
order.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FrequencyBins, TripleStore, Vocab
from .model import SIDE_HEAD, SIDE_TAIL, Hyperparams, ModelParams, composed_matrix

HITS_CUTOFF = 10


@dataclass
class RelationMetrics:
    mean_rank: float
    hits_at_10: float
    count: int


@dataclass
class EvalReport:
    """Aggregated ranking metrics, globally and per relation/bin."""

    mean_rank: float
    hits_at_10: float
    per_relation: dict[int, RelationMetrics]
    per_bin: dict[int, float] | None
    direction: str
    n_queries: int
    filtered: bool = True

    def to_dict(self) -> dict:
        return {
            "mean_rank": self.mean_rank,
            "hits_at_10": self.hits_at_10,
            "direction": self.direction,
            "n_queries": self.n_queries,
            "filtered": self.filtered,
            "per_relation": {
                str(r): {"mean_rank": m.mean_rank, "hits_at_10": m.hits_at_10, "count": m.count}
                for r, m in sorted(self.per_relation.items())
            },
            "per_bin": None if self.per_bin is None else {str(b): v for b, v in sorted(self.per_bin.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            mean_rank=d["mean_rank"],
            hits_at_10=d["hits_at_10"],
            per_relation={
                int(r): RelationMetrics(v["mean_rank"], v["hits_at_10"], v["count"])
                for r, v in d["per_relation"].items()
            },
            per_bin=None if d.get("per_bin") is None else {int(b): v for b, v in d["per_bin"].items()},
            direction=d["direction"],
            n_queries=d["n_queries"],
            filtered=d.get("filtered", True),
        )


class _Scorer:
    """Candidate energies with per-relation projected-entity caching."""

    def __init__(self, params: ModelParams, hp: Hyperparams):
        self.params = params
        self.hp = hp
        self._head_proj: dict[int, np.ndarray] = {}
        self._tail_proj: dict[int, np.ndarray] = {}

    def _projected(self, r: int, side: str) -> np.ndarray:
        cache = self._head_proj if side == SIDE_HEAD else self._tail_proj
        got = cache.get(r)
        if got is None:
            if self.hp.model == "transe":
                got = self.params.entity_emb
            else:
                w = composed_matrix(self.params, self.hp, r, side)
                got = self.params.entity_emb @ w.T
            cache[r] = got
        return got

    def candidate_energies(self, r: int, side: str, other: int) -> np.ndarray:
        """Energies of all |E| substitutions on ``side`` with the other
        entity fixed."""
        rv = self.params.relation_emb[r]
        if side == SIDE_HEAD:
            fixed = rv - self._projected(r, SIDE_TAIL)[other]
            buf = np.add(self._projected(r, SIDE_HEAD), fixed)
        else:
            fixed = self._projected(r, SIDE_HEAD)[other] + rv
            buf = np.subtract(fixed, self._projected(r, SIDE_TAIL))
        # single temporary, mutated in place: this path runs once per query
        # over all |E| candidates
        if self.hp.ell == 1:
            np.abs(buf, out=buf)
            return buf.sum(axis=1)
        buf *= buf
        out = buf.sum(axis=1)
        np.sqrt(out, out=out)
        return out


def _filter_sets(store: TripleStore):
    """known (h, r) -> tails and (r, t) -> heads over all three splits."""
    known_tails: dict[tuple[int, int], list[int]] = {}
    known_heads: dict[tuple[int, int], list[int]] = {}
    for h, r, t in store.all_known:
        known_tails.setdefault((h, r), []).append(t)
        known_heads.setdefault((r, t), []).append(h)
    return known_heads, known_tails


def _rank_from_energies(
    energies: np.ndarray, true_id: int, exclude: np.ndarray | None
) -> int:
    e_true = energies[true_id]
    competitors = energies < e_true
    ties = energies == e_true
    ties[true_id:] = False
    competitors |= ties
    if exclude is not None and len(exclude):
        competitors[exclude] = False
    return 1 + int(competitors.sum())


def rank_query(
    triple,
    side: str,
    params: ModelParams,
    store: TripleStore,
    hp: Hyperparams,
    filtered: bool = True,
    _scorer: _Scorer | None = None,
    _filters=None,
) -> int:
    """Filtered (or raw) rank of the true entity for one query."""
    h, r, t = (int(x) for x in triple)
    scorer = _scorer or _Scorer(params, hp)
    true_id, other = (h, t) if side == SIDE_HEAD else (t, h)
    energies = scorer.candidate_energies(r, side, other)
    exclude = None
    if filtered:
        known_heads, known_tails = _filters if _filters is not None else _filter_sets(store)
        others = known_heads.get((r, t), ()) if side == SIDE_HEAD else known_tails.get((h, r), ())
        exclude = np.array([e for e in others if e != true_id], dtype=np.int64)
    return _rank_from_energies(energies, true_id, exclude)


def evaluate(
    split: np.ndarray,
    params: ModelParams,
    hp: Hyperparams,
    store: TripleStore,
    direction: str = "both",
    filtered: bool = True,
    bins: FrequencyBins | None = None,
    workers: int = 1,
) -> EvalReport:
    """Rank every triple of ``split`` on the requested side(s) and aggregate.

    Mean rank and hits@10 weight every query equally; the optional per-bin
    table averages the per-relation hits@10 inside each frequency bin, so
    every relation counts once regardless of its test frequency.
    """
    split = np.asarray(split, dtype=np.int64).reshape(-1, 3)
    sides = {
        "both": (SIDE_HEAD, SIDE_TAIL),
        SIDE_HEAD: (SIDE_HEAD,),
        SIDE_TAIL: (SIDE_TAIL,),
    }[direction]
    scorer = _Scorer(params, hp)
    filters = _filter_sets(store) if filtered else None

    queries = [(tuple(row), side) for row in split.tolist() for side in sides]

    def run(chunk):
        return [
            rank_query(trip, side, params, store, hp, filtered, _scorer=scorer, _filters=filters)
            for trip, side in chunk
        ]

    if workers > 1 and len(queries) > 1:
        # shard deterministically; the per-relation projection cache is
        # filled under the hood and reused across threads
        chunks = [queries[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
        ranks_list = [None] * len(queries)
        for i, chunk in enumerate(chunks):
            for j, val in enumerate(parts[i]):
                ranks_list[i + j * workers] = val
        ranks = np.array(ranks_list, dtype=np.int64)
    else:
        ranks = np.array(run(queries), dtype=np.int64)

    rels = np.array([int(trip[1]) for trip, _ in queries], dtype=np.int64)
    hits = ranks <= HITS_CUTOFF

    per_relation: dict[int, RelationMetrics] = {}
    for r in np.unique(rels):
        mask = rels == r
        per_relation[int(r)] = RelationMetrics(
            mean_rank=float(ranks[mask].mean()),
            hits_at_10=float(hits[mask].mean() * 100.0),
            count=int(mask.sum()),
        )

    per_bin = None
    if bins is not None:
        per_bin = {}
        for b in range(bins.n_bins):
            members = [r for r in per_relation if bins.bin_of_relation.get(r) == b]
            if members:
                per_bin[b] = float(np.mean([per_relation[r].hits_at_10 for r in members]))

    return EvalReport(
        mean_rank=float(ranks.mean()) if len(ranks) else 0.0,
        hits_at_10=float(hits.mean() * 100.0) if len(ranks) else 0.0,
        per_relation=per_relation,
        per_bin=per_bin,
        direction=direction,
        n_queries=len(ranks),
        filtered=filtered,
    )


def report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def report_text(report: EvalReport, vocab: Vocab | None = None) -> str:
    """Aligned-column human rendering of a report."""
    lines = [
        f"queries      {report.n_queries}",
        f"direction    {report.direction}",
        f"setting      {'filtered' if report.filtered else 'raw'}",
        f"mean rank    {report.mean_rank:.2f}",
        f"hits@10      {report.hits_at_10:.2f}",
    ]
    if report.per_bin:
        lines.append("")
        lines.append("bin  relation-avg hits@10")
        for b, v in sorted(report.per_bin.items()):
            lines.append(f"{b:<4d} {v:.2f}")
    if report.per_relation:
        name = (lambda r: vocab.relation_names[r]) if vocab else (lambda r: str(r))
        width = max(len(name(r)) for r in report.per_relation)
        lines.append("")
        lines.append(f"{'relation':<{width}}  {'count':>6}  {'mean rank':>10}  {'hits@10':>8}")
        for r, m in sorted(report.per_relation.items()):
            lines.append(
                f"{name(r):<{width}}  {m.count:>6d}  {m.mean_rank:>10.2f}  {m.hits_at_10:>8.2f}"
            )
    return "\n".join(lines) + "\n"


def per_relation_csv(report: EvalReport, path: str | Path, vocab: Vocab | None = None) -> None:
    """One row per relation: id, optional name, count, mean rank, hits@10."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["relation", "count", "mean_rank", "hits_at_10"]
        if vocab is not None:
            header.insert(1, "name")
        writer.writerow(header)
        for r, m in sorted(report.per_relation.items()):
            row = [r, m.count, repr(m.mean_rank), repr(m.hits_at_10)]
            if vocab is not None:
                row.insert(1, vocab.relation_names[r])
            writer.writerow(row)
