"""Gallery construction, fused global/reconstruction matching, and CMC/mAP.

Each probe is scored against every gallery entry with
s = alpha * d + (1 - alpha) * r, where d is the global Euclidean distance and
r the reconstruction distance of the probe's spatial features against the
entry's dictionary; rankings sort s ascending with ties kept in gallery order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, MismatchError
from .features import FeatureMatrix, GlobalFeature
from .metric import euclidean_distance
from .reconstruction import DictionaryFactor


@dataclass(frozen=True)
class GalleryEntry:
    entry_id: str
    subject_id: str
    global_feature: GlobalFeature
    spatial: FeatureMatrix


@dataclass(frozen=True)
class ScoredEntry:
    entry_id: str
    global_dist: float
    sfr_dist: float
    fused: float


@dataclass(frozen=True)
class RetrievalRanking:
    probe_id: str
    scored: tuple[ScoredEntry, ...]  # ascending by fused score


@dataclass(frozen=True)
class EvalReport:
    cmc: np.ndarray  # hit rate at ranks 1..R
    map: float
    per_probe_ap: tuple[float, ...]

    def rank_k(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


class GalleryIndex:
    """Immutable gallery with per-entry dictionary factors precomputed, so
    concurrent probes share the Cholesky work."""

    def __init__(self, entries: tuple[GalleryEntry, ...], alpha: float, beta: float):
        if not entries:
            raise ValueError("gallery must be nonempty")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        ids = [e.entry_id for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate entry ids: {dupes}")
        dim = entries[0].global_feature.dim
        for e in entries:
            if e.global_feature.dim != dim or e.spatial.dim != dim:
                raise MismatchError(f"entry {e.entry_id}: feature dim differs from gallery dim {dim}")
        self.entries = entries
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.dim = dim
        self._factors = tuple(DictionaryFactor(e.spatial, beta) for e in entries)


def build_gallery(entries, alpha: float, beta: float) -> GalleryIndex:
    return GalleryIndex(tuple(entries), alpha, beta)


def merge_entries_by_subject(entries) -> list[GalleryEntry]:
    """Multi-shot mode: concatenate each subject's spatial features into one
    dictionary entry (entry id = subject id, global feature = member mean)."""
    by_subject: dict[str, list[GalleryEntry]] = {}
    for e in entries:
        by_subject.setdefault(e.subject_id, []).append(e)
    merged = []
    for subject_id, group in by_subject.items():
        gvec = np.mean([g.global_feature.values for g in group], axis=0)
        cols = np.concatenate([g.spatial.columns for g in group], axis=1)
        merged.append(GalleryEntry(subject_id, subject_id, GlobalFeature(gvec), FeatureMatrix(cols)))
    return merged


def match_probe(
    probe: tuple[GlobalFeature, FeatureMatrix], gallery: GalleryIndex, probe_id: str = ""
) -> RetrievalRanking:
    """Score one probe against every gallery entry and rank ascending."""
    probe_global, probe_spatial = probe
    if probe_global.dim != gallery.dim or probe_spatial.dim != gallery.dim:
        raise MismatchError(
            f"probe dims ({probe_global.dim}, {probe_spatial.dim}) != gallery dim {gallery.dim}"
        )
    alpha = gallery.alpha
    scored = []
    for entry, factor in zip(gallery.entries, gallery._factors):
        d = euclidean_distance(probe_global, entry.global_feature)
        r = factor.reconstruct(probe_spatial).distance
        scored.append(ScoredEntry(entry.entry_id, d, r, alpha * d + (1.0 - alpha) * r))
    order = np.argsort([s.fused for s in scored], kind="stable")
    return RetrievalRanking(probe_id, tuple(scored[i] for i in order))


def _best_match_rank(ranking: RetrievalRanking, subject: str, subject_of: dict[str, str]) -> int:
    for pos, s in enumerate(ranking.scored, start=1):
        if s.entry_id not in subject_of:
            raise MismatchError(f"probe {ranking.probe_id}: unknown gallery entry {s.entry_id!r}")
        if subject_of[s.entry_id] == subject:
            return pos
    raise MismatchError(f"probe {ranking.probe_id}: no gallery entry for subject {subject}")


def evaluate(rankings, truth: dict[str, str], gallery) -> EvalReport:
    """CMC curve and mean average precision over subject-level matches.

    gallery may be a GalleryIndex or a plain {entry_id: subject_id} mapping
    (the latter is what a rankings CSV re-evaluation has available).
    """
    rankings = list(rankings)
    if not rankings:
        raise ValueError("no rankings to evaluate")
    if isinstance(gallery, GalleryIndex):
        subject_of = {e.entry_id: e.subject_id for e in gallery.entries}
    else:
        subject_of = dict(gallery)
    hits = np.zeros(len(subject_of))
    aps = []
    for ranking in rankings:
        if ranking.probe_id not in truth:
            raise MismatchError(f"unknown probe id {ranking.probe_id!r}")
        if len(ranking.scored) != len(subject_of):
            raise MismatchError(
                f"probe {ranking.probe_id}: {len(ranking.scored)} scored entries "
                f"vs {len(subject_of)} gallery entries"
            )
        subject = truth[ranking.probe_id]
        hits[_best_match_rank(ranking, subject, subject_of) - 1] += 1
        match_positions = [
            pos for pos, s in enumerate(ranking.scored, start=1) if subject_of[s.entry_id] == subject
        ]
        aps.append(
            float(np.mean([(k + 1) / pos for k, pos in enumerate(match_positions)]))
        )
    cmc = np.cumsum(hits) / len(aps)
    return EvalReport(cmc, float(np.mean(aps)), tuple(aps))


def cmc_curve(rankings, truth: dict[str, str], gallery: GalleryIndex) -> np.ndarray:
    """cmc[k-1] = fraction of probes whose best same-subject entry has rank <= k."""
    return evaluate(rankings, truth, gallery).cmc


def mean_average_precision(rankings, truth: dict[str, str], gallery: GalleryIndex) -> float:
    return evaluate(rankings, truth, gallery).map


@dataclass(frozen=True)
class ManifestEntry:
    entry_id: str
    subject_id: str
    path: str


def load_manifest(path) -> list[ManifestEntry]:
    """JSON-lines manifest: one {"entryId", "subjectId", "path"} object per line."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries.append(ManifestEntry(str(obj["entryId"]), str(obj["subjectId"]), str(obj["path"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
    if not entries:
        raise FormatError(f"{path}: empty manifest")
    ids = [e.entry_id for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate entry ids")
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"entryId": e.entry_id, "subjectId": e.subject_id, "path": e.path}) + "\n")


def write_cmc_csv(path, cmc: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("rank,cmc\n")
        for k, v in enumerate(cmc, start=1):
            fh.write(f"{k},{v:.17g}\n")


def write_summary_json(path, report: EvalReport) -> None:
    summary = {
        "mAP": report.map,
        "rank1": report.rank_k(1),
        "rank3": report.rank_k(3),
        "rank5": report.rank_k(5),
        "rank10": report.rank_k(10),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
