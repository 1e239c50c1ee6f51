"""PSG evaluation: mask IoU, S-V-O triplet matching, R@K / mR@K and PQ."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import Prediction, RelationModel, predict_triplets
from .numeric import DimensionError
from .scene import Scene

DEFAULT_KS = (20, 50, 100)
IOU_THRESHOLD = 0.5


class MetricError(ValueError):
    pass


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


@dataclass
class MatchRecord:
    """One ground-truth triplet and the rank (1-based) of the prediction that recalled it."""

    subject: int
    object: int
    predicate: int
    rank: int | None = None

    @property
    def matched(self) -> bool:
        return self.rank is not None


def _compatible(pred: Prediction, gt: Scene, s: int, o: int, p: int, iou_cache: dict) -> bool:
    if pred.predicate != p or pred.subject_label != gt.labels[s] or pred.object_label != gt.labels[o]:
        return False
    for mask, g in ((pred.subject_mask, s), (pred.object_mask, o)):
        key = (id(mask), g)
        if key not in iou_cache:
            iou_cache[key] = mask_iou(mask, gt.masks[g])
        if not iou_cache[key] > IOU_THRESHOLD:
            return False
    return True


def match_triplets(preds: Sequence[Prediction], gt: Scene, K: int) -> list[MatchRecord]:
    """Greedy rank-order matching of the top-K predictions against GT triplets.

    Each prediction consumes at most one GT triplet (the first compatible one
    by GT index) and each GT triplet is matched at most once.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    records = [MatchRecord(s, o, p) for s, o, p in gt.triplets]
    cache: dict = {}
    for rank, pred in enumerate(preds[:K], start=1):
        for rec in records:
            if rec.rank is None and _compatible(pred, gt, rec.subject, rec.object, rec.predicate, cache):
                rec.rank = rank
                break
    return records


def compatibility_matrix(preds: Sequence[Prediction], gt: Scene, K: int) -> np.ndarray:
    cache: dict = {}
    return np.array([[_compatible(pr, gt, s, o, p, cache) for s, o, p in gt.triplets]
                     for pr in preds[:K]], dtype=bool).reshape(min(K, len(preds)), len(gt.triplets))


def recall_at_k(records_per_scene: Iterable[Sequence[MatchRecord]]) -> float:
    """Matched GT triplets over all GT triplets, pooled across the corpus."""
    total = matched = 0
    for recs in records_per_scene:
        total += len(recs)
        matched += sum(r.matched for r in recs)
    if total == 0:
        raise MetricError("recall is undefined: the corpus has no ground-truth triplets")
    return matched / total


def per_predicate_counts(records_per_scene: Iterable[Sequence[MatchRecord]]) -> dict[int, tuple[int, int]]:
    counts: dict[int, list[int]] = {}
    for recs in records_per_scene:
        for r in recs:
            c = counts.setdefault(r.predicate, [0, 0])
            c[0] += 1
            c[1] += r.matched
    return {p: (c[0], c[1]) for p, c in sorted(counts.items())}


def mean_recall_at_k(records_per_scene: Iterable[Sequence[MatchRecord]]) -> float:
    """Unweighted mean of per-predicate recall over predicates present in the GT."""
    counts = per_predicate_counts(records_per_scene)
    if not counts:
        raise MetricError("mean recall is undefined: the corpus has no ground-truth triplets")
    return float(np.mean([m / g for g, m in counts.values()]))


# panoptic quality


@dataclass
class PQStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "PQStats") -> "PQStats":
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def values(self) -> tuple[float, float, float]:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            raise MetricError("PQ is undefined with no segments on either side")
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou_sum / denom, sq, rq


def _check_disjoint(segments, side: str) -> None:
    if len(segments) > 1:
        stack = np.stack([np.asarray(m, dtype=bool) for _, m in segments])
        if (stack.sum(axis=0) > 1).any():
            raise MetricError(f"{side} segments overlap")


def pq_stats(pred_segments, gt_segments) -> PQStats:
    """Segment matching for one image; segments are ``(label, mask)`` pairs."""
    _check_disjoint(pred_segments, "predicted")
    _check_disjoint(gt_segments, "ground-truth")
    st = PQStats()
    used_pred = set()
    for gl, gm in gt_segments:
        hit = None
        for k, (pl, pm) in enumerate(pred_segments):
            if k in used_pred or pl != gl:
                continue
            iou = mask_iou(pm, gm)
            # IoU > 0.5 makes the match unique for non-overlapping segments
            if iou > IOU_THRESHOLD:
                hit = (k, iou)
                break
        if hit is None:
            st.fn += 1
        else:
            used_pred.add(hit[0])
            st.tp += 1
            st.iou_sum += hit[1]
    st.fp = len(pred_segments) - len(used_pred)
    return st


def panoptic_quality(pred_segments, gt_segments) -> tuple[float, float, float]:
    """(PQ, SQ, RQ) for one image."""
    return pq_stats(pred_segments, gt_segments).values()


def scene_segments(scene: Scene) -> list[tuple[int, np.ndarray]]:
    return [(int(c), m) for c, m in zip(scene.labels, scene.masks)]


# corpus-level evaluation


@dataclass
class MetricsReport:
    Ks: list[int]
    recall: dict[int, float]
    mean_recall: dict[int, float]
    per_predicate: dict[int, dict]
    pq: float
    sq: float
    rq: float
    corpus_id: str = ""
    checkpoint_id: str = ""
    per_predicate_by_k: dict[int, dict[int, dict]] = field(default_factory=dict)
    matches: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["mean_recall"] = {str(k): v for k, v in self.mean_recall.items()}
        d["per_predicate"] = {str(k): v for k, v in self.per_predicate.items()}
        d["per_predicate_by_k"] = {str(K): {str(p): v for p, v in t.items()}
                                   for K, t in self.per_predicate_by_k.items()}
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["recall"] = {int(k): v for k, v in d["recall"].items()}
        d["mean_recall"] = {int(k): v for k, v in d["mean_recall"].items()}
        d["per_predicate"] = {int(k): v for k, v in d["per_predicate"].items()}
        d["per_predicate_by_k"] = {int(K): {int(p): v for p, v in t.items()}
                                   for K, t in d.get("per_predicate_by_k", {}).items()}
        return cls(**d)

    def table(self) -> str:
        """Tab-delimited R/mR table, one row per K."""
        rows = ["K\tR@K\tmR@K"]
        for K in self.Ks:
            rows.append(f"{K}\t{self.recall[K]!r}\t{self.mean_recall[K]!r}")
        rows.append(f"PQ\t{self.pq!r}\tSQ={self.sq!r} RQ={self.rq!r}")
        return "\n".join(rows)


def oracle_predictions(scene: Scene, K: int) -> list[Prediction]:
    """Ground truth emitted as a ranked prediction list (for plumbing checks)."""
    out = []
    for s, o, p in scene.triplets[:K]:
        out.append(Prediction(s, o, p, 1.0, int(scene.labels[s]), int(scene.labels[o]),
                              scene.masks[s], scene.masks[o]))
    return out


Predictor = Callable[[Scene, int], list[Prediction]]


def model_predictor(model: RelationModel) -> Predictor:
    def run(scene: Scene, K: int) -> list[Prediction]:
        return predict_triplets(model.logits(scene), scene, K)
    return run


def evaluate(corpus: Sequence[Scene], predictor: Predictor | RelationModel,
             Ks: Sequence[int] = DEFAULT_KS, corpus_id: str = "", checkpoint_id: str = "",
             threads: int = 1) -> MetricsReport:
    Ks = sorted({int(k) for k in Ks})
    if not Ks or Ks[0] < 1:
        raise MetricError("K values must be >= 1")
    if isinstance(predictor, RelationModel):
        predictor = model_predictor(predictor)
    kmax = Ks[-1]
    per_k: dict[int, list[list[MatchRecord]]] = {K: [] for K in Ks}
    pq = PQStats()
    matches = []
    if threads > 1 and len(corpus) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_preds = list(pool.map(lambda sc: predictor(sc, kmax), corpus))
    else:
        all_preds = [predictor(sc, kmax) for sc in corpus]
    for scene, preds in zip(corpus, all_preds):
        for K in Ks:
            per_k[K].append(match_triplets(preds, scene, K))
        pred_segments = {}
        for pr in preds:
            pred_segments.setdefault(pr.subject, (pr.subject_label, pr.subject_mask))
            pred_segments.setdefault(pr.object, (pr.object_label, pr.object_mask))
        # segments the predictions are grounded on; the relation stage reuses the
        # segmentation, so every object the scene has counts as predicted
        for k in range(scene.n):
            pred_segments.setdefault(k, (int(scene.labels[k]), scene.masks[k]))
        pq += pq_stats([pred_segments[k] for k in sorted(pred_segments)], scene_segments(scene))
        matches.append({"scene_id": scene.scene_id,
                        "gt": [[r.subject, r.object, r.predicate, r.rank] for r in per_k[kmax][-1]]})
    recall = {K: recall_at_k(per_k[K]) for K in Ks}
    mean_recall = {K: mean_recall_at_k(per_k[K]) for K in Ks}
    by_k = {}
    for K in Ks:
        by_k[K] = {p: {"gt_count": g, "matched": m, "recall": m / g}
                   for p, (g, m) in per_predicate_counts(per_k[K]).items()}
    pqv, sqv, rqv = pq.values()
    return MetricsReport(Ks, recall, mean_recall, by_k[kmax], pqv, sqv, rqv,
                         corpus_id, checkpoint_id, by_k, matches)


def chance_recall(corpus: Sequence[Scene], K: int, num_predicates: int) -> float:
    """Expected R@K of a uniformly random ranking of all off-diagonal entries."""
    total = hit = 0.0
    for s in corpus:
        t = len(s.triplets)
        if t == 0:
            continue
        cells = s.n * (s.n - 1) * num_predicates
        total += t
        hit += t * min(1.0, K / cells)
    if total == 0:
        raise MetricError("no ground-truth triplets")
    return hit / total
