"""Predictive uncertainty by MC dropout, and detection/uncertainty metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import softmax
from .spiking import NetworkSpec, draw_dropout_mask, simulate_batch

log = logging.getLogger(__name__)

AR_IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


@dataclass
class DetectionRecord:
    image_id: int
    bbox: tuple  # x, y, w, h
    score: float
    label: int
    uncertainty: float | None = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"bbox needs positive width and height, got {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.uncertainty is not None and not self.uncertainty >= 0.0:
            raise ValueError(f"uncertainty {self.uncertainty} must be non-negative")


@dataclass
class GroundTruth:
    image_id: int
    bbox: tuple
    label: int

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"bbox needs positive width and height, got {self.bbox}")


@dataclass
class UncertaintyReport:
    per_class: dict  # label -> {"cmue": float, "delta": float, "n_correct": int, "n_incorrect": int}
    mcmue: float

    def to_dict(self) -> dict:
        return {"per_class": {str(k): v for k, v in sorted(self.per_class.items())}, "mcmue": self.mcmue}


def categorical_entropy(p) -> float:
    """Natural-log entropy of a probability vector (0 ln 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty probability vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"not a probability vector (sum {p.sum():.6g})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mc_dropout_infer(net: NetworkSpec, input_train, n_samples: int, dropout_rate: float,
                     rng: np.random.Generator) -> list:
    """Softmax scores of ``n_samples`` stochastic passes over one input train
    (``[T, *input_shape]``).

    Each pass draws fresh keep-masks at ``dropout_rate`` for every dropout
    layer of ``net`` and holds them fixed over the window.  With rate 0 every
    pass is the deterministic forward.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    x = np.asarray(input_train)[None]
    shapes = net.shapes()
    drop = [i for i, l in enumerate(net.layers) if l.kind == "dropout"]
    if dropout_rate > 0 and not drop:
        log.warning("network has no dropout layers; all MC samples coincide")
    out = []
    for _ in range(n_samples):
        masks = {}
        if dropout_rate > 0:
            masks = {i: draw_dropout_mask((1, *shapes[i]), dropout_rate, rng) for i in drop}
        u = simulate_batch(net, x, masks=masks, record=False).output_potentials[0]
        out.append(softmax(u.astype(np.float64)))
    return out


def mc_summary(scores) -> dict:
    """Mean and variance of the sampled score vectors and the entropy of the mean."""
    s = np.asarray(scores, dtype=np.float64)
    mean = s.mean(axis=0)
    mean = mean / mean.sum()
    return {"mean": mean, "variance": s.var(axis=0), "entropy": categorical_entropy(mean),
            "label": int(np.argmax(mean))}


def iou(a, b) -> float:
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class Observation:
    image_id: int
    label: int
    bbox: tuple
    score: float
    members: list = field(default_factory=list)


def group_observations(detections, iou_threshold: float = 0.5) -> list:
    """Cluster detections pooled from several stochastic passes.

    The highest-scoring ungrouped detection seeds a group; every other
    ungrouped detection of the same image and label overlapping the seed by
    at least ``iou_threshold`` joins it.  Group box and score are member means.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    taken = [False] * len(detections)
    groups = []
    for i in order:
        if taken[i]:
            continue
        seed = detections[i]
        taken[i] = True
        members = [seed]
        for j in order:
            d = detections[j]
            if taken[j] or d.image_id != seed.image_id or d.label != seed.label:
                continue
            if iou(seed.bbox, d.bbox) >= iou_threshold:
                taken[j] = True
                members.append(d)
        box = tuple(np.mean([m.bbox for m in members], axis=0).tolist())
        groups.append(Observation(seed.image_id, seed.label, box,
                                  float(np.mean([m.score for m in members])), members))
    return groups


def _match(dets, gts, iou_threshold: float, class_aware: bool = True):
    """Greedy score-ordered matching.  Returns a true-positive flag per
    detection (in descending score order) and the ordered detections."""
    order = sorted(dets, key=lambda d: -d.score)
    by_img: dict = {}
    for g in gts:
        by_img.setdefault(g.image_id, []).append(g)
    used = {k: [False] * len(v) for k, v in by_img.items()}
    tp = np.zeros(len(order), dtype=bool)
    for n, d in enumerate(order):
        cands = by_img.get(d.image_id, [])
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(cands):
            if used[d.image_id][j] or (class_aware and g.label != d.label):
                continue
            o = iou(d.bbox, g.bbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            used[d.image_id][best] = True
            tp[n] = True
    return tp, order


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # all-point interpolation: precision envelope, summed over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def average_precision(detections, ground_truths, iou_threshold: float = 0.5) -> dict:
    """AP per class present in the ground truth (all-point interpolation)."""
    gts_by = {}
    for g in ground_truths:
        gts_by.setdefault(g.label, []).append(g)
    det_labels = {d.label for d in detections}
    for c in sorted(det_labels - set(gts_by)):
        log.warning("class %d has detections but no ground truth; skipped", c)
    out = {}
    for c, gts in sorted(gts_by.items()):
        dets = [d for d in detections if d.label == c]
        tp, _ = _match(dets, gts, iou_threshold)
        out[c] = _ap_from_flags(tp, len(gts))
    return out


def mean_average_precision(detections, ground_truths, iou_threshold: float = 0.5) -> float:
    ap = average_precision(detections, ground_truths, iou_threshold)
    if not ap:
        raise ValueError("no ground truth")
    return float(np.mean(list(ap.values())))


def average_recall_at_k(proposals, ground_truths, k: int) -> float:
    """Recall of the top-``k`` proposals per image, averaged over IoU
    thresholds 0.50, 0.55, ..., 0.95.  Proposals are class-agnostic."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ground_truths:
        raise ValueError("no ground truth")
    by_img: dict = {}
    for p in proposals:
        by_img.setdefault(p.image_id, []).append(p)
    kept = []
    for ps in by_img.values():
        kept.extend(sorted(ps, key=lambda d: -d.score)[:k])
    recalls = []
    for thr in AR_IOU_THRESHOLDS:
        tp, _ = _match(kept, ground_truths, float(thr), class_aware=False)
        recalls.append(tp.sum() / len(ground_truths))
    return float(np.mean(recalls))


def _check_sets(correct, incorrect):
    c = np.asarray(correct, dtype=np.float64).ravel()
    i = np.asarray(incorrect, dtype=np.float64).ravel()
    if c.size == 0 or i.size == 0:
        raise ValueError("both the correct and the incorrect set must be non-empty")
    return c, i


def uncertainty_error(correct, incorrect, delta: float) -> float:
    """Half the fraction of correct detections rejected (``u > delta``) plus
    half the fraction of incorrect ones accepted (``u <= delta``)."""
    c, i = _check_sets(correct, incorrect)
    return 0.5 * float(np.mean(c > delta)) + 0.5 * float(np.mean(i <= delta))


def mue_candidates(correct, incorrect) -> np.ndarray:
    c, i = _check_sets(correct, incorrect)
    v = np.unique(np.concatenate([c, i]))
    mids = 0.5 * (v[1:] + v[:-1])
    return np.concatenate([[v[0] - 1.0], mids, [v[-1] + 1.0]])


def min_uncertainty_error(correct, incorrect):
    """Minimum of UE over thresholds.  UE only changes at observed values,
    so the midpoints between them plus one threshold beyond either end cover
    every attainable value.  Returns ``(mue, delta)``; ties pick the
    smallest delta."""
    c, i = _check_sets(correct, incorrect)
    cand = mue_candidates(c, i)
    cs, is_ = np.sort(c), np.sort(i)
    rejected = (cs.size - np.searchsorted(cs, cand, side="right")) / cs.size
    accepted = np.searchsorted(is_, cand, side="right") / is_.size
    ue = 0.5 * rejected + 0.5 * accepted
    k = int(np.argmin(ue))
    return float(ue[k]), float(cand[k])


def aggregate_mcmue(per_class: dict) -> UncertaintyReport:
    """``per_class`` maps label -> (correct uncertainties, incorrect
    uncertainties).  Classes missing either set are skipped."""
    out = {}
    for c, (cor, inc) in sorted(per_class.items()):
        if len(cor) == 0 or len(inc) == 0:
            log.info("class %s lacks correct or incorrect detections; skipped", c)
            continue
        mue, delta = min_uncertainty_error(cor, inc)
        out[c] = {"cmue": mue, "delta": delta, "n_correct": len(cor), "n_incorrect": len(inc)}
    if not out:
        raise ValueError("no class has both correct and incorrect detections")
    return UncertaintyReport(out, float(np.mean([v["cmue"] for v in out.values()])))


def split_by_correctness(detections, ground_truths, iou_threshold: float = 0.5) -> dict:
    """Per detected label: uncertainties of correct detections (label match
    and IoU at or above threshold with an unclaimed ground truth, greedy by
    score) and of all others.  Detections without uncertainty are skipped."""
    tp, order = _match(detections, ground_truths, iou_threshold)
    out: dict = {}
    for flag, d in zip(tp, order):
        if d.uncertainty is None:
            continue
        cor, inc = out.setdefault(d.label, ([], []))
        (cor if flag else inc).append(d.uncertainty)
    return out
