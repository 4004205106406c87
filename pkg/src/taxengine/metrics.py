"""Flat and hierarchical evaluation metrics plus cluster purity.

Hierarchical precision/recall/F compare the ancestor closures of the
predicted and true most-specific classes, summed over all examples before
dividing, so a prediction that stops one level short of the truth earns
partial credit instead of a flat miss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, InvalidPath, LengthMismatch
from .taxonomy import CategoryPath, Taxonomy


@dataclass
class HierResult:
    hp: float
    hr: float
    hf: float
    # integer sums kept for exact cross-checks against oracles
    intersection_sum: int
    predicted_sum: int
    true_sum: int


def _closure_of_path(
    tax: Taxonomy, path: CategoryPath, on_invalid: str, exclude_root: bool
) -> set[int]:
    nid = tax.resolve(path)
    if nid is None:
        if on_invalid == "prefix":
            # deepest resolvable prefix; empty when even the root is unknown
            nid = None
            cur = None
            for name in path.segments:
                nxt = tax.child_by_name(cur, name)
                if nxt is None:
                    break
                cur = nxt
            nid = cur
            if nid is None:
                return set()
        else:
            raise InvalidPath(f"path {path.join()!r} not in taxonomy")
    closure = tax.ancestor_closure(nid)
    if exclude_root:
        closure = {n for n in closure if tax.node(n).parent_id is not None}
    return closure


def hierarchical_metrics(
    tax: Taxonomy,
    predictions: list[CategoryPath],
    truths: list[CategoryPath],
    on_invalid: str = "raise",
    exclude_root: bool = False,
) -> HierResult:
    """Micro-aggregated hP, hR, hF over ancestor-closure sets.

    `on_invalid="prefix"` scores a prediction by its deepest resolvable
    prefix instead of raising, which keeps unmasked (ablation) models
    evaluable. `exclude_root` drops the constant level-1 class from every
    closure for comparability experiments.
    """
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    inter = 0
    pred_total = 0
    true_total = 0
    for pred, truth in zip(predictions, truths):
        alpha = _closure_of_path(tax, pred, on_invalid, exclude_root)
        beta = _closure_of_path(tax, truth, "raise", exclude_root)
        inter += len(alpha & beta)
        pred_total += len(alpha)
        true_total += len(beta)
    hp = inter / pred_total if pred_total else 0.0
    hr = inter / true_total if true_total else 0.0
    hf = 2 * hp * hr / (hp + hr) if (hp + hr) > 0 else 0.0
    return HierResult(
        hp=hp, hr=hr, hf=hf,
        intersection_sum=inter, predicted_sum=pred_total, true_sum=true_total,
    )


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class FlatResult:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: dict[int, ClassScores]


def flat_metrics(predictions, truths, n_classes: int) -> FlatResult:
    """Accuracy plus per-class precision/recall/F1 with macro and
    support-weighted averages over the classes present in the truth."""
    preds = np.asarray(predictions, dtype=int)
    trues = np.asarray(truths, dtype=int)
    if preds.shape != trues.shape:
        raise LengthMismatch(f"{preds.shape} predictions vs {trues.shape} truths")
    for arr, what in ((preds, "prediction"), (trues, "truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise IndexOutOfRange(f"{what} index outside [0, {n_classes})")
    accuracy = float((preds == trues).mean()) if preds.size else 0.0
    per_class: dict[int, ClassScores] = {}
    macro_sum = 0.0
    weighted_sum = 0.0
    present = sorted(set(trues.tolist()))
    for c in present:
        tp = int(((preds == c) & (trues == c)).sum())
        fp = int(((preds == c) & (trues != c)).sum())
        fn = int(((preds != c) & (trues == c)).sum())
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        support = tp + fn
        per_class[c] = ClassScores(precision, recall, f1, support)
        macro_sum += f1
        weighted_sum += f1 * support
    macro = macro_sum / len(present) if present else 0.0
    weighted = weighted_sum / trues.size if trues.size else 0.0
    return FlatResult(accuracy=accuracy, macro_f1=macro, weighted_f1=weighted,
                      per_class=per_class)


@dataclass
class PurityResult:
    overall: float
    per_cluster: dict[int, float]
    sizes: dict[int, int]


def purity(cluster_assignments, truths) -> PurityResult:
    """Majority-label purity: overall and per cluster."""
    clusters = list(cluster_assignments)
    labels = list(truths)
    if len(clusters) != len(labels):
        raise LengthMismatch(f"{len(clusters)} assignments vs {len(labels)} labels")
    counts: dict[int, dict] = {}
    for c, lab in zip(clusters, labels):
        counts.setdefault(c, {}).setdefault(lab, 0)
        counts[c][lab] += 1
    majority_total = 0
    per_cluster = {}
    sizes = {}
    for c in sorted(counts, key=str):
        size = sum(counts[c].values())
        best = max(counts[c].values())
        majority_total += best
        per_cluster[c] = best / size
        sizes[c] = size
    overall = majority_total / len(labels) if labels else 0.0
    return PurityResult(overall=overall, per_cluster=per_cluster, sizes=sizes)


@dataclass
class MetricsReport:
    """Per-level flat scores plus the global hierarchical scores."""

    per_level: dict[int, FlatResult]
    hierarchical: HierResult
    n_examples: int
    masking: str | None = None
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {
            "n_examples": self.n_examples,
            "masking": self.masking,
            "hP": self.hierarchical.hp,
            "hR": self.hierarchical.hr,
            "hF1": self.hierarchical.hf,
            "levels": {},
        }
        for lvl in sorted(self.per_level):
            r = self.per_level[lvl]
            doc["levels"][str(lvl)] = {
                "accuracy": r.accuracy,
                "macro_f1": r.macro_f1,
                "weighted_f1": r.weighted_f1,
            }
        if self.notes:
            doc["notes"] = self.notes
        return doc


def evaluate_paths(
    tax: Taxonomy,
    predictions: list[CategoryPath],
    truths: list[CategoryPath],
    on_invalid: str = "raise",
    masking: str | None = None,
) -> MetricsReport:
    """Bundle per-level flat metrics and hP/hR/hF into one report.

    Levels beyond a path's depth count as the STOP class, mirroring how
    the model is trained on shallow labels.
    """
    hier = hierarchical_metrics(tax, predictions, truths, on_invalid=on_invalid)
    per_level: dict[int, FlatResult] = {}
    for lvl in range(2, tax.max_depth + 1):
        n_classes = tax.level_size(lvl)
        pred_idx = [_level_class(tax, p, lvl) for p in predictions]
        true_idx = [_level_class(tax, t, lvl) for t in truths]
        per_level[lvl] = flat_metrics(pred_idx, true_idx, n_classes)
    return MetricsReport(
        per_level=per_level,
        hierarchical=hier,
        n_examples=len(truths),
        masking=masking,
    )


def _level_class(tax: Taxonomy, path: CategoryPath, level: int) -> int:
    if len(path) < level:
        return tax.stop_position(level)
    prefix = CategoryPath(path.segments[:level])
    nid = tax.resolve(prefix)
    if nid is None:
        # unknown name at this level (unmasked decode); score it as a
        # guaranteed miss by pointing at STOP only if the truth cannot be
        # STOP here -- conservatively reuse STOP, the caller's truth paths
        # are always resolvable
        return tax.stop_position(level)
    return tax.class_position(nid)
