"""Two-stage inference: a cheap model scores everything, low-confidence
records escalate to an expensive one.

Both models must share one taxonomy. A record stays with stage 1 when its
confidence is >= the threshold; strictly-below escalates. Stage 2 runs as
a single batch after stage 1 finishes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datastore import EmbeddingBundle
from .errors import MissingModality
from .hiermodel import HierModel, PathPrediction
from .metrics import hierarchical_metrics
from .taxonomy import CategoryPath

STAGE1 = "STAGE1"
ESCALATE = "ESCALATE"

PATH_PRODUCT = "PATH_PRODUCT"
MIN_LEVEL = "MIN_LEVEL"
LEAF_MAX = "LEAF_MAX"


@dataclass
class CascadeConfig:
    stage1: HierModel
    stage2: HierModel
    threshold: float
    confidence: str = PATH_PRODUCT

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.confidence not in (PATH_PRODUCT, MIN_LEVEL, LEAF_MAX):
            raise ValueError(f"unknown confidence definition {self.confidence!r}")
        if self.stage1.taxonomy.content_hash() != self.stage2.taxonomy.content_hash():
            raise ValueError("stage-1 and stage-2 models use different taxonomies")


def route(conf: float, threshold: float) -> str:
    """ESCALATE iff confidence is strictly below the threshold."""
    return ESCALATE if conf < threshold else STAGE1


def prediction_confidence(pred: PathPrediction, definition: str) -> float:
    if definition == PATH_PRODUCT:
        return pred.path_confidence
    decoded = [pred.level_confidences[lvl] for lvl in pred.decoded_levels]
    if definition == MIN_LEVEL:
        return min(decoded)
    return decoded[-1]   # LEAF_MAX: the deepest decoded decision


@dataclass
class CascadeRecord:
    record_id: str
    stage: str
    prediction: CategoryPath
    confidence: float          # confidence of the served prediction
    stage1_confidence: float


@dataclass
class CascadeReport:
    records: list[CascadeRecord]
    threshold: float
    confidence_definition: str

    @property
    def escalated_count(self) -> int:
        return sum(1 for r in self.records if r.stage == ESCALATE)

    @property
    def escalation_fraction(self) -> float:
        return self.escalated_count / len(self.records) if self.records else 0.0

    def stage_mean_confidence(self, stage: str) -> float:
        vals = [r.confidence for r in self.records if r.stage == stage]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "confidence_definition": self.confidence_definition,
            "n_records": len(self.records),
            "escalated": self.escalated_count,
            "escalation_fraction": self.escalation_fraction,
            "stage1_mean_confidence": self.stage_mean_confidence(STAGE1),
            "stage2_mean_confidence": self.stage_mean_confidence(ESCALATE),
            "records": [
                {
                    "id": r.record_id,
                    "stage": r.stage,
                    "prediction": r.prediction.join(),
                    "confidence": r.confidence,
                    "stage1_confidence": r.stage1_confidence,
                }
                for r in self.records
            ],
        }


def _check_modalities(model: HierModel, bundle: EmbeddingBundle, stage: str) -> None:
    for m in model.fusion.cfg.modalities:
        if m not in bundle.modalities:
            raise MissingModality(f"{stage} model needs modality {m!r}")


def run_cascade(cfg: CascadeConfig, bundle: EmbeddingBundle) -> CascadeReport:
    _check_modalities(cfg.stage1, bundle, "stage-1")
    _check_modalities(cfg.stage2, bundle, "stage-2")
    stage1_preds = cfg.stage1.predict_bundle(bundle)
    confs = [prediction_confidence(p, cfg.confidence) for p in stage1_preds]
    escalate_rows = [i for i, c in enumerate(confs) if route(c, cfg.threshold) == ESCALATE]
    stage2_preds: dict[int, PathPrediction] = {}
    if escalate_rows:
        idx = np.array(escalate_rows, dtype=int)
        sub = {
            m: bundle.modality(m)[idx] for m in cfg.stage2.fusion.cfg.modalities
        }
        preds = []
        for start in range(0, len(idx), 512):
            chunk = {m: mat[start : start + 512] for m, mat in sub.items()}
            preds.extend(cfg.stage2.predict_batch(chunk))
        stage2_preds = dict(zip(escalate_rows, preds))
    records = []
    for i, rid in enumerate(bundle.record_ids):
        if i in stage2_preds:
            final = stage2_preds[i]
            records.append(
                CascadeRecord(
                    record_id=rid,
                    stage=ESCALATE,
                    prediction=final.path,
                    confidence=prediction_confidence(final, cfg.confidence),
                    stage1_confidence=confs[i],
                )
            )
        else:
            records.append(
                CascadeRecord(
                    record_id=rid,
                    stage=STAGE1,
                    prediction=stage1_preds[i].path,
                    confidence=confs[i],
                    stage1_confidence=confs[i],
                )
            )
    return CascadeReport(
        records=records, threshold=cfg.threshold, confidence_definition=cfg.confidence
    )


@dataclass
class SweepRow:
    tau: float
    escalated_fraction: float
    hf: float
    accuracy: float


def sweep_threshold(cfg: CascadeConfig, bundle: EmbeddingBundle, grid) -> list[SweepRow]:
    """Escalation fraction and quality at each threshold in the grid.

    Both stages are evaluated once; thresholds only re-partition the
    records, so the sweep is cheap and exactly consistent with
    run_cascade at every grid point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be ascending")
    _check_modalities(cfg.stage1, bundle, "stage-1")
    _check_modalities(cfg.stage2, bundle, "stage-2")
    stage1_preds = cfg.stage1.predict_bundle(bundle)
    stage2_preds = cfg.stage2.predict_bundle(bundle)
    confs = [prediction_confidence(p, cfg.confidence) for p in stage1_preds]
    taxonomy = cfg.stage1.taxonomy
    rows = []
    for tau in grid:
        finals = [
            (stage2_preds[i] if route(confs[i], tau) == ESCALATE else stage1_preds[i])
            for i in range(bundle.n)
        ]
        escalated = sum(1 for c in confs if route(c, tau) == ESCALATE)
        paths = [p.path for p in finals]
        hier = hierarchical_metrics(taxonomy, paths, bundle.labels, on_invalid="prefix")
        exact = sum(
            1 for p, t in zip(paths, bundle.labels) if p.segments == t.segments
        )
        rows.append(
            SweepRow(
                tau=float(tau),
                escalated_fraction=escalated / bundle.n,
                hf=hier.hf,
                accuracy=exact / bundle.n,
            )
        )
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "escalated_fraction", "hF", "accuracy"])
        for r in rows:
            writer.writerow([r.tau, r.escalated_fraction, r.hf, r.accuracy])
