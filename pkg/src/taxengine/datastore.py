"""Embedding bundles on disk, PCA, splits, and synthetic data.

Bundle directory layout:
    manifest.json   version, record count, modality descriptors, file names
    <modality>.f32  raw little-endian float32, row-major, no header
    labels.tsv      id TAB category-path per record
    ids.txt         one record id per line
    taxonomy.txt    the category tree the labels live in

Matrices are float32 on disk; everything numeric in memory is float64 so
gradient checks and eigendecompositions keep their headroom.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import (
    BadMagic,
    DegenerateData,
    DimMismatch,
    MissingModalityFile,
    RowCountMismatch,
)
from .taxonomy import CategoryPath, Taxonomy, load_taxonomy, parse_path, save_taxonomy

BUNDLE_VERSION = 1

TRAIN, VAL, TEST = "TRAIN", "VAL", "TEST"

DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)


@dataclass
class EmbeddingBundle:
    """In-memory dataset: per-modality matrices plus aligned labels/ids."""

    modalities: dict[str, np.ndarray]   # name -> (n, dim) float64
    labels: list[CategoryPath]
    record_ids: list[str]
    taxonomy: Taxonomy

    @property
    def n(self) -> int:
        return len(self.record_ids)

    def dims(self) -> dict[str, int]:
        return {name: mat.shape[1] for name, mat in self.modalities.items()}

    def modality(self, name: str) -> np.ndarray:
        return self.modalities[name]

    def replace_labels(self, new_labels: list[CategoryPath], taxonomy: Taxonomy) -> "EmbeddingBundle":
        return EmbeddingBundle(
            modalities=self.modalities,
            labels=list(new_labels),
            record_ids=self.record_ids,
            taxonomy=taxonomy,
        )


def save_bundle(bundle: EmbeddingBundle, path) -> None:
    os.makedirs(path, exist_ok=True)
    descriptors = []
    for name, mat in bundle.modalities.items():
        fname = f"{name}.f32"
        descriptors.append({"name": name, "dim": int(mat.shape[1]), "file": fname})
        data = np.ascontiguousarray(mat, dtype="<f4")
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(data.tobytes())
    manifest = {
        "version": BUNDLE_VERSION,
        "n": bundle.n,
        "modalities": descriptors,
        "labels_file": "labels.tsv",
        "taxonomy_file": "taxonomy.txt",
        "ids_file": "ids.txt",
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "labels.tsv"), "w", encoding="utf-8") as fh:
        for rid, label in zip(bundle.record_ids, bundle.labels):
            fh.write(f"{rid}\t{label.join()}\n")
    with open(os.path.join(path, "ids.txt"), "w", encoding="utf-8") as fh:
        for rid in bundle.record_ids:
            fh.write(rid + "\n")
    save_taxonomy(bundle.taxonomy, os.path.join(path, "taxonomy.txt"))


def load_bundle(path) -> EmbeddingBundle:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise BadMagic(f"no manifest.json in {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BadMagic(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("version") != BUNDLE_VERSION:
        raise BadMagic(f"unsupported bundle version {manifest.get('version')!r}")
    for key in ("n", "modalities", "labels_file", "taxonomy_file", "ids_file"):
        if key not in manifest:
            raise BadMagic(f"manifest.json missing key {key!r}")
    n = int(manifest["n"])
    modalities: dict[str, np.ndarray] = {}
    for desc in manifest["modalities"]:
        fpath = os.path.join(path, desc["file"])
        if not os.path.exists(fpath):
            raise MissingModalityFile(f"modality file missing: {desc['file']}")
        dim = int(desc["dim"])
        raw = np.fromfile(fpath, dtype="<f4")
        if raw.size != n * dim:
            raise RowCountMismatch(
                f"{desc['name']}: expected {n}x{dim} floats, file has {raw.size}"
            )
        modalities[desc["name"]] = raw.reshape(n, dim).astype(np.float64)
    ids_path = os.path.join(path, manifest["ids_file"])
    with open(ids_path, encoding="utf-8") as fh:
        record_ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(record_ids) != n:
        raise RowCountMismatch(f"ids file has {len(record_ids)} rows, manifest says {n}")
    labels: list[CategoryPath] = []
    with open(os.path.join(path, manifest["labels_file"]), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            _, _, label_str = line.partition("\t")
            labels.append(parse_path(label_str))
    if len(labels) != n:
        raise RowCountMismatch(f"labels file has {len(labels)} rows, manifest says {n}")
    taxonomy = load_taxonomy(os.path.join(path, manifest["taxonomy_file"]))
    return EmbeddingBundle(
        modalities=modalities, labels=labels, record_ids=record_ids, taxonomy=taxonomy
    )


# -- PCA ------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray                      # (d,)
    components: np.ndarray                # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,), non-increasing

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(X: np.ndarray, variance_target: float = 0.90) -> PcaModel:
    """Principal components via SVD of the centered data.

    Keeps the smallest k whose cumulative explained-variance ratio reaches
    the target. Component signs follow a fixed convention (the
    largest-magnitude loading of each component is positive) so fits are
    reproducible bit for bit.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise DegenerateData("need at least 2 rows to fit PCA")
    if not (0.0 < variance_target <= 1.0):
        raise ValueError(f"variance_target must be in (0, 1], got {variance_target}")
    mean = X.mean(axis=0)
    centered = X - mean
    # singular values relate to covariance eigenvalues by s^2 / (n - 1)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = (s ** 2) / (n - 1)
    total = eigvals.sum()
    if total <= 0.0:
        raise DegenerateData("all rows identical; covariance is zero")
    ratios = eigvals / total
    cumulative = np.cumsum(ratios)
    k = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
    k = min(k, len(ratios))
    components = vt[:k].copy()
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance_ratio=ratios[:k].copy(),
    )


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.mean.shape[0]:
        raise DimMismatch(
            f"input width {X.shape[1]} != model input dim {model.mean.shape[0]}"
        )
    return (X - model.mean) @ model.components.T


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit Euclidean norm; zero vectors stay zero.

    Accepts a single vector or a matrix (normalized row-wise).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        norm = np.linalg.norm(v)
        return v if norm == 0.0 else v / norm
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return v / safe


# -- splitting --------------------------------------------------------------

@dataclass
class SplitAssignment:
    assignment: list[str]   # per record: TRAIN / VAL / TEST
    seed: int

    def indices(self, part: str) -> np.ndarray:
        return np.array([i for i, a in enumerate(self.assignment) if a == part], dtype=int)

    def to_json(self) -> dict:
        return {"seed": self.seed, "assignment": self.assignment}

    @classmethod
    def from_json(cls, doc: dict) -> "SplitAssignment":
        return cls(assignment=list(doc["assignment"]), seed=int(doc["seed"]))


def stratified_split(
    bundle: EmbeddingBundle,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SplitAssignment:
    """Per-stratum largest-remainder allocation into TRAIN/VAL/TEST.

    The stratum key is the record's full label path. Singleton strata land
    in TRAIN. Deterministic for a fixed seed.
    """
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1: {fractions}")
    gen = rngmod.stream(seed, rngmod.STREAM_SPLIT)
    strata: dict[str, list[int]] = {}
    for i, label in enumerate(bundle.labels):
        strata.setdefault(label.join(), []).append(i)
    assignment = [""] * bundle.n
    parts = (TRAIN, VAL, TEST)
    for key in sorted(strata):
        members = np.array(strata[key], dtype=int)
        gen.shuffle(members)
        m = len(members)
        if m == 1:
            assignment[members[0]] = TRAIN
            continue
        ideal = [m * f for f in fractions]
        counts = [int(x) for x in ideal]
        leftover = m - sum(counts)
        by_frac = sorted(range(3), key=lambda j: (ideal[j] - counts[j], -j), reverse=True)
        for j in by_frac[:leftover]:
            counts[j] += 1
        pos = 0
        for part, cnt in zip(parts, counts):
            for idx in members[pos : pos + cnt]:
                assignment[idx] = part
            pos += cnt
    return SplitAssignment(assignment=assignment, seed=seed)


# -- synthetic data ----------------------------------------------------------

def gen_synthetic(
    taxonomy: Taxonomy,
    per_leaf: int,
    dims: dict[str, int],
    noise: float | dict[str, float] = 0.05,
    seed: int = 0,
    anchor_prefix_level: dict[str, int] | None = None,
) -> EmbeddingBundle:
    """Desk-scale stand-in dataset: one unit-norm anchor per terminal node
    per modality, records sampled as anchor + Gaussian noise.

    `noise` may be a single sigma or a per-modality map, which lets a test
    make one modality deliberately less informative. `anchor_prefix_level`
    optionally ties a modality's anchor to the label's ancestor at the
    given level instead of the terminal node, so that modality cannot
    separate deeper classes at all.
    """
    if per_leaf < 1:
        raise ValueError("per_leaf must be >= 1")
    gen = rngmod.stream(seed, rngmod.STREAM_SYNTH)
    leaves = [nid for nid in taxonomy.node_ids if taxonomy.is_terminal(nid)]
    noise_of = (lambda m: noise[m]) if isinstance(noise, dict) else (lambda m: noise)
    prefix_of = anchor_prefix_level or {}
    anchors: dict[str, dict[int, np.ndarray]] = {m: {} for m in dims}
    for modality in sorted(dims):
        dim = dims[modality]
        # anchor per distinct key (terminal node, or its ancestor at the
        # configured level), drawn in sorted key order for determinism
        keys: list[int] = []
        for leaf in leaves:
            keys.append(_anchor_key(taxonomy, leaf, prefix_of.get(modality)))
        for key in sorted(set(keys)):
            vec = gen.standard_normal(dim)
            norm = np.linalg.norm(vec)
            anchors[modality][key] = vec / (norm if norm > 0 else 1.0)
    modal_rows: dict[str, list[np.ndarray]] = {m: [] for m in dims}
    labels: list[CategoryPath] = []
    record_ids: list[str] = []
    counter = 0
    for leaf in leaves:
        path = taxonomy.node_path(leaf)
        for _ in range(per_leaf):
            for modality in sorted(dims):
                key = _anchor_key(taxonomy, leaf, prefix_of.get(modality))
                anchor = anchors[modality][key]
                sigma = noise_of(modality)
                row = anchor + (gen.standard_normal(dims[modality]) * sigma if sigma > 0 else 0.0)
                modal_rows[modality].append(row)
            labels.append(path)
            record_ids.append(f"rec-{counter:06d}")
            counter += 1
    modalities = {m: np.vstack(rows) for m, rows in modal_rows.items()}
    return EmbeddingBundle(
        modalities=modalities, labels=labels, record_ids=record_ids, taxonomy=taxonomy
    )


def _anchor_key(taxonomy: Taxonomy, leaf: int, prefix_level: int | None) -> int:
    if prefix_level is None:
        return leaf
    nid = leaf
    while taxonomy.node(nid).level > prefix_level:
        nid = taxonomy.node(nid).parent_id
    return nid


def nearest_anchor_accuracy(bundle: EmbeddingBundle, seed: int, dims: dict[str, int],
                            noise, anchor_prefix_level=None) -> float:
    """Brute-force check of how separable a synthetic bundle is: fraction
    of records whose concatenated vector lies nearest its own leaf anchor.
    Regenerates the anchors from the seed, so it only applies to bundles
    made by gen_synthetic with the same arguments."""
    clean = gen_synthetic(bundle.taxonomy, 1, dims, 0.0, seed, anchor_prefix_level)
    anchor_mat = np.hstack([clean.modalities[m] for m in sorted(dims)])
    X = np.hstack([bundle.modalities[m] for m in sorted(dims)])
    d2 = ((X[:, None, :] - anchor_mat[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    truth_paths = [p.join() for p in clean.labels]
    hits = sum(
        1 for i, lab in enumerate(bundle.labels) if truth_paths[nearest[i]] == lab.join()
    )
    return hits / bundle.n
