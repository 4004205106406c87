"""Subcategory discovery: filter, reduce, cascade-cluster, label, graft.

The pipeline takes the records under one taxonomy node, drops visually
incoherent k-means clusters, reduces dimensionality (PCA by default, or
externally computed coordinates), then recursively applies agglomerative
clustering to grow a tree of candidate subcategories. Candidate clusters
go out as a TSV for human labeling; imported labels are grafted into the
taxonomy and member records are relabeled with their deeper paths.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .datastore import EmbeddingBundle, pca_fit, pca_transform
from .errors import (
    DuplicateLabelAmongSiblings,
    EmptyInput,
    LabelsMissing,
    UnknownClusterId,
)
from .taxonomy import CategoryPath, Taxonomy

log = logging.getLogger("taxengine.recategorize")

WARD = "WARD"
AVERAGE = "AVERAGE"
COMPLETE = "COMPLETE"


# -- k-means -----------------------------------------------------------------

def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100):
    """Lloyd iterations from k-means++ seeding; runs to an assignment
    fixpoint (or max_iter). Returns (assignments, centroids)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise EmptyInput("kmeans on empty data")
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}], got {k}")
    gen = rngmod.stream(seed, rngmod.STREAM_KMEANS)
    centroids = _kmeanspp(X, k, gen)
    assign = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = X[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            # empty clusters keep their previous centroid
    return assign, centroids


def _kmeanspp(X: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[gen.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid
            centroids[j] = X[gen.integers(n)]
            continue
        probs = d2 / total
        idx = gen.choice(n, p=probs)
        centroids[j] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def inertia(X: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> float:
    return float(((X - centroids[assign]) ** 2).sum())


def _median_low(vals: np.ndarray) -> float:
    ordered = np.sort(vals)
    return float(ordered[(len(ordered) - 1) // 2])


# -- coherence filter -----------------------------------------------------------

@dataclass
class FilterReport:
    cluster_sizes: dict[int, int]
    cluster_dispersion: dict[int, float]   # mean distance to centroid
    kept_clusters: list[int]
    discarded_clusters: list[int]
    kept_indices: np.ndarray
    discarded_indices: np.ndarray
    threshold: float


def filter_records(X: np.ndarray, k: int, seed: int = 0,
                   threshold: float | None = None) -> FilterReport:
    """Discard k-means clusters whose mean intra-cluster distance exceeds
    the keep rule (default: median + 1 MAD across clusters).

    Medians use the low-median convention (no interpolation): with an
    interpolated median, two clusters would put the threshold exactly at
    the larger dispersion and a diffuse cluster could never be discarded.
    """
    X = np.asarray(X, dtype=np.float64)
    assign, centroids = kmeans(X, k, seed=seed)
    sizes = {}
    dispersion = {}
    for j in range(k):
        members = np.flatnonzero(assign == j)
        sizes[j] = len(members)
        if len(members) == 0:
            dispersion[j] = 0.0
            continue
        dispersion[j] = float(
            np.linalg.norm(X[members] - centroids[j], axis=1).mean()
        )
    if threshold is None:
        vals = np.array([dispersion[j] for j in range(k) if sizes[j] > 0])
        med = _median_low(vals)
        mad = _median_low(np.abs(vals - med))
        threshold = med + mad
    kept = [j for j in range(k) if sizes[j] > 0 and dispersion[j] <= threshold]
    discarded = [j for j in range(k) if sizes[j] > 0 and dispersion[j] > threshold]
    kept_idx = np.flatnonzero(np.isin(assign, kept))
    disc_idx = np.flatnonzero(np.isin(assign, discarded))
    return FilterReport(
        cluster_sizes=sizes,
        cluster_dispersion=dispersion,
        kept_clusters=kept,
        discarded_clusters=discarded,
        kept_indices=kept_idx,
        discarded_indices=disc_idx,
        threshold=threshold,
    )


# -- agglomerative clustering ------------------------------------------------

def agglomerative(
    X: np.ndarray,
    linkage: str = WARD,
    n_clusters: int | None = None,
    distance_threshold: float | None = None,
):
    """Exact O(n^2)-memory agglomerative clustering via Lance-Williams
    updates. Ties break on the smallest active (i, j) slot pair. Returns
    (flat assignment, merge list [(a, b, height, size)]).

    Ward heights follow the scipy convention (square root of the variance
    increase term), so thresholds are comparable across tools.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise EmptyInput("agglomerative on empty data")
    if (n_clusters is None) == (distance_threshold is None):
        raise ValueError("specify exactly one of n_clusters, distance_threshold")
    if n_clusters is not None and not (1 <= n_clusters <= n):
        raise ValueError(f"n_clusters must be in [1, {n}]")
    if linkage not in (WARD, AVERAGE, COMPLETE):
        raise ValueError(f"unknown linkage {linkage!r}")
    # pairwise distances; WARD operates on squared distances internally
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    D = sq.copy() if linkage == WARD else np.sqrt(sq)
    np.fill_diagonal(D, np.inf)
    active = np.ones(n, dtype=bool)
    size = np.ones(n, dtype=np.int64)
    members: list[list[int]] = [[i] for i in range(n)]
    cluster_id = list(range(n))
    merges: list[tuple[int, int, float, int]] = []
    next_id = n
    target = n_clusters if n_clusters is not None else 1
    remaining = n
    while remaining > target:
        masked = np.where(active[:, None] & active[None, :], D, np.inf)
        flat = int(np.argmin(masked))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        dij = D[i, j]
        height = float(np.sqrt(dij)) if linkage == WARD else float(dij)
        if distance_threshold is not None and height > distance_threshold:
            break
        # Lance-Williams update of distances from the merged cluster (slot i)
        ks = np.flatnonzero(active)
        ks = ks[(ks != i) & (ks != j)]
        if linkage == WARD:
            ni, nj, nk = size[i], size[j], size[ks]
            D[i, ks] = (
                (ni + nk) * D[i, ks] + (nj + nk) * D[j, ks] - nk * dij
            ) / (ni + nj + nk)
        elif linkage == AVERAGE:
            ni, nj = size[i], size[j]
            D[i, ks] = (ni * D[i, ks] + nj * D[j, ks]) / (ni + nj)
        else:  # COMPLETE
            D[i, ks] = np.maximum(D[i, ks], D[j, ks])
        D[ks, i] = D[i, ks]
        active[j] = False
        size[i] += size[j]
        members[i] = members[i] + members[j]
        merges.append((cluster_id[i], cluster_id[j], height, int(size[i])))
        cluster_id[i] = next_id
        next_id += 1
        remaining -= 1
    assign = np.empty(n, dtype=int)
    slots = np.flatnonzero(active)
    # deterministic flat labels: clusters ordered by smallest member index
    order = sorted(slots, key=lambda s: min(members[s]))
    for label, s in enumerate(order):
        assign[members[s]] = label
    return assign, merges


# -- cascade clustering ----------------------------------------------------------

@dataclass
class ReducerConfig:
    method: str = "PCA"                  # PCA | EXTERNAL | NONE
    target_dim: int | None = None
    variance_target: float | None = None
    external_file: str | None = None

    def __post_init__(self):
        if self.method == "PCA" and self.target_dim is not None and self.target_dim < 2:
            raise ValueError("target dim must be >= 2")


@dataclass
class DepthSpec:
    linkage: str = WARD
    n_clusters: int | None = None
    distance_threshold: float | None = None
    reducer: ReducerConfig = field(default_factory=ReducerConfig)


@dataclass
class ClusterNode:
    cluster_id: int
    parent_id: int | None
    depth: int
    member_indices: np.ndarray       # positions into the clustered matrix
    centroid: np.ndarray             # in the original embedding space
    exemplar_positions: list[int]
    label: str | None = None


@dataclass
class ClusterTree:
    nodes: dict[int, ClusterNode]
    root_id: int = 0

    def children(self, cluster_id: int) -> list[ClusterNode]:
        return [n for n in self.nodes.values() if n.parent_id == cluster_id]

    def leaves(self) -> list[ClusterNode]:
        have_children = {n.parent_id for n in self.nodes.values() if n.parent_id is not None}
        return [n for n in self.nodes.values() if n.cluster_id not in have_children]

    def leaf_of_position(self) -> dict[int, int]:
        """Record position -> deepest cluster id containing it."""
        out: dict[int, int] = {}
        for leaf in self.leaves():
            for pos in leaf.member_indices:
                out[int(pos)] = leaf.cluster_id
        return out

    def labeled(self) -> bool:
        return all(
            n.label is not None for n in self.nodes.values() if n.cluster_id != self.root_id
        )


def _reduce(X: np.ndarray, cfg: ReducerConfig, positions: np.ndarray) -> np.ndarray:
    if cfg.method == "NONE":
        return X[positions]
    if cfg.method == "EXTERNAL":
        coords = np.load(cfg.external_file)
        return coords[positions]
    sub = X[positions]
    dim = cfg.target_dim
    if dim is not None and dim < sub.shape[1] and len(positions) > dim:
        model = pca_fit(sub, variance_target=1.0)
        comps = model.components[:dim]
        return (sub - model.mean) @ comps.T
    if cfg.variance_target is not None:
        model = pca_fit(sub, variance_target=cfg.variance_target)
        return pca_transform(model, sub)
    return sub


def cascade_cluster(
    X: np.ndarray,
    depth_plan: list[DepthSpec],
    exemplars_per_cluster: int = 5,
) -> ClusterTree:
    """Recursive reduce-then-cluster over a record matrix.

    Depth d of the plan applies to every cluster produced at depth d-1;
    clusters smaller than the requested count (or of size 1) stay leaves.
    Members of children always partition the parent.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyInput("cascade_cluster on empty data")
    if not depth_plan:
        raise ValueError("depth_plan must have at least one entry")
    nodes: dict[int, ClusterNode] = {}
    all_pos = np.arange(X.shape[0])
    nodes[0] = _make_node(X, 0, None, 0, all_pos, exemplars_per_cluster)
    next_id = [1]

    def split(node: ClusterNode, depth: int):
        if depth > len(depth_plan):
            return
        spec = depth_plan[depth - 1]
        pos = node.member_indices
        if len(pos) < 2:
            return
        if spec.n_clusters is not None and len(pos) < spec.n_clusters:
            return
        reduced = _reduce(X, spec.reducer, pos)
        assign, _ = agglomerative(
            reduced,
            linkage=spec.linkage,
            n_clusters=spec.n_clusters,
            distance_threshold=spec.distance_threshold,
        )
        labels = np.unique(assign)
        if len(labels) <= 1:
            # a threshold that merges everything is "no subdivision found";
            # an explicit request for a single cluster still yields one child
            if spec.n_clusters != 1:
                return
            log.warning("depth-%d plan produced a single cluster", depth)
        for lab in labels:
            child_pos = pos[assign == lab]
            child = _make_node(X, next_id[0], node.cluster_id, depth, child_pos,
                               exemplars_per_cluster)
            nodes[child.cluster_id] = child
            next_id[0] += 1
            split(child, depth + 1)

    split(nodes[0], 1)
    return ClusterTree(nodes=nodes)


def _make_node(X, cid, parent, depth, positions, n_exemplars) -> ClusterNode:
    centroid = X[positions].mean(axis=0)
    d = np.linalg.norm(X[positions] - centroid, axis=1)
    nearest = np.argsort(d, kind="stable")[:n_exemplars]
    return ClusterNode(
        cluster_id=cid,
        parent_id=parent,
        depth=depth,
        member_indices=positions,
        centroid=centroid,
        exemplar_positions=[int(positions[i]) for i in nearest],
    )


# -- labeling round-trip ------------------------------------------------------

LABEL_HEADER = ["cluster_id", "parent_id", "depth", "size", "exemplar_ids", "label"]


def export_clusters(tree: ClusterTree, out_path, record_ids: list[str]) -> None:
    """One TSV row per cluster node with exemplar ids and an empty label
    column for offline annotation."""
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(LABEL_HEADER) + "\n")
        for cid in sorted(tree.nodes):
            node = tree.nodes[cid]
            exemplars = ",".join(record_ids[p] for p in node.exemplar_positions)
            parent = "" if node.parent_id is None else str(node.parent_id)
            label = node.label or ""
            fh.write(
                f"{cid}\t{parent}\t{node.depth}\t{len(node.member_indices)}"
                f"\t{exemplars}\t{label}\n"
            )


def import_labels(tree: ClusterTree, labels_file, root_label: str = "root") -> ClusterTree:
    """Fill node labels from an annotated TSV.

    Unlabeled nodes inherit their parent's label suffixed "-unlabeled"
    (plus the cluster id when needed to keep sibling labels unique);
    explicitly duplicated sibling labels are an error.
    """
    raw: dict[int, str] = {}
    with open(labels_file, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        id_col = header.index("cluster_id")
        label_col = header.index("label")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            cid = int(fields[id_col])
            if cid not in tree.nodes:
                raise UnknownClusterId(f"cluster_id {cid} not in the tree")
            label = fields[label_col].strip() if len(fields) > label_col else ""
            if label:
                raw[cid] = label
    tree.nodes[tree.root_id].label = raw.get(tree.root_id, root_label)
    for cid in sorted(tree.nodes):
        if cid == tree.root_id:
            continue
        node = tree.nodes[cid]
        parent_label = tree.nodes[node.parent_id].label
        node.label = raw.get(cid) or f"{parent_label}-unlabeled"
    # disambiguate implicit duplicates; explicit ones are errors
    by_parent: dict[int | None, dict[str, list[int]]] = {}
    for cid, node in tree.nodes.items():
        if cid == tree.root_id:
            continue
        by_parent.setdefault(node.parent_id, {}).setdefault(node.label, []).append(cid)
    for siblings in by_parent.values():
        for label, cids in siblings.items():
            if len(cids) < 2:
                continue
            explicit = [c for c in cids if c in raw]
            if len(explicit) > 1:
                raise DuplicateLabelAmongSiblings(
                    f"label {label!r} used by sibling clusters {explicit}"
                )
            for c in cids:
                if c not in raw:
                    tree.nodes[c].label = f"{label}-{c}"
    return tree


# -- full pipeline ---------------------------------------------------------------

@dataclass
class RecatConfig:
    image_modality: str = "image"
    filter_k: int = 4
    filter_threshold: float | None = None
    depth_plan: list[DepthSpec] = field(default_factory=lambda: [DepthSpec(n_clusters=2)])
    exemplars_per_cluster: int = 5
    seed: int = 0
    max_depth_limit: int | None = None


@dataclass
class RecatResult:
    taxonomy: Taxonomy
    bundle: EmbeddingBundle
    tree: ClusterTree
    filter_report: FilterReport
    member_indices: np.ndarray     # bundle rows under the target node
    kept_indices: np.ndarray       # bundle rows that were clustered


def discover(bundle: EmbeddingBundle, target_node: int, config: RecatConfig):
    """Filter + cascade-cluster the records under a taxonomy node.

    Returns (tree, filter_report, member_indices, kept_indices); the tree
    is unlabeled and ready for export_clusters.
    """
    tax = bundle.taxonomy
    tax.node(target_node)  # raises UnknownNode
    target_closure_member = []
    for i, label in enumerate(bundle.labels):
        nid = tax.resolve(label)
        if nid is not None and target_node in tax.ancestor_closure(nid):
            target_closure_member.append(i)
    member_indices = np.array(target_closure_member, dtype=int)
    if len(member_indices) == 0:
        raise EmptyInput(f"no records under node {target_node}")
    X = bundle.modality(config.image_modality)[member_indices]
    k = min(config.filter_k, len(member_indices))
    report = filter_records(X, k, seed=config.seed, threshold=config.filter_threshold)
    kept_local = report.kept_indices
    kept_indices = member_indices[kept_local]
    if len(kept_indices) == 0:
        raise EmptyInput("coherence filter discarded every record")
    tree = cascade_cluster(
        X[kept_local], config.depth_plan, exemplars_per_cluster=config.exemplars_per_cluster
    )
    if len(tree.nodes) == 1:
        log.warning("cascade clustering found no subdivisions of node %d", target_node)
    return tree, report, member_indices, kept_indices


def recategorize_run(
    bundle: EmbeddingBundle,
    target_node: int,
    config: RecatConfig,
    labels_file=None,
    tree: ClusterTree | None = None,
    precomputed=None,
) -> RecatResult:
    """End-to-end: discover (or reuse) a labeled cluster tree, graft the
    new subcategories under the target node, and rewrite member labels.

    Records outside the target subtree, and filtered-out records inside
    it, keep their original labels.
    """
    tax = bundle.taxonomy
    target_name = tax.node(target_node).name
    if precomputed is not None:
        tree, report, member_indices, kept_indices = precomputed
    else:
        tree, report, member_indices, kept_indices = discover(bundle, target_node, config)
    if not tree.labeled():
        if labels_file is None:
            raise LabelsMissing(
                "cluster tree is unlabeled; export it, annotate, and pass labels_file"
            )
        import_labels(tree, labels_file, root_label=target_name)
    # relative paths for the graft: one per cluster node, root excluded
    rel_paths: dict[int, CategoryPath] = {}
    for cid in sorted(tree.nodes):
        if cid == tree.root_id:
            continue
        node = tree.nodes[cid]
        if node.parent_id == tree.root_id:
            segs = (node.label,)
        else:
            segs = rel_paths[node.parent_id].segments + (node.label,)
        rel_paths[cid] = CategoryPath(segs)
    new_tax = tax.graft(
        target_node,
        [rel_paths[n.cluster_id] for n in tree.leaves() if n.cluster_id != tree.root_id],
        max_depth_limit=config.max_depth_limit,
    )
    target_path = tax.node_path(target_node)
    new_labels = list(bundle.labels)
    leaf_of = tree.leaf_of_position()
    for local_pos, bundle_row in enumerate(kept_indices):
        leaf_id = leaf_of[local_pos]
        if leaf_id == tree.root_id:
            continue
        rel = rel_paths[leaf_id]
        new_labels[bundle_row] = CategoryPath(target_path.segments + rel.segments)
    new_bundle = bundle.replace_labels(new_labels, new_tax)
    return RecatResult(
        taxonomy=new_tax,
        bundle=new_bundle,
        tree=tree,
        filter_report=report,
        member_indices=member_indices,
        kept_indices=kept_indices,
    )
