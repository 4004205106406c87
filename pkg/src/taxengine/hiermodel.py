"""Hierarchical classifier: shared trunk, chained per-level heads, dynamic
masking, training loop, and greedy path decoding.

Level 1 is assumed constant (a single root category), so prediction starts
at level 2. Each head consumes the shared trunk features concatenated with
the previous level's probability vector; gradients flow through that
concatenation as well as through each level's cross-entropy term.

Masking mode ON constrains every softmax to the children of the relevant
parent (the ground-truth parent during training, i.e. teacher forcing, and
the argmax-predicted parent at inference), which makes every decoded path
taxonomically valid by construction. Mode OFF disables masks everywhere
and serves as the ablation control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .checkpoint import load_checkpoint, save_checkpoint
from .datastore import EmbeddingBundle, SplitAssignment
from .errors import (
    DepthTooShallow,
    LabelOutsideTaxonomy,
    MultipleRoots,
    UnknownNode,
)
from .fusion import Fusion, FusionConfig
from .kernels import (
    Adam,
    BatchNormLayer,
    DenseLayer,
    DropoutLayer,
    INFER_MODE,
    Parameter,
    ReluLayer,
    TRAIN_MODE,
    softmax,
    softmax_backward,
    zero_grads,
)
from .taxonomy import CategoryPath, Taxonomy

MASK_ON = "ON"
MASK_OFF = "OFF"

MASK_BIAS = -1e9

# sentinel parent id meaning "the path already ended above this level"
_STOPPED = -1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 60
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
        }


@dataclass
class PathPrediction:
    """Greedy decode of one record.

    Choices and probabilities cover every head level; the assembled path
    and the confidence product stop at the first STOP decision.
    """

    path: CategoryPath
    level_choices: dict[int, int]          # level -> chosen class position
    level_confidences: dict[int, float]    # level -> max probability
    level_probs: dict[int, np.ndarray]
    decoded_levels: tuple[int, ...]        # levels up to and incl. the STOP choice

    @property
    def path_confidence(self) -> float:
        out = 1.0
        for lvl in self.decoded_levels:
            out *= self.level_confidences[lvl]
        return out


class _Block:
    """dense -> ReLU -> batchnorm -> dropout, the unit the trunk and every
    head are built from."""

    def __init__(self, in_dim, width, dropout, bn_momentum, rng, name):
        self.dense = DenseLayer(in_dim, width, rng, name=f"{name}.dense")
        self.relu = ReluLayer()
        self.bn = BatchNormLayer(width, momentum=bn_momentum, name=f"{name}.bn")
        self.dropout = DropoutLayer(dropout)
        self.name = name

    @property
    def params(self):
        return self.dense.params + self.bn.params

    def forward(self, X, mode, drop_rng=None):
        h = self.bn.forward(self.relu.forward(self.dense.forward(X)), mode)
        return self.dropout.forward(h, mode, rng=drop_rng)

    def backward(self, dY):
        return self.dense.backward(
            self.relu.backward(self.bn.backward(self.dropout.backward(dY)))
        )

    def stat_tensors(self):
        return {
            f"{self.name}.bn.running_mean": self.bn.running_mean,
            f"{self.name}.bn.running_var": self.bn.running_var,
        }


class _Head:
    """Per-level block plus the softmax classifier layer."""

    def __init__(self, in_dim, width, n_classes, dropout, bn_momentum, rng, name):
        self.block = _Block(in_dim, width, dropout, bn_momentum, rng, name)
        self.classify = DenseLayer(width, n_classes, rng, name=f"{name}.classify")

    @property
    def params(self):
        return self.block.params + self.classify.params

    def forward(self, X, mode, drop_rng=None):
        return self.classify.forward(self.block.forward(X, mode, drop_rng))

    def backward(self, d_logits):
        return self.block.backward(self.classify.backward(d_logits))


class HierModel:
    """Built by :func:`build_model`; see the module docstring."""

    def __init__(
        self,
        taxonomy: Taxonomy,
        fusion_cfg: FusionConfig,
        seed: int,
        masking: str = MASK_ON,
        trunk_width: int = 512,
        head_width: int = 256,
        dropout: float = 0.3,
        bn_momentum: float = 0.9,
    ):
        if taxonomy.max_depth < 2:
            raise DepthTooShallow("hierarchical model needs max_depth >= 2")
        if len(taxonomy.roots) != 1:
            raise MultipleRoots(
                "the classifier assumes a constant level-1 category; "
                f"taxonomy has {len(taxonomy.roots)} roots"
            )
        if masking not in (MASK_ON, MASK_OFF):
            raise ValueError(f"masking must be ON or OFF, got {masking!r}")
        self.taxonomy = taxonomy
        self.masking = masking
        self.seed = seed
        self.trunk_width = trunk_width
        self.head_width = head_width
        self.dropout = dropout
        self.bn_momentum = bn_momentum
        self.root = taxonomy.roots[0]
        init_rng = rngmod.stream(seed, rngmod.STREAM_INIT)
        self.fusion = Fusion(fusion_cfg, init_rng)
        self.trunk = _Block(self.fusion.output_dim, trunk_width, dropout, bn_momentum,
                            init_rng, name="trunk")
        self.levels = list(range(2, taxonomy.max_depth + 1))
        self.heads: dict[int, _Head] = {}
        for lvl in self.levels:
            in_dim = trunk_width
            if lvl > 2:
                in_dim += taxonomy.level_size(lvl - 1)
            self.heads[lvl] = _Head(
                in_dim, head_width, taxonomy.level_size(lvl), dropout, bn_momentum,
                init_rng, name=f"head{lvl}",
            )
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}
        self._backward_state = None

    # -- parameters -------------------------------------------------------

    @property
    def params(self) -> list[Parameter]:
        out = list(self.fusion.params) + list(self.trunk.params)
        for lvl in self.levels:
            out.extend(self.heads[lvl].params)
        return out

    def _all_tensors(self) -> dict[str, np.ndarray]:
        tensors = {p.name: p.value for p in self.params}
        tensors.update(self.trunk.stat_tensors())
        for lvl in self.levels:
            tensors.update(self.heads[lvl].block.stat_tensors())
        return tensors

    # -- masking ----------------------------------------------------------

    def _mask_bias_row(self, level: int, parent: int) -> np.ndarray:
        """Additive logit bias (0 allowed / -1e9 masked) for one parent."""
        key = (level, parent)
        row = self._mask_cache.get(key)
        if row is None:
            if parent == _STOPPED:
                bits = self.taxonomy.stop_only_mask(level).bits
            else:
                bits = self.taxonomy.children_mask(parent).bits
            row = np.where(np.array(bits, dtype=bool), 0.0, MASK_BIAS)
            self._mask_cache[key] = row
        return row

    def _mask_bias(self, level: int, parents: np.ndarray) -> np.ndarray:
        return np.stack([self._mask_bias_row(level, int(p)) for p in parents])

    # -- forward / backward -------------------------------------------------

    def forward(
        self,
        inputs: dict[str, np.ndarray],
        mode: str = INFER_MODE,
        teacher_parents: dict[int, np.ndarray] | None = None,
        drop_rng: np.random.Generator | None = None,
        train_stats: bool | None = None,
    ) -> dict[int, np.ndarray]:
        """Per-level probability vectors for a batch.

        `teacher_parents` (level -> parent node id per record) switches the
        masks to ground truth; otherwise masks follow the argmax chain.
        `train_stats` lets validation use running batchnorm statistics
        while keeping teacher-forced masks.
        """
        if train_stats is None:
            train_stats = mode == TRAIN_MODE
        stat_mode = TRAIN_MODE if train_stats else INFER_MODE
        fused = self.fusion.forward(inputs)
        trunk_out = self.trunk.forward(fused, stat_mode, drop_rng)
        batch = trunk_out.shape[0]
        probs: dict[int, np.ndarray] = {}
        state = {"fused": fused, "head_inputs": {}, "probs": probs, "batch": batch}
        pred_parents = np.full(batch, self.root, dtype=int)
        for lvl in self.levels:
            if lvl == 2:
                head_in = trunk_out
            else:
                head_in = np.concatenate([trunk_out, probs[lvl - 1]], axis=1)
            state["head_inputs"][lvl] = head_in
            logits = self.heads[lvl].forward(head_in, stat_mode, drop_rng)
            if self.masking == MASK_ON:
                if teacher_parents is not None:
                    parents = teacher_parents[lvl]
                else:
                    parents = pred_parents
                logits = logits + self._mask_bias(lvl, parents)
            p = softmax(logits, axis=1)
            probs[lvl] = p
            if self.masking == MASK_ON and teacher_parents is None and lvl < self.levels[-1]:
                pred_parents = self._next_parents(lvl, p)
        self._backward_state = state
        return probs

    def _next_parents(self, level: int, p: np.ndarray) -> np.ndarray:
        """Map argmax choices at `level` to parent ids for level+1."""
        choices = p.argmax(axis=1)
        stop_pos = self.taxonomy.stop_position(level)
        index = self.taxonomy.level_index(level)
        out = np.empty(len(choices), dtype=int)
        for i, c in enumerate(choices):
            out[i] = _STOPPED if c == stop_pos else index[c]
        return out

    def backward(self, d_logits_extra: dict[int, np.ndarray],
                 ce_targets: dict[int, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Backpropagate from per-level gradients.

        `d_logits_extra[lvl]` is the cross-entropy gradient with respect to
        the (masked) logits, typically (p - onehot)/batch. Gradient flowing
        into a level's probability vector from the next head's input is
        routed through the softmax Jacobian automatically.
        """
        state = self._backward_state
        probs = state["probs"]
        d_trunk = None
        d_probs_from_next: np.ndarray | None = None
        for lvl in reversed(self.levels):
            d_logits = d_logits_extra[lvl].copy()
            if d_probs_from_next is not None:
                d_logits += softmax_backward(probs[lvl], d_probs_from_next, axis=1)
            d_head_in = self.heads[lvl].backward(d_logits)
            d_trunk_piece = d_head_in[:, : self.trunk_width]
            d_trunk = d_trunk_piece if d_trunk is None else d_trunk + d_trunk_piece
            d_probs_from_next = d_head_in[:, self.trunk_width :] if lvl > 2 else None
        d_fused = self.trunk.backward(d_trunk)
        return self.fusion.backward(d_fused)

    # -- label plumbing -----------------------------------------------------

    def _label_nodes(self, label: CategoryPath) -> list[int]:
        nid = self.taxonomy.resolve(label)
        if nid is None or not self.taxonomy.validate_path(label):
            raise LabelOutsideTaxonomy(f"label {label.join()!r} not in the model taxonomy")
        chain = []
        cur: int | None = nid
        while cur is not None:
            chain.append(cur)
            cur = self.taxonomy.node(cur).parent_id
        return list(reversed(chain))

    def encode_labels(
        self, labels: list[CategoryPath]
    ) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
        """Targets (class positions) and teacher parents per level."""
        n = len(labels)
        targets = {lvl: np.empty(n, dtype=int) for lvl in self.levels}
        parents = {lvl: np.empty(n, dtype=int) for lvl in self.levels}
        for i, label in enumerate(labels):
            chain = self._label_nodes(label)
            if self.taxonomy.node(chain[0]).node_id != self.root:
                raise LabelOutsideTaxonomy(
                    f"label {label.join()!r} does not start at the model root"
                )
            for lvl in self.levels:
                if lvl <= len(chain):
                    node = chain[lvl - 1]
                    targets[lvl][i] = self.taxonomy.class_position(node)
                    parents[lvl][i] = chain[lvl - 2]
                elif lvl == len(chain) + 1:
                    targets[lvl][i] = self.taxonomy.stop_position(lvl)
                    parents[lvl][i] = chain[-1]
                else:
                    targets[lvl][i] = self.taxonomy.stop_position(lvl)
                    parents[lvl][i] = _STOPPED
        return targets, parents

    def loss_and_ce_grads(
        self, probs: dict[int, np.ndarray], targets: dict[int, np.ndarray]
    ) -> tuple[float, dict[int, np.ndarray]]:
        batch = next(iter(probs.values())).shape[0]
        rows = np.arange(batch)
        total = 0.0
        grads = {}
        for lvl in self.levels:
            p = probs[lvl]
            t = targets[lvl]
            picked = np.maximum(p[rows, t], 1e-300)
            total += float(-np.log(picked).mean())
            g = p.copy()
            g[rows, t] -= 1.0
            grads[lvl] = g / batch
        return total, grads

    # -- decoding -------------------------------------------------------------

    def predict_batch(self, inputs: dict[str, np.ndarray]) -> list[PathPrediction]:
        probs = self.forward(inputs, mode=INFER_MODE)
        batch = next(iter(probs.values())).shape[0]
        out = []
        root_name = self.taxonomy.node(self.root).name
        for i in range(batch):
            names = [root_name]
            choices: dict[int, int] = {}
            confs: dict[int, float] = {}
            pvecs: dict[int, np.ndarray] = {}
            decoded: list[int] = []
            stopped = False
            for lvl in self.levels:
                p = probs[lvl][i]
                c = int(p.argmax())
                choices[lvl] = c
                confs[lvl] = float(p[c])
                pvecs[lvl] = p
                if not stopped:
                    decoded.append(lvl)
                    if c == self.taxonomy.stop_position(lvl):
                        stopped = True
                    else:
                        entry = self.taxonomy.level_index(lvl)[c]
                        names.append(self.taxonomy.node(entry).name)
            out.append(
                PathPrediction(
                    path=CategoryPath(tuple(names)),
                    level_choices=choices,
                    level_confidences=confs,
                    level_probs=pvecs,
                    decoded_levels=tuple(decoded),
                )
            )
        return out

    def predict_bundle(self, bundle: EmbeddingBundle, batch_size: int = 512) -> list[PathPrediction]:
        needed = self.fusion.cfg.modalities
        out: list[PathPrediction] = []
        for start in range(0, bundle.n, batch_size):
            stop = min(start + batch_size, bundle.n)
            inputs = {m: bundle.modality(m)[start:stop] for m in needed}
            out.extend(self.predict_batch(inputs))
        return out

    # -- persistence ------------------------------------------------------------

    def save(self, path, train_cfg: TrainConfig | None = None,
             extra_meta: dict | None = None) -> None:
        meta = {
            "kind": "hiermodel",
            "fusion": self.fusion.cfg.to_json(),
            "masking": self.masking,
            "seed": self.seed,
            "trunk_width": self.trunk_width,
            "head_width": self.head_width,
            "dropout": self.dropout,
            "bn_momentum": self.bn_momentum,
            "taxonomy_hash": self.taxonomy.content_hash(),
            "taxonomy_nodes": self.taxonomy.node_table(),
            "train_config": train_cfg.to_json() if train_cfg else None,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self._all_tensors(), meta)

    @classmethod
    def load(cls, path) -> "HierModel":
        tensors, meta = load_checkpoint(path)
        taxonomy = Taxonomy.from_node_table(meta["taxonomy_nodes"])
        model = cls(
            taxonomy,
            FusionConfig.from_json(meta["fusion"]),
            seed=meta["seed"],
            masking=meta["masking"],
            trunk_width=meta["trunk_width"],
            head_width=meta["head_width"],
            dropout=meta["dropout"],
            bn_momentum=meta["bn_momentum"],
        )
        own = model._all_tensors()
        for name, arr in own.items():
            arr[...] = tensors[name]   # extra tensors (e.g. pca.*) stay on disk
        return model


def build_model(
    taxonomy: Taxonomy,
    fusion_cfg: FusionConfig,
    seed: int = 0,
    masking: str = MASK_ON,
    **widths,
) -> HierModel:
    """He-uniform initialized model; same seed, same bits."""
    return HierModel(taxonomy, fusion_cfg, seed=seed, masking=masking, **widths)


def apply_dynamic_mask(logits: np.ndarray, parent: int, taxonomy: Taxonomy) -> np.ndarray:
    """Masked softmax over one level's logits given the parent node.

    Non-children end up with probability exactly zero; survivors renormalize.
    """
    pnode = taxonomy.node(parent)   # raises UnknownNode
    bits = taxonomy.children_mask(parent).bits
    if len(bits) != len(logits):
        raise UnknownNode(
            f"logits width {len(logits)} != level {pnode.level + 1} size {len(bits)}"
        )
    bias = np.where(np.array(bits, dtype=bool), 0.0, MASK_BIAS)
    return softmax(np.asarray(logits, dtype=np.float64) + bias)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_hf: float


def train(
    model: HierModel,
    bundle: EmbeddingBundle,
    split: SplitAssignment,
    cfg: TrainConfig,
) -> list[EpochStats]:
    """Adam + early stopping on validation loss; restores the best epoch.

    Deterministic for a fixed seed: shuffles and dropout masks come from
    counter-based streams, and batches are processed in a fixed order.
    """
    from .metrics import hierarchical_metrics

    needed = model.fusion.cfg.modalities
    targets, parents = model.encode_labels(bundle.labels)
    train_idx = split.indices("TRAIN")
    val_idx = split.indices("VAL")
    shuffle_rng = rngmod.stream(cfg.seed, rngmod.STREAM_SHUFFLE)
    drop_rng = rngmod.stream(cfg.seed, rngmod.STREAM_DROPOUT)
    optimizer = Adam(model.params, lr=cfg.learning_rate)
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_tensors: dict[str, np.ndarray] | None = None
    val_truths = [bundle.labels[i] for i in val_idx]

    def subset(idx_chunk):
        ins = {m: bundle.modality(m)[idx_chunk] for m in needed}
        t = {lvl: targets[lvl][idx_chunk] for lvl in model.levels}
        par = {lvl: parents[lvl][idx_chunk] for lvl in model.levels}
        return ins, t, par

    def eval_val_loss() -> float:
        if len(val_idx) == 0:
            return float("nan")
        total, count = 0.0, 0
        for start in range(0, len(val_idx), 512):
            chunk = val_idx[start : start + 512]
            ins, t, par = subset(chunk)
            probs = model.forward(ins, mode=INFER_MODE, teacher_parents=par,
                                  train_stats=False)
            loss, _ = model.loss_and_ce_grads(probs, t)
            total += loss * len(chunk)
            count += len(chunk)
        return total / count

    def eval_val_hf() -> float:
        if len(val_idx) == 0:
            return float("nan")
        preds = []
        for start in range(0, len(val_idx), 512):
            chunk = val_idx[start : start + 512]
            ins = {m: bundle.modality(m)[chunk] for m in needed}
            preds.extend(pp.path for pp in model.predict_batch(ins))
        try:
            res = hierarchical_metrics(model.taxonomy, preds, val_truths,
                                       on_invalid="prefix")
            return res.hf
        except Exception:
            return float("nan")

    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx.copy()
        shuffle_rng.shuffle(order)
        epoch_loss, seen = 0.0, 0
        batches = _batch_slices(len(order), cfg.batch_size)
        for lo, hi in batches:
            chunk = order[lo:hi]
            ins, t, par = subset(chunk)
            probs = model.forward(ins, mode=TRAIN_MODE, teacher_parents=par,
                                  drop_rng=drop_rng)
            loss, ce_grads = model.loss_and_ce_grads(probs, t)
            zero_grads(model.params)
            model.backward(ce_grads)
            optimizer.step()
            epoch_loss += loss * len(chunk)
            seen += len(chunk)
        train_loss = epoch_loss / seen
        val_loss = eval_val_loss()
        val_hf = eval_val_hf()
        history.append(EpochStats(epoch, train_loss, val_loss, val_hf))
        monitored = train_loss if np.isnan(val_loss) else val_loss
        if monitored < best_val:
            best_val = monitored
            best_epoch = epoch
            best_tensors = {k: v.copy() for k, v in model._all_tensors().items()}
        elif epoch - best_epoch >= cfg.patience:
            break
    if best_tensors is not None:
        own = model._all_tensors()
        for name, arr in best_tensors.items():
            own[name][...] = arr
    return history


def _batch_slices(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous batch bounds; a trailing single record folds into the
    previous batch so batchnorm always sees >= 2 rows."""
    bounds = []
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        if n - stop == 1:
            stop = n
        bounds.append((start, stop))
        start = stop
    return bounds


def evaluate(model: HierModel, bundle: EmbeddingBundle, indices=None):
    """MetricsReport over a bundle subset: per-level flat scores from the
    raw head choices, hierarchical scores from the assembled paths."""
    from .metrics import MetricsReport, flat_metrics, hierarchical_metrics

    if indices is None:
        indices = np.arange(bundle.n)
    labels = [bundle.labels[i] for i in indices]
    inputs_all = {m: bundle.modality(m)[indices] for m in model.fusion.cfg.modalities}
    preds: list[PathPrediction] = []
    for start in range(0, len(indices), 512):
        chunk = {m: mat[start : start + 512] for m, mat in inputs_all.items()}
        preds.extend(model.predict_batch(chunk))
    targets, _ = model.encode_labels(labels)
    per_level = {}
    for lvl in model.levels:
        choice = [p.level_choices[lvl] for p in preds]
        per_level[lvl] = flat_metrics(choice, targets[lvl], model.taxonomy.level_size(lvl))
    on_invalid = "raise" if model.masking == MASK_ON else "prefix"
    hier = hierarchical_metrics(
        model.taxonomy, [p.path for p in preds], labels, on_invalid=on_invalid
    )
    return MetricsReport(
        per_level=per_level,
        hierarchical=hier,
        n_examples=len(labels),
        masking=model.masking,
    )
