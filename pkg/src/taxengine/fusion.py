"""Fusion of per-modality embeddings into one joint vector.

Three strategies: EARLY concatenates raw embeddings; LATE transforms each
modality through its own dense+ReLU before concatenation (optionally
followed by a joint dense+ReLU); ATTENTION runs cross attention over
configured modality pairs, concatenates the attention outputs with the
original embeddings, and projects through a dense+ReLU.

Modalities are always processed in a canonical order so permuting the
input map never changes the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, MissingModality, UnknownModality
from .kernels import AttentionBlock, DenseLayer, Parameter, ReluLayer

EARLY = "EARLY"
LATE = "LATE"
ATTENTION = "ATTENTION"

# title and brand are textual, image visual; anything else sorts after
_CANONICAL = {"title": 0, "brand": 1, "image": 2}

DEFAULT_ATTENTION_PAIRS = (("brand", "image"), ("title", "image"))


def canonical_order(names) -> tuple[str, ...]:
    return tuple(sorted(names, key=lambda n: (_CANONICAL.get(n, len(_CANONICAL)), n)))


@dataclass
class FusionConfig:
    strategy: str
    modalities: tuple[str, ...]          # canonical order, fixed at creation
    dims: dict[str, int]                 # input dim per modality
    late_widths: dict[str, int] = field(default_factory=dict)
    joint_width: int | None = None
    use_joint: bool = True
    attention_pairs: tuple[tuple[str, str], ...] = DEFAULT_ATTENTION_PAIRS
    attention_dim: int = 64

    def __post_init__(self):
        self.modalities = canonical_order(self.modalities)
        if self.strategy not in (EARLY, LATE, ATTENTION):
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        for m in self.modalities:
            if m not in self.dims:
                raise MissingModality(f"no dim recorded for modality {m!r}")

    @property
    def output_dim(self) -> int:
        """Joint vector width; a function of the config alone."""
        if self.strategy == EARLY:
            return sum(self.dims[m] for m in self.modalities)
        if self.strategy == LATE:
            width = sum(self.late_widths.get(m, 256) for m in self.modalities)
            if self.use_joint:
                return self.joint_width or 512
            return width
        return self.joint_width or 512

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "modalities": list(self.modalities),
            "dims": {m: self.dims[m] for m in self.modalities},
            "late_widths": dict(self.late_widths),
            "joint_width": self.joint_width,
            "use_joint": self.use_joint,
            "attention_pairs": [list(p) for p in self.attention_pairs],
            "attention_dim": self.attention_dim,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FusionConfig":
        return cls(
            strategy=doc["strategy"],
            modalities=tuple(doc["modalities"]),
            dims=dict(doc["dims"]),
            late_widths=dict(doc.get("late_widths", {})),
            joint_width=doc.get("joint_width"),
            use_joint=doc.get("use_joint", True),
            attention_pairs=tuple(tuple(p) for p in doc.get("attention_pairs", DEFAULT_ATTENTION_PAIRS)),
            attention_dim=doc.get("attention_dim", 64),
        )


def unimodal_config(modality: str | tuple[str, ...], dims: dict[str, int]) -> FusionConfig:
    """EARLY passthrough over one modality (or a subset, e.g. the two
    textual attributes), so single-modality benchmarks reuse the trunk."""
    names = (modality,) if isinstance(modality, str) else tuple(modality)
    for m in names:
        if m not in dims:
            raise UnknownModality(f"{m!r} is not a bundle modality")
    return FusionConfig(strategy=EARLY, modalities=names, dims={m: dims[m] for m in names})


class Fusion:
    """Differentiable fusion subgraph built from a FusionConfig."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: list[Parameter] = []
        self._late_layers: dict[str, tuple[DenseLayer, ReluLayer]] = {}
        self._attn: list[tuple[tuple[str, str], AttentionBlock]] = []
        self._joint: DenseLayer | None = None
        self._joint_relu = ReluLayer()
        if cfg.strategy == LATE:
            for m in cfg.modalities:
                layer = DenseLayer(cfg.dims[m], cfg.late_widths.get(m, 256), rng,
                                   name=f"fusion.{m}")
                self._late_layers[m] = (layer, ReluLayer())
                self.params.extend(layer.params)
            if cfg.use_joint:
                concat = sum(cfg.late_widths.get(m, 256) for m in cfg.modalities)
                self._joint = DenseLayer(concat, cfg.joint_width or 512, rng, name="fusion.joint")
                self.params.extend(self._joint.params)
        elif cfg.strategy == ATTENTION:
            for pair in cfg.attention_pairs:
                q, kv = pair
                if q not in cfg.dims or kv not in cfg.dims:
                    raise UnknownModality(f"attention pair {pair} not in modalities")
                block = AttentionBlock(cfg.dims[q], cfg.dims[kv], cfg.attention_dim, rng,
                                       name=f"fusion.attn.{q}-{kv}")
                self._attn.append((pair, block))
                self.params.extend(block.params)
            concat = cfg.attention_dim * len(cfg.attention_pairs) + sum(
                cfg.dims[m] for m in cfg.modalities
            )
            self._joint = DenseLayer(concat, cfg.joint_width or 512, rng, name="fusion.joint")
            self.params.extend(self._joint.params)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def _check_inputs(self, inputs: dict[str, np.ndarray]) -> None:
        for m in self.cfg.modalities:
            if m not in inputs:
                raise MissingModality(f"missing modality {m!r}")
            if inputs[m].shape[1] != self.cfg.dims[m]:
                raise DimMismatch(
                    f"{m}: expected dim {self.cfg.dims[m]}, got {inputs[m].shape[1]}"
                )

    def forward(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        self._check_inputs(inputs)
        cfg = self.cfg
        if cfg.strategy == EARLY:
            return np.concatenate([inputs[m] for m in cfg.modalities], axis=1)
        if cfg.strategy == LATE:
            pieces = []
            for m in cfg.modalities:
                dense, relu = self._late_layers[m]
                pieces.append(relu.forward(dense.forward(inputs[m])))
            concat = np.concatenate(pieces, axis=1)
            if self._joint is None:
                return concat
            return self._joint_relu.forward(self._joint.forward(concat))
        # ATTENTION
        pieces = [block.forward(inputs[q], inputs[kv]) for (q, kv), block in self._attn]
        pieces.extend(inputs[m] for m in cfg.modalities)
        concat = np.concatenate(pieces, axis=1)
        return self._joint_relu.forward(self._joint.forward(concat))

    def backward(self, d_out: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.cfg
        if cfg.strategy == EARLY:
            grads = {}
            offset = 0
            for m in cfg.modalities:
                grads[m] = d_out[:, offset : offset + cfg.dims[m]]
                offset += cfg.dims[m]
            return grads
        if cfg.strategy == LATE:
            if self._joint is not None:
                d_out = self._joint.backward(self._joint_relu.backward(d_out))
            grads = {}
            offset = 0
            for m in cfg.modalities:
                width = cfg.late_widths.get(m, 256)
                dense, relu = self._late_layers[m]
                grads[m] = dense.backward(relu.backward(d_out[:, offset : offset + width]))
                offset += width
            return grads
        # ATTENTION
        d_concat = self._joint.backward(self._joint_relu.backward(d_out))
        grads = {m: np.zeros((d_out.shape[0], cfg.dims[m])) for m in cfg.modalities}
        offset = 0
        for (q, kv), block in self._attn:
            d_piece = d_concat[:, offset : offset + cfg.attention_dim]
            d_xq, d_xkv = block.backward(d_piece)
            grads[q] += d_xq
            grads[kv] += d_xkv[:, 0, :]
            offset += cfg.attention_dim
        for m in cfg.modalities:
            grads[m] += d_concat[:, offset : offset + cfg.dims[m]]
            offset += cfg.dims[m]
        return grads

    def tensors(self, prefix: str = "fusion") -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.value[...] = tensors[p.name]
