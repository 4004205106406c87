"""Run configuration: a JSON document with per-command sections.

Unknown keys are rejected rather than ignored so a typo never silently
changes a run. Flag overrides (seed, threshold, masking, output dir) are
applied after parsing; commands log the fully-resolved document.
"""

from __future__ import annotations

import json

from .errors import ConfigError
from .fusion import DEFAULT_ATTENTION_PAIRS, FusionConfig
from .hiermodel import TrainConfig
from .recategorize import DepthSpec, RecatConfig, ReducerConfig

_SECTIONS = {
    "data": {"bundle", "split_seed", "fractions", "pca"},
    "model": {
        "fusion",
        "modalities",
        "late_widths",
        "joint_width",
        "use_joint",
        "attention_pairs",
        "attention_dim",
        "trunk_width",
        "head_width",
        "dropout",
        "bn_momentum",
        "masking",
    },
    "train": {"learning_rate", "batch_size", "max_epochs", "patience", "seed"},
    "synth": {"taxonomy", "per_leaf", "dims", "noise", "seed", "out", "anchor_prefix_level"},
    "recat": {
        "bundle",
        "target",
        "image_modality",
        "filter_k",
        "filter_threshold",
        "depth_plan",
        "exemplars_per_cluster",
        "seed",
        "labels_file",
        "export_file",
        "max_depth_limit",
    },
    "cascade": {"stage1", "stage2", "bundle", "tau", "confidence", "grid"},
}

_PCA_KEYS = {"modalities", "variance_target"}
_DEPTH_KEYS = {"linkage", "n_clusters", "distance_threshold", "reducer"}
_REDUCER_KEYS = {"method", "target_dim", "variance_target", "external_file"}


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(doc)
    return doc


def validate_config(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key in body:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    pca = doc.get("data", {}).get("pca")
    if pca is not None:
        _check_keys(pca, _PCA_KEYS, "data.pca")
    for i, spec in enumerate(doc.get("recat", {}).get("depth_plan", []) or []):
        _check_keys(spec, _DEPTH_KEYS, f"recat.depth_plan[{i}]")
        reducer = spec.get("reducer")
        if reducer is not None:
            _check_keys(reducer, _REDUCER_KEYS, f"recat.depth_plan[{i}].reducer")


def _check_keys(body, allowed, where):
    if not isinstance(body, dict):
        raise ConfigError(f"{where} must be an object")
    for key in body:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}")


def require(doc: dict, section: str, key: str):
    try:
        return doc[section][key]
    except KeyError:
        raise ConfigError(f"config needs {section}.{key}") from None


def fusion_config_from(model: dict, dims: dict[str, int]) -> FusionConfig:
    modalities = model.get("modalities") or sorted(dims)
    for m in modalities:
        if m not in dims:
            raise ConfigError(f"model.modalities entry {m!r} is not in the bundle")
    return FusionConfig(
        strategy=model.get("fusion", "LATE"),
        modalities=tuple(modalities),
        dims={m: dims[m] for m in modalities},
        late_widths=dict(model.get("late_widths", {})),
        joint_width=model.get("joint_width"),
        use_joint=model.get("use_joint", True),
        attention_pairs=tuple(
            tuple(p) for p in model.get("attention_pairs", DEFAULT_ATTENTION_PAIRS)
        ),
        attention_dim=model.get("attention_dim", 64),
    )


def train_config_from(train: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=train.get("learning_rate", 1e-3),
        batch_size=train.get("batch_size", 128),
        max_epochs=train.get("max_epochs", 60),
        patience=train.get("patience", 5),
        seed=train.get("seed", 0),
    )


def recat_config_from(recat: dict) -> RecatConfig:
    plan = []
    for spec in recat.get("depth_plan", [{"n_clusters": 2}]):
        reducer = spec.get("reducer") or {}
        plan.append(
            DepthSpec(
                linkage=spec.get("linkage", "WARD"),
                n_clusters=spec.get("n_clusters"),
                distance_threshold=spec.get("distance_threshold"),
                reducer=ReducerConfig(
                    method=reducer.get("method", "PCA"),
                    target_dim=reducer.get("target_dim"),
                    variance_target=reducer.get("variance_target"),
                    external_file=reducer.get("external_file"),
                ),
            )
        )
    return RecatConfig(
        image_modality=recat.get("image_modality", "image"),
        filter_k=recat.get("filter_k", 4),
        filter_threshold=recat.get("filter_threshold"),
        depth_plan=plan,
        exemplars_per_cluster=recat.get("exemplars_per_cluster", 5),
        seed=recat.get("seed", 0),
        max_depth_limit=recat.get("max_depth_limit"),
    )
