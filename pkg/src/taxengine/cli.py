"""Command-line front door: train, eval, predict, recat, cascade, synth,
validate. Every command is config-driven and reproducible: identical
inputs and seeds give bit-identical primary outputs.

Diagnostics go to stderr; data (reports, TSVs) to stdout or --out files.
Exit codes: 0 success, 2 for bad inputs/config/validation failures.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click
import numpy as np

from . import cascade as cascade_mod
from . import config as cfgmod
from . import datastore, hiermodel, recategorize
from .errors import ConfigError, TaxEngineError
from .taxonomy import load_taxonomy, parse_path

log = logging.getLogger("taxengine")


def _setup_logging() -> None:
    level = os.environ.get("TAXENGINE_LOG", "error").lower()
    numeric = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level, logging.ERROR
    )
    logging.basicConfig(stream=sys.stderr, level=numeric,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(message: str, code: int = 2):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path) -> dict:
    if not path:
        _fail("--config is required for this command")
    if not os.path.exists(path):
        _fail(f"config file not found: {path}")
    return cfgmod.load_config(path)


def _load_bundle(path):
    if not path or not os.path.isdir(path):
        _fail(f"bundle directory not found: {path}")
    return datastore.load_bundle(path)


def _dump_json(doc: dict, out_path=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@click.group()
def main():
    """Taxonomy-aware hierarchical product categorization engine."""
    _setup_logging()


# -- train -------------------------------------------------------------------

def _fit_pca_spec(bundle, pca_section):
    """Optionally PCA-reduce configured modalities (image by default)."""
    if not pca_section:
        return bundle, {}
    names = pca_section.get("modalities", ["image"])
    target = pca_section.get("variance_target", 0.90)
    models = {}
    new_modalities = dict(bundle.modalities)
    for name in names:
        if name not in bundle.modalities:
            raise ConfigError(f"data.pca modality {name!r} not in bundle")
        model = datastore.pca_fit(bundle.modality(name), variance_target=target)
        new_modalities[name] = datastore.pca_transform(model, bundle.modality(name))
        models[name] = model
        log.info("pca: %s %d -> %d dims", name, bundle.dims()[name], model.k)
    reduced = datastore.EmbeddingBundle(
        modalities=new_modalities,
        labels=bundle.labels,
        record_ids=bundle.record_ids,
        taxonomy=bundle.taxonomy,
    )
    return reduced, models


def _pca_tensors(models) -> dict[str, np.ndarray]:
    tensors = {}
    for name, m in models.items():
        tensors[f"pca.{name}.mean"] = m.mean
        tensors[f"pca.{name}.components"] = m.components
    return tensors


def _apply_saved_pca(bundle, ckpt_dir):
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(ckpt_dir)
    names = meta.get("pca_modalities") or []
    if not names:
        return bundle
    new_modalities = dict(bundle.modalities)
    for name in names:
        mean = tensors[f"pca.{name}.mean"]
        comps = tensors[f"pca.{name}.components"]
        new_modalities[name] = (bundle.modality(name) - mean) @ comps.T
    return datastore.EmbeddingBundle(
        modalities=new_modalities,
        labels=bundle.labels,
        record_ids=bundle.record_ids,
        taxonomy=bundle.taxonomy,
    )


@main.command()
@click.option("--config", "config_path", type=str, required=True)
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--seed", type=int, default=None, help="override every configured seed")
@click.option("--mask", type=click.Choice(["on", "off"]), default=None)
def train(config_path, out_dir, seed, mask):
    """Train a hierarchical classifier and write checkpoint + metrics."""
    try:
        doc = _load_config(config_path)
        bundle = _load_bundle(cfgmod.require(doc, "data", "bundle"))
        model_sec = doc.get("model", {})
        train_sec = dict(doc.get("train", {}))
        data_sec = doc.get("data", {})
        if seed is not None:
            train_sec["seed"] = seed
            data_sec = dict(data_sec)
            data_sec["split_seed"] = seed
        masking = (mask or model_sec.get("masking", "on")).upper()
        resolved = dict(doc)
        resolved["data"] = data_sec
        resolved["train"] = train_sec
        resolved.setdefault("model", {})
        resolved["model"] = {**model_sec, "masking": masking}
        log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
        bundle, pca_models = _fit_pca_spec(bundle, data_sec.get("pca"))
        fusion_cfg = cfgmod.fusion_config_from(model_sec, bundle.dims())
        train_cfg = cfgmod.train_config_from(train_sec)
        split = datastore.stratified_split(
            bundle,
            fractions=tuple(data_sec.get("fractions", datastore.DEFAULT_FRACTIONS)),
            seed=data_sec.get("split_seed", 0),
        )
        model = hiermodel.build_model(
            bundle.taxonomy,
            fusion_cfg,
            seed=train_cfg.seed,
            masking=masking,
            trunk_width=model_sec.get("trunk_width", 512),
            head_width=model_sec.get("head_width", 256),
            dropout=model_sec.get("dropout", 0.3),
            bn_momentum=model_sec.get("bn_momentum", 0.9),
        )
        history = hiermodel.train(model, bundle, split, train_cfg)
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoint")
        extra = {"pca_modalities": sorted(pca_models)} if pca_models else None
        model.save(ckpt_dir, train_cfg=train_cfg, extra_meta=extra)
        if pca_models:
            # PCA models ride along inside the checkpoint tensor table
            from .checkpoint import load_checkpoint, save_checkpoint

            tensors, meta = load_checkpoint(ckpt_dir)
            tensors.update(_pca_tensors(pca_models))
            save_checkpoint(ckpt_dir, tensors, meta)
        _dump_json(
            {"seed": split.seed, "assignment": split.assignment},
            os.path.join(out_dir, "split.json"),
        )
        _dump_json(
            {
                "epochs": [
                    {
                        "epoch": h.epoch,
                        "train_loss": h.train_loss,
                        "val_loss": h.val_loss,
                        "val_hf": h.val_hf,
                    }
                    for h in history
                ]
            },
            os.path.join(out_dir, "history.json"),
        )
        report = hiermodel.evaluate(model, bundle, split.indices("TEST"))
        _dump_json(report.to_json(), os.path.join(out_dir, "metrics.json"))
        _dump_json(report.to_json())
    except TaxEngineError as exc:
        _fail(str(exc))


# -- eval / predict ---------------------------------------------------------------

@main.command("eval")
@click.argument("checkpoint", type=str)
@click.argument("bundle_path", type=str)
@click.option("--out", "out_path", type=str, default=None)
def eval_cmd(checkpoint, bundle_path, out_path):
    """Evaluate a checkpoint over a bundle; prints a MetricsReport JSON.

    Per-level scores are reported under both masking modes (decode with
    and without the dynamic masks); hP/hR/hF1 follow the model's own mode.
    """
    try:
        bundle = _load_bundle(bundle_path)
        if not os.path.isdir(checkpoint):
            _fail(f"checkpoint not found: {checkpoint}")
        model = hiermodel.HierModel.load(checkpoint)
        if model.taxonomy.content_hash() != bundle.taxonomy.content_hash():
            _fail("bundle taxonomy does not match the model's taxonomy")
        bundle = _apply_saved_pca(bundle, checkpoint)
        report = hiermodel.evaluate(model, bundle)
        doc = report.to_json()
        original = model.masking
        model.masking = "OFF" if original == "ON" else "ON"
        try:
            other = hiermodel.evaluate(model, bundle)
        finally:
            model.masking = original
        key = "levels_unmasked" if original == "ON" else "levels_masked"
        doc[key] = other.to_json()["levels"]
        _dump_json(doc, out_path)
        if out_path:
            click.echo(f"wrote {out_path}")
    except TaxEngineError as exc:
        _fail(str(exc))


@main.command()
@click.argument("checkpoint", type=str)
@click.argument("bundle_path", type=str)
@click.option("--out", "out_path", type=str, default=None)
def predict(checkpoint, bundle_path, out_path):
    """Predict paths for every record; TSV: id, path, confidence."""
    try:
        bundle = _load_bundle(bundle_path)
        if not os.path.isdir(checkpoint):
            _fail(f"checkpoint not found: {checkpoint}")
        model = hiermodel.HierModel.load(checkpoint)
        bundle = _apply_saved_pca(bundle, checkpoint)
        preds = model.predict_bundle(bundle)
        lines = [
            f"{rid}\t{p.path.join()}\t{p.path_confidence:.6g}"
            for rid, p in zip(bundle.record_ids, preds)
        ]
        text = "\n".join(lines) + "\n"
        if out_path:
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            click.echo(text, nl=False)
    except TaxEngineError as exc:
        _fail(str(exc))


# -- recategorization ---------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", type=str, required=True)
@click.option("--out", "out_dir", type=str, default=None)
@click.option("--seed", type=int, default=None)
def recat(config_path, out_dir, seed):
    """Discover subcategories under a node; export clusters for labeling,
    or graft + relabel when recat.labels_file is set."""
    try:
        doc = _load_config(config_path)
        recat_sec = dict(doc.get("recat", {}))
        if seed is not None:
            recat_sec["seed"] = seed
        log.info("resolved config: %s", json.dumps(doc, sort_keys=True))
        bundle = _load_bundle(recat_sec.get("bundle") or cfgmod.require(doc, "recat", "bundle"))
        target = recat_sec.get("target")
        if target is None:
            raise ConfigError("config needs recat.target")
        target_node = bundle.taxonomy.resolve(parse_path(str(target)))
        if target_node is None:
            _fail(f"recat.target {target!r} not found in the bundle taxonomy")
        config = cfgmod.recat_config_from(recat_sec)
        labels_file = recat_sec.get("labels_file")
        pre = recategorize.discover(bundle, target_node, config)
        tree, report, member_idx, kept_idx = pre
        export_file = recat_sec.get("export_file") or (
            os.path.join(out_dir, "clusters.tsv") if out_dir else "clusters.tsv"
        )
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        if not labels_file:
            # discovery phase: write the annotation file and stop
            kept_ids = [bundle.record_ids[i] for i in kept_idx]
            recategorize.export_clusters(tree, export_file, kept_ids)
            click.echo(f"wrote {export_file}", err=True)
            click.echo(
                json.dumps(
                    {
                        "clusters": len(tree.nodes) - 1,
                        "kept_records": int(len(kept_idx)),
                        "discarded_records": int(len(member_idx) - len(kept_idx)),
                        "export_file": export_file,
                    },
                    sort_keys=True,
                )
            )
            return
        result = recategorize.recategorize_run(
            bundle, target_node, config, labels_file=labels_file, precomputed=pre
        )
        if not out_dir:
            _fail("--out is required when grafting (labels_file set)")
        out_bundle = os.path.join(out_dir, "bundle")
        datastore.save_bundle(result.bundle, out_bundle)
        click.echo(
            json.dumps(
                {
                    "grafted_under": bundle.taxonomy.node_path(target_node).join(),
                    "new_classes": len(result.tree.nodes) - 1,
                    "relabeled_records": int(len(result.kept_indices)),
                    "bundle": out_bundle,
                },
                sort_keys=True,
            )
        )
    except TaxEngineError as exc:
        _fail(str(exc))


# -- cascade ------------------------------------------------------------------------

@main.command("cascade")
@click.option("--config", "config_path", type=str, required=True)
@click.option("--out", "out_dir", type=str, default=None)
@click.option("--threshold", type=float, default=None, help="override cascade.tau")
def cascade_cmd(config_path, out_dir, threshold):
    """Run two-stage inference; writes a report JSON and optional sweep CSV."""
    try:
        doc = _load_config(config_path)
        sec = dict(doc.get("cascade", {}))
        if threshold is not None:
            sec["tau"] = threshold
        log.info("resolved config: %s", json.dumps(doc, sort_keys=True))
        bundle = _load_bundle(sec.get("bundle") or cfgmod.require(doc, "cascade", "bundle"))
        for key in ("stage1", "stage2"):
            if not sec.get(key) or not os.path.isdir(sec[key]):
                _fail(f"cascade.{key} checkpoint not found: {sec.get(key)}")
        stage1 = hiermodel.HierModel.load(sec["stage1"])
        stage2 = hiermodel.HierModel.load(sec["stage2"])
        cfg = cascade_mod.CascadeConfig(
            stage1=stage1,
            stage2=stage2,
            threshold=sec.get("tau", 0.9),
            confidence=sec.get("confidence", cascade_mod.PATH_PRODUCT),
        )
        report = cascade_mod.run_cascade(cfg, bundle)
        doc_out = report.to_json()
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            _dump_json(doc_out, os.path.join(out_dir, "cascade_report.json"))
        summary = {k: v for k, v in doc_out.items() if k != "records"}
        click.echo(json.dumps(summary, indent=2, sort_keys=True))
        grid = sec.get("grid")
        if grid:
            rows = cascade_mod.sweep_threshold(cfg, bundle, grid)
            sweep_path = os.path.join(out_dir or ".", "sweep.csv")
            cascade_mod.write_sweep_csv(rows, sweep_path)
            click.echo(f"wrote {sweep_path}", err=True)
    except TaxEngineError as exc:
        _fail(str(exc))


# -- synth / validate -----------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", type=str, required=True)
@click.option("--out", "out_dir", type=str, default=None)
@click.option("--seed", type=int, default=None)
def synth(config_path, out_dir, seed):
    """Generate a synthetic bundle from a taxonomy file."""
    try:
        doc = _load_config(config_path)
        sec = dict(doc.get("synth", {}))
        if seed is not None:
            sec["seed"] = seed
        log.info("resolved config: %s", json.dumps(doc, sort_keys=True))
        tax_path = sec.get("taxonomy") or cfgmod.require(doc, "synth", "taxonomy")
        if not os.path.exists(tax_path):
            _fail(f"taxonomy file not found: {tax_path}")
        taxonomy = load_taxonomy(tax_path)
        dims = {str(k): int(v) for k, v in cfgmod.require(doc, "synth", "dims").items()}
        noise = sec.get("noise", 0.05)
        if isinstance(noise, dict):
            noise = {str(k): float(v) for k, v in noise.items()}
        prefix = sec.get("anchor_prefix_level")
        if isinstance(prefix, dict):
            prefix = {str(k): int(v) for k, v in prefix.items()}
        bundle = datastore.gen_synthetic(
            taxonomy,
            per_leaf=int(sec.get("per_leaf", 10)),
            dims=dims,
            noise=noise,
            seed=int(sec.get("seed", 0)),
            anchor_prefix_level=prefix,
        )
        dest = out_dir or sec.get("out")
        if not dest:
            _fail("give --out or synth.out")
        datastore.save_bundle(bundle, dest)
        click.echo(json.dumps({"bundle": dest, "n": bundle.n}, sort_keys=True))
    except TaxEngineError as exc:
        _fail(str(exc))


@main.command()
@click.argument("bundle_path", type=str)
def validate(bundle_path):
    """Check a bundle directory: format, row counts, label validity."""
    problems = []
    try:
        bundle = _load_bundle(bundle_path)
    except TaxEngineError as exc:
        _fail(f"bundle failed to load: {exc}")
        return
    if len(set(bundle.record_ids)) != bundle.n:
        problems.append("duplicate record ids")
    for name, mat in bundle.modalities.items():
        if mat.shape[1] < 1:
            problems.append(f"modality {name} has dim 0")
        if not np.isfinite(mat).all():
            problems.append(f"modality {name} contains non-finite values")
    bad_labels = sum(1 for lab in bundle.labels if not bundle.taxonomy.validate_path(lab))
    if bad_labels:
        problems.append(f"{bad_labels} labels do not validate against the taxonomy")
    if problems:
        for p in problems:
            click.echo(f"FAIL: {p}")
        sys.exit(2)
    click.echo("OK")


if __name__ == "__main__":
    main()
