"""CSV -> embedding bundle pipeline.

Reads product rows (id, title, brand, image path, category path), encodes
titles and brands with a text encoder and images with an image encoder
(or all three with a joint encoder), and writes a bundle directory in the
engine's documented on-disk format. Records are never dropped silently:
rows with missing text fields or undecodable images go to drops.log with
a reason.

The bundle layout is written against the format contract (manifest.json
version 1 + raw little-endian float32 matrices + labels.tsv + ids.txt +
taxonomy.txt), not against the engine's code, so this package has no
dependency on it.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .encoders import make_image_encoder, make_joint_encoder, make_text_encoder
from .errors import BadCsv, CorruptImage, EmptyText

log = logging.getLogger("embed_export")

DEFAULT_COLUMNS = {
    "id": "id",
    "title": "title",
    "brand": "brand",
    "image": "image",
    "category": "category",
}


@dataclass
class ProductRecord:
    record_id: str
    title: str
    brand: str
    image_path: str
    category: str


@dataclass
class ExportResult:
    bundle_dir: str
    n_exported: int
    dropped: list[tuple[str, str]] = field(default_factory=list)   # (id, reason)


def read_csv(path, columns: dict[str, str] | None = None) -> list[ProductRecord]:
    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise BadCsv(f"{path}: no header row")
        missing = [c for c in cols.values() if c not in reader.fieldnames]
        if missing:
            raise BadCsv(f"{path}: missing columns {missing}")
        for row in reader:
            records.append(
                ProductRecord(
                    record_id=row[cols["id"]].strip(),
                    title=row[cols["title"]].strip(),
                    brand=row[cols["brand"]].strip(),
                    image_path=row[cols["image"]].strip(),
                    category=row[cols["category"]].strip(),
                )
            )
    return records


# -- modality export operations ---------------------------------------------------

def export_text(records: list[ProductRecord], encoder) -> dict[str, np.ndarray]:
    """Title and brand matrices from one text encoder; raises EmptyText on
    a blank field (pipeline callers pre-drop those rows)."""
    titles = encoder.encode_texts([r.title for r in records])
    brands = encoder.encode_texts([r.brand for r in records])
    return {"title": titles, "brand": brands}


def export_image(records: list[ProductRecord], encoder) -> np.ndarray:
    return encoder.encode_images([r.image_path for r in records])


def export_joint(records: list[ProductRecord], encoder) -> dict[str, np.ndarray]:
    """All three modalities through a joint vision-language encoder; the
    encoder contract guarantees unit-norm rows."""
    return {
        "title": encoder.encode_texts([r.title for r in records]),
        "brand": encoder.encode_texts([r.brand for r in records]),
        "image": encoder.encode_images([r.image_path for r in records]),
    }


# -- bundle writer (format contract, no engine import) ------------------------------

def write_bundle(out_dir, modalities: dict[str, np.ndarray], records: list[ProductRecord]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    n = len(records)
    descriptors = []
    for name, mat in modalities.items():
        assert mat.shape[0] == n, f"{name}: {mat.shape[0]} rows != {n} records"
        fname = f"{name}.f32"
        with open(os.path.join(out_dir, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
        descriptors.append({"name": name, "dim": int(mat.shape[1]), "file": fname})
    manifest = {
        "version": 1,
        "n": n,
        "modalities": descriptors,
        "labels_file": "labels.tsv",
        "taxonomy_file": "taxonomy.txt",
        "ids_file": "ids.txt",
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "labels.tsv"), "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.record_id}\t{r.category}\n")
    with open(os.path.join(out_dir, "ids.txt"), "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.record_id + "\n")
    with open(os.path.join(out_dir, "taxonomy.txt"), "w", encoding="utf-8") as fh:
        for path in sorted({r.category for r in records}):
            fh.write(path + "\n")


# -- pipeline ------------------------------------------------------------------------

def run_export(
    csv_path,
    out_dir,
    text_encoder: str = "hashed",
    image_encoder: str = "hashed",
    joint_encoder: str | None = None,
    columns: dict[str, str] | None = None,
    encoder_kwargs: dict | None = None,
) -> ExportResult:
    """Full export: clean, encode, write bundle + drop log + manifest."""
    kwargs = encoder_kwargs or {}
    records = read_csv(csv_path, columns)
    dropped: list[tuple[str, str]] = []
    clean: list[ProductRecord] = []
    for r in records:
        if not r.record_id:
            dropped.append(("<blank-id>", "missing id"))
            continue
        missing = [f for f in ("title", "brand", "category") if not getattr(r, f)]
        if missing:
            dropped.append((r.record_id, f"missing {','.join(missing)}"))
            continue
        clean.append(r)

    if joint_encoder:
        enc = make_joint_encoder(joint_encoder, **kwargs.get("joint", {}))
        image_probe = enc
        text_fn = lambda rows: {
            "title": enc.encode_texts([r.title for r in rows]),
            "brand": enc.encode_texts([r.brand for r in rows]),
        }
        encoder_names = {"title": joint_encoder, "brand": joint_encoder,
                         "image": joint_encoder}
    else:
        tenc = make_text_encoder(text_encoder, **kwargs.get("text", {}))
        image_probe = make_image_encoder(image_encoder, **kwargs.get("image", {}))
        text_fn = lambda rows: export_text(rows, tenc)
        encoder_names = {"title": text_encoder, "brand": text_encoder,
                         "image": image_encoder}

    # decode images record by record so one corrupt file drops one record
    survivors: list[ProductRecord] = []
    image_rows: list[np.ndarray] = []
    for r in clean:
        try:
            image_rows.append(image_probe.encode_images([r.image_path])[0])
        except CorruptImage as exc:
            dropped.append((r.record_id, f"corrupt image: {exc}"))
            log.warning("dropping %s: corrupt image (%s)", r.record_id, r.image_path)
            continue
        survivors.append(r)
    if not survivors:
        raise BadCsv("no records survived cleaning")

    modalities = text_fn(survivors)
    modalities["image"] = np.vstack(image_rows)
    write_bundle(out_dir, modalities, survivors)

    with open(os.path.join(out_dir, "drops.log"), "w", encoding="utf-8") as fh:
        for rid, reason in dropped:
            fh.write(f"{rid}\t{reason}\n")
    export_manifest = {
        "source_csv": str(csv_path),
        "columns": {**DEFAULT_COLUMNS, **(columns or {})},
        "encoders": encoder_names,
        "modality_dims": {m: int(mat.shape[1]) for m, mat in modalities.items()},
        "n_exported": len(survivors),
        "n_dropped": len(dropped),
        "preprocessing": "encoder defaults (RGB convert; processor-defined resize/normalize)",
    }
    with open(os.path.join(out_dir, "export_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(export_manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ExportResult(bundle_dir=str(out_dir), n_exported=len(survivors), dropped=dropped)
