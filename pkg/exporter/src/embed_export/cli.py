"""embed-export: turn a product CSV into an engine-ready embedding bundle."""

from __future__ import annotations

import logging
import sys

import click

from .errors import ExportError
from .export import run_export


@click.command()
@click.option("--csv", "csv_path", required=True, type=str, help="input product CSV")
@click.option("--out", "out_dir", required=True, type=str, help="bundle output directory")
@click.option("--text-encoder", default="hashed", show_default=True,
              type=click.Choice(["hashed", "roberta"]))
@click.option("--image-encoder", default="hashed", show_default=True,
              type=click.Choice(["hashed", "vit"]))
@click.option("--joint-encoder", default=None,
              type=click.Choice(["hashed-joint", "clip"]),
              help="encode all modalities with one joint model instead")
@click.option("--id-col", default="id", show_default=True)
@click.option("--title-col", default="title", show_default=True)
@click.option("--brand-col", default="brand", show_default=True)
@click.option("--image-col", default="image", show_default=True)
@click.option("--category-col", default="category", show_default=True)
def main(csv_path, out_dir, text_encoder, image_encoder, joint_encoder,
         id_col, title_col, brand_col, image_col, category_col):
    """Encode titles, brands, and images; write a bundle directory that
    passes `taxengine validate`."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    columns = {
        "id": id_col,
        "title": title_col,
        "brand": brand_col,
        "image": image_col,
        "category": category_col,
    }
    try:
        result = run_export(
            csv_path,
            out_dir,
            text_encoder=text_encoder,
            image_encoder=image_encoder,
            joint_encoder=joint_encoder,
            columns=columns,
        )
    except ExportError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(
        f"wrote {result.bundle_dir}: {result.n_exported} records, "
        f"{len(result.dropped)} dropped"
    )


if __name__ == "__main__":
    main()
