"""Embedding exporter: pretrained encoders -> taxengine bundles."""

from .encoders import (
    ClipJointEncoder,
    HashedImageEncoder,
    HashedJointEncoder,
    HashedTextEncoder,
    RobertaTextEncoder,
    VitImageEncoder,
    make_image_encoder,
    make_joint_encoder,
    make_text_encoder,
)
from .errors import BadCsv, CorruptImage, EmptyText, EncoderLoadFailure, ExportError
from .export import (
    ExportResult,
    ProductRecord,
    export_image,
    export_joint,
    export_text,
    read_csv,
    run_export,
    write_bundle,
)

__version__ = "0.1.0"
