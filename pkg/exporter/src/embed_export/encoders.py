"""Encoder registry: pretrained transformer adapters plus a dependency-free
hashed fallback used in tests and dry runs.

Pretrained encoders load from the local HuggingFace cache only, so exports
are reproducible and never reach the network mid-run. A missing cache
raises EncoderLoadFailure instead of silently downloading.

Text embeddings follow the mean-pooled last-hidden-state recipe. Joint
(CLIP-style) encoders emit L2-normalized vectors for every modality.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptImage, EmptyText, EncoderLoadFailure


def _l2_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms == 0.0, 1.0, norms)


# -- hashed fallback ------------------------------------------------------------

class HashedTextEncoder:
    """Feature hashing over whitespace tokens, mean-pooled.

    Deterministic and dependency-free; stands in for a language model when
    no weights are cached. Identical strings always map to identical
    vectors.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            if not text or not text.strip():
                raise EmptyText(f"record {i}: empty text field")
            tokens = text.lower().split()
            for tok in tokens:
                digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
                bucket = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                out[i, bucket] += sign
            out[i] /= len(tokens)
        return out.astype(np.float32)


class HashedImageEncoder:
    """Downsampled pixel grid projected to a fixed random basis.

    Decodes with Pillow; undecodable files raise CorruptImage so the
    caller can drop and log the record.
    """

    GRID = 16

    def __init__(self, dim: int = 64):
        self.dim = dim
        gen = np.random.Generator(np.random.Philox(key=np.array([0x5EED, dim],
                                                                dtype=np.uint64)))
        self._proj = gen.standard_normal((self.GRID * self.GRID * 3, dim)) / np.sqrt(dim)

    def encode_images(self, paths: list[str]) -> np.ndarray:
        rows = []
        for path in paths:
            try:
                with Image.open(path) as img:
                    rgb = img.convert("RGB").resize((self.GRID, self.GRID))
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                raise CorruptImage(f"{path}: {exc}") from exc
            pixels = np.asarray(rgb, dtype=np.float64).reshape(-1) / 255.0
            rows.append(pixels @ self._proj)
        return np.vstack(rows).astype(np.float32)


class HashedJointEncoder:
    """CLIP-shaped fallback: shared output dim, unit-norm vectors."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._text = HashedTextEncoder(dim)
        self._image = HashedImageEncoder(dim)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return _l2_rows(self._text.encode_texts(texts).astype(np.float64)).astype(np.float32)

    def encode_images(self, paths: list[str]) -> np.ndarray:
        return _l2_rows(self._image.encode_images(paths).astype(np.float64)).astype(np.float32)


# -- pretrained adapters -----------------------------------------------------------

class RobertaTextEncoder:
    """Mean of the last hidden state across tokens, per attribute."""

    def __init__(self, model_name: str = "roberta-base"):
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderLoadFailure(f"transformers/torch not installed: {exc}") from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_name, local_files_only=True)
            self.model = AutoModel.from_pretrained(model_name, local_files_only=True)
        except OSError as exc:
            raise EncoderLoadFailure(
                f"{model_name} not in the local cache; pre-download it first"
            ) from exc
        self.model.eval()
        self.dim = self.model.config.hidden_size

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        import torch

        for i, t in enumerate(texts):
            if not t or not t.strip():
                raise EmptyText(f"record {i}: empty text field")
        rows = []
        with torch.no_grad():
            for start in range(0, len(texts), 32):
                batch = texts[start : start + 32]
                enc = self.tokenizer(batch, padding=True, truncation=True,
                                     return_tensors="pt")
                hidden = self.model(**enc).last_hidden_state
                mask = enc["attention_mask"].unsqueeze(-1)
                pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1)
                rows.append(pooled.numpy())
        return np.vstack(rows).astype(np.float32)


class VitImageEncoder:
    """Mean-pooled ViT patch embeddings with the processor's defaults."""

    def __init__(self, model_name: str = "google/vit-base-patch16-224-in21k"):
        try:
            import torch  # noqa: F401
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise EncoderLoadFailure(f"transformers/torch not installed: {exc}") from exc
        try:
            self.processor = AutoImageProcessor.from_pretrained(model_name,
                                                                local_files_only=True)
            self.model = AutoModel.from_pretrained(model_name, local_files_only=True)
        except OSError as exc:
            raise EncoderLoadFailure(
                f"{model_name} not in the local cache; pre-download it first"
            ) from exc
        self.model.eval()
        self.dim = self.model.config.hidden_size

    def encode_images(self, paths: list[str]) -> np.ndarray:
        import torch

        rows = []
        with torch.no_grad():
            for path in paths:
                try:
                    with Image.open(path) as img:
                        rgb = img.convert("RGB")
                        inputs = self.processor(images=rgb, return_tensors="pt")
                except (UnidentifiedImageError, OSError, ValueError) as exc:
                    raise CorruptImage(f"{path}: {exc}") from exc
                hidden = self.model(**inputs).last_hidden_state
                rows.append(hidden.mean(dim=1).numpy())
        return np.vstack(rows).astype(np.float32)


class ClipJointEncoder:
    """CLIP text/image towers; outputs are L2-normalized per modality."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderLoadFailure(f"transformers/torch not installed: {exc}") from exc
        try:
            self.processor = CLIPProcessor.from_pretrained(model_name, local_files_only=True)
            self.model = CLIPModel.from_pretrained(model_name, local_files_only=True)
        except OSError as exc:
            raise EncoderLoadFailure(
                f"{model_name} not in the local cache; pre-download it first"
            ) from exc
        self.model.eval()
        self.dim = self.model.config.projection_dim

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        import torch

        for i, t in enumerate(texts):
            if not t or not t.strip():
                raise EmptyText(f"record {i}: empty text field")
        rows = []
        with torch.no_grad():
            for start in range(0, len(texts), 32):
                enc = self.processor(text=texts[start : start + 32], padding=True,
                                     truncation=True, return_tensors="pt")
                feats = self.model.get_text_features(**enc)
                rows.append(feats.numpy())
        return _l2_rows(np.vstack(rows).astype(np.float64)).astype(np.float32)

    def encode_images(self, paths: list[str]) -> np.ndarray:
        import torch

        rows = []
        with torch.no_grad():
            for path in paths:
                try:
                    with Image.open(path) as img:
                        inputs = self.processor(images=img.convert("RGB"),
                                                return_tensors="pt")
                except (UnidentifiedImageError, OSError, ValueError) as exc:
                    raise CorruptImage(f"{path}: {exc}") from exc
                feats = self.model.get_image_features(**inputs)
                rows.append(feats.numpy())
        return _l2_rows(np.vstack(rows).astype(np.float64)).astype(np.float32)


TEXT_ENCODERS = {
    "hashed": HashedTextEncoder,
    "roberta": RobertaTextEncoder,
}

IMAGE_ENCODERS = {
    "hashed": HashedImageEncoder,
    "vit": VitImageEncoder,
}

JOINT_ENCODERS = {
    "hashed-joint": HashedJointEncoder,
    "clip": ClipJointEncoder,
}


def make_text_encoder(name: str, **kwargs):
    if name not in TEXT_ENCODERS:
        raise EncoderLoadFailure(f"unknown text encoder {name!r}")
    return TEXT_ENCODERS[name](**kwargs)


def make_image_encoder(name: str, **kwargs):
    if name not in IMAGE_ENCODERS:
        raise EncoderLoadFailure(f"unknown image encoder {name!r}")
    return IMAGE_ENCODERS[name](**kwargs)


def make_joint_encoder(name: str, **kwargs):
    if name not in JOINT_ENCODERS:
        raise EncoderLoadFailure(f"unknown joint encoder {name!r}")
    return JOINT_ENCODERS[name](**kwargs)
