"""Harvest guidance embeddings from a multimodal model, one image at a time.

For each image the backend runs a greedy (temperature-0) VQA pass with the
degradation prompt and returns the final-layer hidden states over the full
sequence (prompt, image placeholders, generated answer) plus a mask of the
image-token positions. Pooling:

    E_Image  = mean of hidden states at image-token positions
    E_Joint  = mean of hidden states at all positions
    E_Answer = hidden state at the last (generated) position

All three have the model's hidden size. Records whose vectors come out
non-finite are skipped with a logged reason; only a store-write failure
aborts the run.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .store_format import StoreWriter

log = logging.getLogger("extractor")

DEFAULT_PROMPT = "What kinds of degradation in this image?"


@dataclass
class ExtractorConfig:
    model_id: str = "Qwen/Qwen2.5-VL-3B-Instruct"
    prompt: str = DEFAULT_PROMPT
    pooling: str = "mean"
    device: str = "cpu"
    max_new_tokens: int = 64
    output_path: str = "embeddings.bin"
    manifest_path: str = ""

    def validate(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.pooling != "mean":
            raise ValueError(f"pooling must be 'mean', got {self.pooling!r}")
        return self


@dataclass
class BackendResult:
    """Final-layer hidden states [T, D] and the image-token mask [T]."""

    hidden: np.ndarray
    image_mask: np.ndarray

    def validate(self):
        if self.hidden.ndim != 2:
            raise ValueError(f"hidden states must be [T, D], got {self.hidden.shape}")
        if self.image_mask.shape != (self.hidden.shape[0],):
            raise ValueError("image mask length must match sequence length")
        if not self.image_mask.any():
            raise ValueError("no image-token positions reported")
        return self


def pool_embeddings(result):
    """(e_image, e_joint, e_answer) float32 vectors from one backend pass."""
    hidden = np.asarray(result.hidden, dtype=np.float32)
    mask = np.asarray(result.image_mask, dtype=bool)
    e_image = hidden[mask].mean(axis=0)
    e_joint = hidden.mean(axis=0)
    e_answer = hidden[-1].copy()
    return e_image, e_joint, e_answer


def load_manifest_records(manifest_path):
    """(id, absolute image path, labels) per record of a dataset manifest."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    root = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    for rec in payload["records"]:
        records.append((rec["id"], os.path.join(root, rec["degraded_path"]),
                        list(rec.get("labels", []))))
    return records


def extract(config, image_list, backend):
    """Run the backend over every image and write the embedding store.

    ``image_list`` holds (record_id, image_path, labels) triples. Returns
    (output_path, written_count, skipped list of (id, reason)).
    """
    config.validate()
    writer = None
    skipped = []
    for record_id, image_path, labels in image_list:
        try:
            result = backend.run(image_path, config.prompt).validate()
            e_image, e_joint, e_answer = pool_embeddings(result)
            vectors = np.concatenate([e_image, e_joint, e_answer])
            if not np.all(np.isfinite(vectors)):
                raise ValueError("non-finite values in pooled embeddings")
            if writer is None:
                d = len(e_image)
                writer = StoreWriter(d, d, d)
            writer.add(record_id, image_path, labels, e_image, e_joint, e_answer)
        except Exception as exc:  # per-record failures never abort the run
            log.error("skipping %s: %s", record_id, exc)
            skipped.append((record_id, str(exc)))
    if writer is None:
        writer = StoreWriter(backend.hidden_size, backend.hidden_size,
                             backend.hidden_size)
    out_dir = os.path.dirname(os.path.abspath(config.output_path))
    os.makedirs(out_dir, exist_ok=True)
    writer.write(config.output_path)  # a failure here propagates and aborts
    return config.output_path, len(writer.records), skipped
