"""Writer for the embedding-store file consumed by the restoration package.

The format is the whole contract between the two packages:

    [u32 little-endian: manifest byte length][manifest JSON][payload]

manifest: {"version": 1, "dim_image", "dim_joint", "dim_answer", "count",
"dtype": "f32le", "records": [{"id", "image_path", "labels",
"byte_offset"}, ...]}. The payload holds E_Image then E_Joint then
E_Answer per record as raw little-endian float32, no padding;
byte_offset is relative to the payload start and strictly increasing.
"""

import json
import struct

import numpy as np


class StoreWriter:
    def __init__(self, dim_image, dim_joint, dim_answer):
        self.dims = (int(dim_image), int(dim_joint), int(dim_answer))
        self.records = []
        self.payload = bytearray()

    @property
    def record_bytes(self):
        return 4 * sum(self.dims)

    def add(self, record_id, image_path, labels, e_image, e_joint, e_answer):
        vectors = (np.asarray(e_image), np.asarray(e_joint), np.asarray(e_answer))
        for vec, dim, role in zip(vectors, self.dims, ("image", "joint", "answer")):
            if vec.shape != (dim,):
                raise ValueError(
                    f"{record_id}: e_{role} has shape {vec.shape}, expected ({dim},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{record_id}: e_{role} contains non-finite values")
        if any(rec["id"] == record_id for rec in self.records):
            raise ValueError(f"duplicate record id {record_id!r}")
        self.records.append({
            "id": str(record_id),
            "image_path": str(image_path),
            "labels": list(labels),
            "byte_offset": len(self.payload),
        })
        for vec in vectors:
            self.payload += np.ascontiguousarray(vec, dtype="<f4").tobytes()

    def write(self, path):
        manifest = {
            "version": 1,
            "dim_image": self.dims[0],
            "dim_joint": self.dims[1],
            "dim_answer": self.dims[2],
            "count": len(self.records),
            "dtype": "f32le",
            "records": self.records,
        }
        blob = json.dumps(manifest).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(bytes(self.payload))
        return path
