"""Per-image guidance embeddings and their on-disk store.

The store is the single artifact shared with the external embedding
extractor. One file:

    [u32 little-endian: manifest byte length][manifest JSON][payload]

The manifest is ``{"version": 1, "dim_image", "dim_joint", "dim_answer",
"count", "dtype": "f32le", "records": [{"id", "image_path", "labels",
"byte_offset"}, ...]}``. The payload holds, per record and in record order,
E_Image then E_Joint then E_Answer as raw little-endian float32, no
padding; ``byte_offset`` is relative to the payload start.

``synth_embed`` generates deterministic stand-in triplets from degradation
mixture vectors so the whole pipeline runs without any multimodal model.

Known degradation label codes: L, H, R, S, N15, N25, N50, B (blur,
reserved and unused by the synthesizer).
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (ContractError, DimensionError, StoreDuplicateIdError,
                     StoreError, StoreTruncatedError, StoreVersionError, ConfigError)
from .util import rng_for

LABEL_CODES = ("L", "H", "R", "S", "N15", "N25", "N50", "B")
MIXTURE_AXES = ("low_light", "haze", "rain", "snow", "noise")


@dataclass
class GuidanceTriplet:
    """The three guidance embeddings for one image (float32 vectors)."""

    e_image: np.ndarray
    e_joint: np.ndarray
    e_answer: np.ndarray

    def dims(self):
        return (len(self.e_image), len(self.e_joint), len(self.e_answer))

    def concat(self):
        return np.concatenate([self.e_image, self.e_joint, self.e_answer])


@dataclass
class MixtureVector:
    """Intensity in [0,1] per degradation family; all zero means clean."""

    low_light: float = 0.0
    haze: float = 0.0
    rain: float = 0.0
    snow: float = 0.0
    noise: float = 0.0

    def values(self):
        return np.array(
            [self.low_light, self.haze, self.rain, self.snow, self.noise], dtype=np.float64)

    @classmethod
    def from_values(cls, vals):
        vals = list(vals)
        if len(vals) != 5:
            raise ConfigError(f"mixture vector needs 5 entries, got {len(vals)}")
        return cls(*(float(v) for v in vals))


class EmbeddingStore:
    """In-memory store: ordered records plus one float32 matrix per role."""

    def __init__(self, dims, record_meta, vectors):
        self.dim_image, self.dim_joint, self.dim_answer = dims
        self.records = list(record_meta)  # dicts: id, image_path, labels
        self._index = {}
        for i, rec in enumerate(self.records):
            if rec["id"] in self._index:
                raise StoreDuplicateIdError(f"duplicate record id {rec['id']!r}")
            self._index[rec["id"]] = i
        self.e_image, self.e_joint, self.e_answer = vectors

    @classmethod
    def from_triplets(cls, entries, dims):
        """entries: iterable of (id, image_path, labels, GuidanceTriplet)."""
        meta, ei, ej, ea = [], [], [], []
        for rec_id, image_path, labels, trip in entries:
            if trip.dims() != tuple(dims):
                raise DimensionError(
                    f"record {rec_id!r}: triplet dims {trip.dims()} != store dims {tuple(dims)}")
            meta.append({"id": str(rec_id), "image_path": str(image_path),
                         "labels": list(labels)})
            ei.append(np.asarray(trip.e_image, dtype=np.float32))
            ej.append(np.asarray(trip.e_joint, dtype=np.float32))
            ea.append(np.asarray(trip.e_answer, dtype=np.float32))
        stack = lambda rows, d: (np.stack(rows) if rows else np.zeros((0, d), np.float32))
        return cls(dims, meta, (stack(ei, dims[0]), stack(ej, dims[1]), stack(ea, dims[2])))

    def __len__(self):
        return len(self.records)

    @property
    def count(self):
        return len(self.records)

    def ids(self):
        return [rec["id"] for rec in self.records]

    def has(self, rec_id):
        return rec_id in self._index

    def labels(self, rec_id):
        return list(self.records[self._index[rec_id]]["labels"])

    def get(self, rec_id):
        if rec_id not in self._index:
            raise StoreError(f"unknown record id {rec_id!r}")
        i = self._index[rec_id]
        return GuidanceTriplet(self.e_image[i].copy(), self.e_joint[i].copy(),
                               self.e_answer[i].copy())

    def rows(self, rec_ids):
        """Stacked (e_image, e_joint, e_answer) matrices for the given ids."""
        idx = []
        for rid in rec_ids:
            if rid not in self._index:
                raise StoreError(f"unknown record id {rid!r}")
            idx.append(self._index[rid])
        return self.e_image[idx], self.e_joint[idx], self.e_answer[idx]


def write_store(store, path):
    record_bytes = 4 * (store.dim_image + store.dim_joint + store.dim_answer)
    records = []
    payload = bytearray()
    for i, rec in enumerate(store.records):
        records.append({**rec, "byte_offset": i * record_bytes})
        for row in (store.e_image[i], store.e_joint[i], store.e_answer[i]):
            payload += np.ascontiguousarray(row, dtype="<f4").tobytes()
    manifest = {
        "version": 1,
        "dim_image": store.dim_image,
        "dim_joint": store.dim_joint,
        "dim_answer": store.dim_answer,
        "count": len(store.records),
        "dtype": "f32le",
        "records": records,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def read_store(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise StoreTruncatedError(f"{path}: missing manifest length prefix")
        (mlen,) = struct.unpack("<I", head)
        blob = fh.read(mlen)
        if len(blob) < mlen:
            raise StoreTruncatedError(f"{path}: manifest truncated ({len(blob)}/{mlen} bytes)")
        manifest = json.loads(blob.decode("utf-8"))
        payload = fh.read()

    if manifest.get("version") != 1:
        raise StoreVersionError(f"{path}: unsupported store version {manifest.get('version')!r}")
    if manifest.get("dtype") != "f32le":
        raise StoreVersionError(f"{path}: unsupported payload dtype {manifest.get('dtype')!r}")
    dims = (manifest["dim_image"], manifest["dim_joint"], manifest["dim_answer"])
    count = manifest["count"]
    records = manifest["records"]
    if len(records) != count:
        raise StoreError(f"{path}: manifest count {count} != {len(records)} records")
    record_bytes = 4 * sum(dims)
    expected = count * record_bytes
    if len(payload) != expected:
        raise StoreTruncatedError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    offsets = [rec["byte_offset"] for rec in records]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise StoreError(f"{path}: byte offsets are not strictly increasing")
    ids = [rec["id"] for rec in records]
    if len(ids) != len(set(ids)):
        raise StoreDuplicateIdError(f"{path}: duplicate record ids")

    ei = np.zeros((count, dims[0]), dtype=np.float32)
    ej = np.zeros((count, dims[1]), dtype=np.float32)
    ea = np.zeros((count, dims[2]), dtype=np.float32)
    for i, rec in enumerate(records):
        off = rec["byte_offset"]
        if off + record_bytes > len(payload):
            raise StoreTruncatedError(
                f"{path}: record {rec['id']!r} extends past payload end")
        flat = np.frombuffer(payload, dtype="<f4", count=sum(dims), offset=off)
        ei[i] = flat[:dims[0]]
        ej[i] = flat[dims[0]:dims[0] + dims[1]]
        ea[i] = flat[dims[0] + dims[1]:]
    meta = [{"id": r["id"], "image_path": r.get("image_path", ""),
             "labels": list(r.get("labels", []))} for r in records]
    return EmbeddingStore(dims, meta, (ei, ej, ea))


# ---------------------------------------------------------------------------
# synthetic embedding generator
# ---------------------------------------------------------------------------

_ROLES = ("image", "joint", "answer")
_CLEAN_NOT_SET = object()


def _role_matrix(seed, role, dim):
    # column 0 is the reserved "clean" direction; columns 1..5 span the mixture axes
    rng = rng_for(seed, "synth-embed", role)
    return rng.standard_normal((dim, 6))


def synth_embed(mix, dims, seed, sample_id="", sigma_eps=0.01):
    """Deterministic stand-in triplet for one sample.

    Each role r gets normalize(M_r[:,1:] @ mix + eps) with M_r fixed by the
    seed and eps ~ N(0, sigma_eps) keyed by (seed, sample_id). An all-zero
    mixture (clean image) uses the reserved clean column instead, so the
    pre-normalization vector is never zero when sigma_eps = 0.
    """
    mix_vals = mix.values() if isinstance(mix, MixtureVector) else np.asarray(mix, np.float64)
    if mix_vals.shape != (5,):
        raise ConfigError(f"synth_embed: mixture must have 5 entries, got {mix_vals.shape}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 5 for d in dims):
        raise ConfigError(f"synth_embed: role dims must each be >= 5, got {dims}")
    noise_rng = rng_for(seed, "synth-embed-noise", sample_id)
    clean = not np.any(mix_vals != 0.0)
    out = []
    for role, dim in zip(_ROLES, dims):
        m = _role_matrix(seed, role, dim)
        base = m[:, 0] / np.linalg.norm(m[:, 0]) if clean else m[:, 1:] @ mix_vals
        vec = base + sigma_eps * noise_rng.standard_normal(dim)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec = m[:, 0] / np.linalg.norm(m[:, 0])
            norm = 1.0
        out.append((vec / norm).astype(np.float32))
    return GuidanceTriplet(*out)


def synth_store(manifest, dims=(64, 64, 64), seed=0, sigma_eps=0.01):
    """EmbeddingStore with synthetic triplets for every manifest record."""
    entries = []
    for rec in manifest.records:
        trip = synth_embed(MixtureVector.from_values(rec.mixture), dims, seed,
                           sample_id=rec.id, sigma_eps=sigma_eps)
        entries.append((rec.id, rec.degraded_path, rec.labels, trip))
    return EmbeddingStore.from_triplets(entries, dims)


def pairwise_cosine(rows):
    """Sim[i,j] = <r_i, r_j> / (|r_i||r_j|); symmetric, unit diagonal."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError(f"pairwise_cosine: expected a [B,D] matrix, got {rows.shape}")
    norms = np.linalg.norm(rows, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ContractError(f"pairwise_cosine: zero row at index {int(zero[0])}")
    unit = rows / norms[:, None]
    return unit @ unit.T
