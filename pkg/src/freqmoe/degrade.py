"""Composite degradation synthesis and dataset manifests.

Standard low-parameter corruption models, applied in recipe order and
clipped to [0,1] after each operator:

    low_light   out = in ** gamma, gamma in [2,3]
    haze        out = in * t + A * (1 - t), t = exp(-beta * depth) with a
                fixed linear top-to-bottom depth ramp in [0.5, 1.5]
    rain        additive anti-aliased line segments
    snow        additive soft discs
    gauss_noise pixelwise N(0, sigma/255), sigma in {15, 25, 50}

Each operator carries a ``strength`` in (0,1] that maps onto its physical
parameters and doubles as the mixture-vector intensity. Per-record streams
are keyed by (global seed, record id), so generation is reproducible and
order-independent. Images are stored as 8-bit PNG; pixel encoding is
byte = rint(value * 255), value = byte / 255.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DataError
from .guidance import MixtureVector
from .util import from_uint8, rng_for, to_uint8

NOISE_SIGMAS = (15, 25, 50)

STANDARD_COMBOS = (
    ("L",), ("H",), ("R",), ("S",),
    ("L", "H"), ("L", "R"), ("L", "S"), ("H", "R"), ("H", "S"),
    ("L", "H", "R"), ("L", "H", "S"),
)
NOISE_COMBOS = (("N15",), ("N25",), ("N50",))


@dataclass
class DegradationOp:
    kind: str  # low_light | haze | rain | snow | gauss_noise
    params: dict

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass
class DegradationRecipe:
    ops: list
    seed: int

    def labels(self):
        out = []
        for op in self.ops:
            if op.kind == "gauss_noise":
                out.append(f"N{int(op.params['sigma'])}")
            else:
                out.append({"low_light": "L", "haze": "H", "rain": "R", "snow": "S"}[op.kind])
        return out

    def mixture(self):
        mix = MixtureVector()
        for op in self.ops:
            strength = float(op.params["strength"])
            axis = {"low_light": "low_light", "haze": "haze", "rain": "rain",
                    "snow": "snow", "gauss_noise": "noise"}[op.kind]
            setattr(mix, axis, max(getattr(mix, axis), strength))
        return mix

    def to_dict(self):
        return {"seed": self.seed, "ops": [op.to_dict() for op in self.ops]}

    @classmethod
    def from_dict(cls, d):
        return cls(ops=[DegradationOp(o["kind"], dict(o["params"])) for o in d["ops"]],
                   seed=int(d["seed"]))


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def _apply_low_light(img, params, rng):
    gamma = float(params["gamma"])
    return img ** gamma


def _apply_haze(img, params, rng):
    beta = float(params["beta"])
    airlight = float(params["airlight"])
    H = img.shape[1]
    depth = np.linspace(0.5, 1.5, H, dtype=np.float64)[None, :, None]
    t = np.exp(-beta * depth)
    return img * t + airlight * (1.0 - t)


def _draw_segments(shape, count, length, angle_deg, rng):
    """Splat line segments onto a [H,W] mask with bilinear anti-aliasing."""
    H, W = shape
    mask = np.zeros((H, W), dtype=np.float64)
    if count < 1:
        return mask
    x0 = rng.uniform(0, W, size=count)
    y0 = rng.uniform(0, H, size=count)
    angles = np.deg2rad(angle_deg + rng.uniform(-8.0, 8.0, size=count))
    steps = max(int(length * 4), 2)
    ts = np.linspace(0.0, length, steps)
    for i in range(count):
        xs = x0[i] + np.cos(angles[i]) * ts
        ys = y0[i] + np.sin(angles[i]) * ts
        keep = (xs >= 0) & (xs < W - 1) & (ys >= 0) & (ys < H - 1)
        xs, ys = xs[keep], ys[keep]
        xi, yi = xs.astype(int), ys.astype(int)
        fx, fy = xs - xi, ys - yi
        np.add.at(mask, (yi, xi), (1 - fx) * (1 - fy) / 4)
        np.add.at(mask, (yi, xi + 1), fx * (1 - fy) / 4)
        np.add.at(mask, (yi + 1, xi), (1 - fx) * fy / 4)
        np.add.at(mask, (yi + 1, xi + 1), fx * fy / 4)
    return np.clip(mask, 0.0, 1.0)


def _apply_rain(img, params, rng):
    H, W = img.shape[1:]
    count = int(round(params["density"] * H * W))
    mask = _draw_segments((H, W), count, float(params["length"]),
                          float(params["angle"]), rng)
    return img + float(params["opacity"]) * mask[None, :, :]


def _apply_snow(img, params, rng):
    H, W = img.shape[1:]
    count = int(round(params["density"] * H * W))
    mask = np.zeros((H, W), dtype=np.float64)
    if count >= 1:
        cx = rng.uniform(0, W, size=count)
        cy = rng.uniform(0, H, size=count)
        radii = rng.uniform(params["radius_min"], params["radius_max"], size=count)
        yy, xx = np.mgrid[0:H, 0:W]
        for i in range(count):
            r = radii[i]
            d2 = (xx - cx[i]) ** 2 + (yy - cy[i]) ** 2
            mask += np.maximum(0.0, 1.0 - d2 / (r * r))
        mask = np.clip(mask, 0.0, 1.0)
    return img + float(params["opacity"]) * mask[None, :, :]


def _apply_gauss_noise(img, params, rng):
    sigma = float(params["sigma"]) / 255.0
    return img + rng.normal(0.0, sigma, size=img.shape)


_OPERATORS = {
    "low_light": _apply_low_light,
    "haze": _apply_haze,
    "rain": _apply_rain,
    "snow": _apply_snow,
    "gauss_noise": _apply_gauss_noise,
}


def apply_recipe(clean, recipe):
    """Apply a recipe's operators in order to a [3,H,W] image in [0,1]."""
    img = np.asarray(clean, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"apply_recipe: expected [3,H,W] image, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("apply_recipe: input must lie in [0,1]")
    for i, op in enumerate(recipe.ops):
        if op.kind not in _OPERATORS:
            raise ConfigError(f"unknown degradation operator {op.kind!r}")
        rng = rng_for(recipe.seed, "op", i, op.kind)
        img = np.clip(_OPERATORS[op.kind](img, op.params, rng), 0.0, 1.0)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# recipe sampling
# ---------------------------------------------------------------------------

def _sample_op(label, rng):
    if label == "L":
        strength = rng.uniform(0.5, 1.0)
        return DegradationOp("low_light", {"strength": strength, "gamma": 2.0 + strength})
    if label == "H":
        strength = rng.uniform(0.5, 1.0)
        return DegradationOp("haze", {"strength": strength, "beta": 1.5 * strength,
                                      "airlight": rng.uniform(0.8, 1.0)})
    if label == "R":
        strength = rng.uniform(0.4, 1.0)
        return DegradationOp("rain", {"strength": strength, "density": 0.0012 * strength,
                                      "length": 12.0, "angle": 75.0, "opacity": 0.35})
    if label == "S":
        strength = rng.uniform(0.4, 1.0)
        return DegradationOp("snow", {"strength": strength, "density": 0.0008 * strength,
                                      "radius_min": 1.0, "radius_max": 2.5, "opacity": 0.55})
    if label.startswith("N"):
        sigma = int(label[1:])
        if sigma not in NOISE_SIGMAS:
            raise ConfigError(f"noise label {label!r}: sigma must be one of {NOISE_SIGMAS}")
        return DegradationOp("gauss_noise", {"strength": sigma / max(NOISE_SIGMAS),
                                             "sigma": sigma})
    raise ConfigError(f"unknown degradation label {label!r}")


def sample_recipe(labels, seed):
    """Recipe for one record: operators in label order, params from the seed."""
    rng = rng_for(seed, "recipe")
    ops = [_sample_op(label, rng) for label in labels]
    if not ops:
        raise ConfigError("recipe needs at least one operator")
    return DegradationRecipe(ops=ops, seed=seed)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    clean_path: str
    degraded_path: str
    labels: list
    recipe: dict
    mixture: list

    def mixture_vector(self):
        return MixtureVector.from_values(self.mixture)


@dataclass
class DatasetManifest:
    seed: int
    size: int
    records: list = field(default_factory=list)

    def save(self, path):
        payload = {
            "version": 1,
            "seed": self.seed,
            "size": self.size,
            "records": [vars(r) for r in self.records],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path, check_files=True):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("version") != 1:
            raise DataError(f"{path}: unsupported manifest version {payload.get('version')!r}")
        root = os.path.dirname(os.path.abspath(path))
        records = [ManifestRecord(**r) for r in payload["records"]]
        ids = [r.id for r in records]
        if len(ids) != len(set(ids)):
            raise DataError(f"{path}: duplicate record ids")
        if check_files:
            for rec in records:
                for p in (rec.clean_path, rec.degraded_path):
                    if not os.path.exists(os.path.join(root, p)):
                        raise DataError(f"{path}: missing referenced file {p!r}")
        manifest = cls(seed=payload["seed"], size=payload["size"], records=records)
        manifest.root = root
        return manifest

    def resolve(self, rel_path):
        return os.path.join(getattr(self, "root", "."), rel_path)


def save_image(img, path):
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


def load_image(path):
    with Image.open(path) as im:
        raw = np.asarray(im.convert("RGB"))
    return from_uint8(raw.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# clean sources and dataset builder
# ---------------------------------------------------------------------------

def make_clean_image(size, rng):
    """Procedural photo-ish stand-in: smooth gradients, shapes, mild texture."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((3, size, size))
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        base = 0.5 + 0.25 * np.sin(2 * np.pi * fx * xx + phase[0]) \
                   + 0.25 * np.sin(2 * np.pi * fy * yy + phase[1])
        img[c] = base
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(0.1, 0.9, size=2) * size
        r = rng.uniform(0.08, 0.3) * size
        color = rng.uniform(0.1, 0.9, size=3)
        mask = ((xx * size - cx) ** 2 + (yy * size - cy) ** 2) < r * r
        for c in range(3):
            img[c][mask] = 0.7 * color[c] + 0.3 * img[c][mask]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_clean_images(out_dir, count, size, seed):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        rng = rng_for(seed, "clean", i)
        path = os.path.join(out_dir, f"clean_{i:04d}.png")
        save_image(make_clean_image(size, rng), path)
        paths.append(path)
    return paths


def list_images(directory):
    exts = (".png", ".jpg", ".jpeg", ".bmp")
    try:
        names = sorted(os.listdir(directory))
    except FileNotFoundError:
        raise ConfigError(f"clean image directory {directory!r} does not exist")
    return [os.path.join(directory, n) for n in names if n.lower().endswith(exts)]


def build_dataset(clean_dir, out_dir, per_combo, size, seed,
                  combos=None, include_noise=True):
    """Synthesize a composite-degradation dataset under ``out_dir``.

    Writes degraded/clean PNG pairs plus manifest.json; fully reproducible
    from the seed, independent of generation order.
    """
    clean_paths = list_images(clean_dir)
    if not clean_paths:
        raise ConfigError(f"clean image directory {clean_dir!r} contains no images")
    combos = list(combos) if combos is not None else list(STANDARD_COMBOS)
    if include_noise:
        combos += list(NOISE_COMBOS)
    combos = list(dict.fromkeys(tuple(c) for c in combos))

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = DatasetManifest(seed=seed, size=size, records=[])

    for combo in combos:
        combo_code = "+".join(combo)
        for j in range(per_combo):
            rec_id = f"{combo_code}_{j:03d}"
            pick = rng_for(seed, "pick", rec_id)
            src = clean_paths[int(pick.integers(0, len(clean_paths)))]
            clean = _load_and_fit(src, size, pick)
            recipe = sample_recipe(
                combo, int(rng_for(seed, "params", rec_id).integers(0, 2**63)))
            degraded = apply_recipe(clean, recipe)

            clean_rel = os.path.join("images", f"{rec_id}_clean.png")
            deg_rel = os.path.join("images", f"{rec_id}_deg.png")
            save_image(clean, os.path.join(out_dir, clean_rel))
            save_image(degraded, os.path.join(out_dir, deg_rel))
            manifest.records.append(ManifestRecord(
                id=rec_id,
                clean_path=clean_rel,
                degraded_path=deg_rel,
                labels=recipe.labels(),
                recipe=recipe.to_dict(),
                mixture=list(recipe.mixture().values()),
            ))

    manifest.save(os.path.join(out_dir, "manifest.json"))
    manifest.root = os.path.abspath(out_dir)
    return manifest


def _load_and_fit(path, size, rng):
    img = load_image(path)
    _, H, W = img.shape
    if H < size or W < size:
        from .freq import resize_bilinear
        from .autodiff import Tensor
        img = resize_bilinear(Tensor(img), max(size, H), max(size, W)).data
        _, H, W = img.shape
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    return np.ascontiguousarray(img[:, top:top + size, left:left + size])
