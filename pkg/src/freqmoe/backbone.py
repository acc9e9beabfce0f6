"""4-level encoder-decoder restoration network.

Layout per level i (dims d[i], heads h[i], blocks n[i]):

    patch-embed 3x3 -> [enc1: MGFB + n0 blocks] -> down
      -> MoFE -> [enc2] -> down -> MoFE -> [enc3] -> down -> MoFE -> [latent]
      -> MoFE -> up -> skip/reduce -> [dec3 + MGFB] -> MoFE -> up -> ...
      -> [dec1 + MGFB at 2*d0-ish width] -> refinement -> 3x3 -> + input

Encoder MGFBs consume the image embedding, decoder MGFBs the joint
embedding, every MoFE the answer embedding plus the resized degraded
input. Downsampling is space-to-depth + 1x1 conv; upsampling the inverse.
The output is a global residual on top of the degraded input (unclamped;
evaluation clamps outside the graph).

Checkpoints are one file: a single JSON header line (config + an entry per
parameter with name/shape/byte offset) followed by a flat little-endian
float32 payload in entry order. Round-trips are bit-exact.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (Block, MgfbBlock, MofeModule, TransformerBlock,
                     uniform_param, zeros_param)
from .errors import ConfigError, ContractError, DimensionError

SITE_NAMES = ("enc2", "enc3", "enc4", "dec4", "dec3", "dec2")


@dataclass
class ModelConfig:
    level_blocks: tuple = (4, 6, 6, 8)
    level_heads: tuple = (1, 2, 4, 8)
    level_dims: tuple = (48, 96, 192, 384)
    refinement_blocks: int = 4
    gdfn_gamma: float = 2.66
    num_experts: int = 8
    embed_dims: tuple = (64, 64, 64)  # (image, joint, answer)
    token_count: int = 8
    mofe_sites: tuple = (True, True, True, True, True, True)

    def validate(self):
        for name in ("level_blocks", "level_heads", "level_dims"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name}: expected 4 entries, got {getattr(self, name)}")
        for i in range(4):
            if self.level_dims[i] % self.level_heads[i]:
                raise ConfigError(
                    f"level_dims[{i}]={self.level_dims[i]} not divisible by "
                    f"level_heads[{i}]={self.level_heads[i]}")
        for i in (1, 2, 3):
            if self.level_dims[i] % 2:
                raise ConfigError(f"level_dims[{i}] must be even for up/downsampling")
        if self.dec1_width() % self.level_heads[0]:
            raise ConfigError(
                f"decoder level-1 width {self.dec1_width()} not divisible by "
                f"level_heads[0]={self.level_heads[0]}")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if len(self.embed_dims) != 3:
            raise ConfigError(f"embed_dims: expected 3 entries, got {self.embed_dims}")
        for role, dim in zip(("image", "joint"), self.embed_dims[:2]):
            if dim % self.token_count:
                raise ConfigError(
                    f"embed_dims[{role}]={dim} not divisible by token_count={self.token_count}")
        if len(self.mofe_sites) != 6:
            raise ConfigError(f"mofe_sites: expected 6 flags, got {self.mofe_sites}")
        if self.refinement_blocks < 0:
            raise ConfigError("refinement_blocks must be >= 0")
        if self.gdfn_gamma <= 0:
            raise ConfigError("gdfn_gamma must be positive")
        return self

    def dec1_width(self):
        return self.level_dims[1] // 2 + self.level_dims[0]

    def to_dict(self):
        d = asdict(self)
        for key in ("level_blocks", "level_heads", "level_dims", "embed_dims", "mofe_sites"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        for key in ("level_blocks", "level_heads", "level_dims", "embed_dims", "mofe_sites"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs).validate()


def toy_config(**overrides):
    cfg = ModelConfig(level_blocks=(1, 1, 1, 1), level_heads=(1, 1, 2, 2),
                      level_dims=(8, 16, 32, 64), refinement_blocks=1,
                      gdfn_gamma=2.0, num_experts=4)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def full_config(**overrides):
    cfg = ModelConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def _space_to_depth(x):
    B, C, H, W = x.shape
    y = ad.reshape(x, (B, C, H // 2, 2, W // 2, 2))
    y = ad.transpose(y, (0, 1, 3, 5, 2, 4))
    return ad.reshape(y, (B, 4 * C, H // 2, W // 2))


def _depth_to_space(x):
    B, C, H, W = x.shape
    y = ad.reshape(x, (B, C // 4, 2, 2, H, W))
    y = ad.transpose(y, (0, 1, 4, 2, 5, 3))
    return ad.reshape(y, (B, C // 4, 2 * H, 2 * W))


class Downsample(Block):
    def __init__(self, rng, prefix, c_in, c_out, dtype):
        self.w = uniform_param(rng, f"{prefix}.weight", (c_out, 4 * c_in, 1, 1), 4 * c_in, dtype)
        self.b = zeros_param(f"{prefix}.bias", (c_out,), dtype)

    def forward(self, x):
        return ad.conv2d(_space_to_depth(x), self.w, self.b)


class Upsample(Block):
    def __init__(self, rng, prefix, c_in, dtype):
        self.w = uniform_param(rng, f"{prefix}.weight", (2 * c_in, c_in, 1, 1), c_in, dtype)
        self.b = zeros_param(f"{prefix}.bias", (2 * c_in,), dtype)

    def forward(self, x):
        return _depth_to_space(ad.conv2d(x, self.w, self.b))


class Stack(Block):
    def __init__(self, rng, prefix, count, dim, heads, gamma, dtype):
        self.blocks = [
            TransformerBlock(rng, f"{prefix}.block{i}", dim, heads, gamma, dtype)
            for i in range(count)
        ]

    def forward(self, x):
        for b in self.blocks:
            x = b.forward(x)
        return x


class RestorationModel(Block):
    def __init__(self, config, seed):
        config.validate()
        self.config = config
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        dtype = np.float32
        self.dtype = dtype
        d = config.level_dims
        h = config.level_heads
        n = config.level_blocks
        gamma = config.gdfn_gamma
        di, dj, da = config.embed_dims
        k = config.token_count
        ne = config.num_experts

        self.patch_embed_w = uniform_param(rng, "patch_embed.weight", (d[0], 3, 3, 3), 27, dtype)
        self.patch_embed_b = zeros_param("patch_embed.bias", (d[0],), dtype)

        # encoder (level 4 is the latent stage)
        self.enc_mgfb = []
        self.enc_stack = []
        for lvl in range(4):
            mg = MgfbBlock(rng, f"enc{lvl + 1}.mgfb", d[lvl], di, k, dtype)
            mg.role = "e_image"
            self.enc_mgfb.append(mg)
            self.enc_stack.append(Stack(rng, f"enc{lvl + 1}", n[lvl], d[lvl], h[lvl], gamma, dtype))
        self.down = [
            Downsample(rng, f"down{lvl + 1}", d[lvl], d[lvl + 1], dtype) for lvl in range(3)
        ]

        # six candidate expert sites: after each downsample, before each upsample
        site_dims = {"enc2": d[1], "enc3": d[2], "enc4": d[3],
                     "dec4": d[3], "dec3": d[2], "dec2": d[1]}
        site_heads = {"enc2": h[1], "enc3": h[2], "enc4": h[3],
                      "dec4": h[3], "dec3": h[2], "dec2": h[1]}
        self.mofe = {}
        self.mofe_list = []  # parameter discovery
        for name, enabled in zip(SITE_NAMES, config.mofe_sites):
            if not enabled:
                continue
            mod = MofeModule(rng, f"mofe_{name}", site_dims[name], site_heads[name],
                             ne, da, dtype=dtype)
            self.mofe[name] = mod
            self.mofe_list.append(mod)

        self.up = [Upsample(rng, f"up{lvl}", d[lvl - 1], dtype) for lvl in (4, 3, 2)]
        self.reduce3_w = uniform_param(
            rng, "reduce3.weight", (d[2], d[3] // 2 + d[2], 1, 1), d[3] // 2 + d[2], dtype)
        self.reduce3_b = zeros_param("reduce3.bias", (d[2],), dtype)
        self.reduce2_w = uniform_param(
            rng, "reduce2.weight", (d[1], d[2] // 2 + d[1], 1, 1), d[2] // 2 + d[1], dtype)
        self.reduce2_b = zeros_param("reduce2.bias", (d[1],), dtype)

        w1 = config.dec1_width()
        self.dec_stack = [
            Stack(rng, "dec3", n[2], d[2], h[2], gamma, dtype),
            Stack(rng, "dec2", n[1], d[1], h[1], gamma, dtype),
            Stack(rng, "dec1", n[0], w1, h[0], gamma, dtype),
        ]
        self.dec_mgfb = []
        for name, dim, heads in (("dec3", d[2], h[2]), ("dec2", d[1], h[1]), ("dec1", w1, h[0])):
            mg = MgfbBlock(rng, f"{name}.mgfb", dim, dj, k, dtype)
            mg.role = "e_joint"
            self.dec_mgfb.append(mg)

        self.refinement = Stack(rng, "refine", config.refinement_blocks, w1, h[0], gamma, dtype)
        self.output_w = uniform_param(rng, "output.weight", (3, w1, 3, 3), w1 * 9, dtype)
        self.output_b = zeros_param("output.bias", (3,), dtype)

        names = [p.name for p in self.params()]
        if len(names) != len(set(names)):
            dupes = sorted({x for x in names if names.count(x) > 1})
            raise ContractError(f"duplicate parameter names: {dupes}")

    # -- metadata -------------------------------------------------------------
    def embedding_wiring(self):
        """(block name, embedding role) for every fusion block, for wiring checks."""
        wiring = [(f"enc{i + 1}.mgfb", blk.role) for i, blk in enumerate(self.enc_mgfb)]
        wiring += [(f"dec{3 - i}.mgfb", blk.role) for i, blk in enumerate(self.dec_mgfb)]
        wiring += [(m.site, "e_answer") for m in self.mofe_list]
        return wiring

    def active_sites(self):
        return [name for name in SITE_NAMES if name in self.mofe]

    def param_dict(self):
        return {p.name: p for p in self.params()}

    def zero_grads(self):
        for p in self.params():
            p.grad = None

    # -- forward --------------------------------------------------------------
    def forward_batch(self, images, e_image, e_joint, e_answer):
        """Batched forward: images [B,3,H,W]; embeddings [B,D_*]."""
        x = images if isinstance(images, Tensor) else Tensor(
            np.asarray(images, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"forward: expected [B,3,H,W] images, got {x.shape}")
        B, _, H, W = x.shape
        if H % 8 or W % 8:
            raise DimensionError(
                f"forward: spatial size ({H}, {W}) must be divisible by 8; "
                "reflect-pad the input and crop the output")
        ei = _embed_rows(e_image, B, self.config.embed_dims[0], "e_image", self.dtype)
        ej = _embed_rows(e_joint, B, self.config.embed_dims[1], "e_joint", self.dtype)
        ea = _embed_rows(e_answer, B, self.config.embed_dims[2], "e_answer", self.dtype)

        routers = []

        def run_site(name, feat):
            if name not in self.mofe:
                return feat
            feat, weights = self.mofe[name].forward(feat, x, ea)
            routers.append(weights)
            return feat

        f = ad.conv2d(x, self.patch_embed_w, self.patch_embed_b)
        f = self.enc_mgfb[0].forward(f, ei)
        f = self.enc_stack[0].forward(f)
        skip1 = f

        f = self.down[0].forward(f)
        f = run_site("enc2", f)
        f = self.enc_mgfb[1].forward(f, ei)
        f = self.enc_stack[1].forward(f)
        skip2 = f

        f = self.down[1].forward(f)
        f = run_site("enc3", f)
        f = self.enc_mgfb[2].forward(f, ei)
        f = self.enc_stack[2].forward(f)
        skip3 = f

        f = self.down[2].forward(f)
        f = run_site("enc4", f)
        f = self.enc_mgfb[3].forward(f, ei)
        f = self.enc_stack[3].forward(f)

        f = run_site("dec4", f)
        f = self.up[0].forward(f)
        f = ad.conv2d(ad.concat([f, skip3], axis=1), self.reduce3_w, self.reduce3_b)
        f = self.dec_stack[0].forward(f)
        f = self.dec_mgfb[0].forward(f, ej)

        f = run_site("dec3", f)
        f = self.up[1].forward(f)
        f = ad.conv2d(ad.concat([f, skip2], axis=1), self.reduce2_w, self.reduce2_b)
        f = self.dec_stack[1].forward(f)
        f = self.dec_mgfb[1].forward(f, ej)

        f = run_site("dec2", f)
        f = self.up[2].forward(f)
        f = ad.concat([f, skip1], axis=1)
        f = self.dec_stack[2].forward(f)
        f = self.dec_mgfb[2].forward(f, ej)

        f = self.refinement.forward(f)
        residual = ad.conv2d(f, self.output_w, self.output_b)
        return ad.add(x, residual), routers

    def forward(self, i_deg, guidance):
        """Single-sample forward: i_deg [3,H,W], guidance a GuidanceTriplet."""
        img = i_deg if isinstance(i_deg, Tensor) else Tensor(np.asarray(i_deg, dtype=self.dtype))
        if img.ndim != 3:
            raise DimensionError(f"forward: expected [3,H,W] image, got {img.shape}")
        batch = ad.reshape(img, (1,) + tuple(img.shape))
        out, routers = self.forward_batch(
            batch, guidance.e_image[None], guidance.e_joint[None], guidance.e_answer[None])
        single = ad.reshape(out, tuple(img.shape))
        for r in routers:
            r.s = ad.reshape(r.s, (r.s.shape[-1],))
            if r.expert_energy is not None:
                r.expert_energy = r.expert_energy[0]
        return single, routers


def _embed_rows(e, batch, dim, name, dtype):
    t = e if isinstance(e, Tensor) else Tensor(np.asarray(e, dtype=dtype))
    if t.ndim == 1:
        t = ad.reshape(t, (1, t.shape[0]))
    if t.shape != (batch, dim):
        raise DimensionError(f"{name}: expected shape ({batch}, {dim}), got {t.shape}")
    return t


def build(config, seed):
    """Deterministically initialized model; same seed -> bit-identical params."""
    return RestorationModel(config, seed)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "freqmoe-checkpoint"


def save_checkpoint(model, path):
    """JSON header line (config + name/shape/offset entries) + f32le payload."""
    entries = []
    blobs = []
    offset = 0
    for p in model.params():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "seed": model.seed,
        "config": model.config.to_dict(),
        "payload_bytes": offset,
        "entries": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path):
    """-> (header dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != 1:
        raise ConfigError(f"{path}: not a version-1 {CHECKPOINT_FORMAT} file")
    if len(payload) != header["payload_bytes"]:
        raise ConfigError(
            f"{path}: payload is {len(payload)} bytes, header promises "
            f"{header['payload_bytes']}")
    arrays = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header, arrays


def load_model(path):
    """Rebuild the model stored at ``path`` (architecture + weights)."""
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    model = RestorationModel(config, header.get("seed", 0))
    params = model.param_dict()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise ConfigError(f"{path}: parameter mismatch; missing={missing} extra={extra}")
    for name, arr in arrays.items():
        if params[name].shape != arr.shape:
            raise ConfigError(
                f"{path}: {name} has shape {arr.shape}, model expects {params[name].shape}")
        params[name].data[...] = arr.astype(model.dtype)
    return model
