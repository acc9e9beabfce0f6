"""Network building blocks.

* MdtaBlock   - transposed (channel) attention with depthwise-refined Q/K/V,
                L2-normalized Q/K rows and a learnable per-head temperature;
                residual output q_src + proj(attn @ V).
* GdfnBlock   - gated depthwise-conv feed-forward with channel expansion.
* TransformerBlock - MDTA self-attention followed by GDFN.
* MgfbBlock   - cross-attention from flattened pixels (queries) onto tokens
                reshaped out of an external embedding (keys/values), residual.
* MofeModule  - frequency experts over the high-frequency Haar subbands of
                the resized degraded image, mixed by a sigmoid router driven
                by an external embedding, fused back via a cross MDTA block.

All weights initialize uniform in +-1/sqrt(fan_in), biases zero, temperature
exponents zero. Blocks accept [C,H,W] or [B,C,H,W] features.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .freq import dwt_haar, resize_bilinear


def uniform_param(rng, name, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(name, rng.uniform(-bound, bound, size=shape), dtype=dtype)


def zeros_param(name, shape, dtype):
    return Parameter(name, np.zeros(shape), dtype=dtype)


def ones_param(name, shape, dtype):
    return Parameter(name, np.ones(shape), dtype=dtype)


class Block:
    """Base with parameter discovery over attributes (insertion-ordered)."""

    def params(self):
        out = []
        for value in self.__dict__.values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Block):
                out.extend(value.params())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Parameter):
                        out.append(item)
                    elif isinstance(item, Block):
                        out.extend(item.params())
        return out


def _as_batched(t, kind="feature"):
    if t.ndim == 3:
        return ad.reshape(t, (1,) + tuple(t.shape)), True
    if t.ndim == 4:
        return t, False
    raise DimensionError(f"{kind}: expected 3 or 4 dims, got shape {t.shape}")


def _as_rows(e):
    if e.ndim == 1:
        return ad.reshape(e, (1, e.shape[0])), True
    if e.ndim == 2:
        return e, False
    raise DimensionError(f"embedding: expected 1 or 2 dims, got shape {e.shape}")


@dataclass
class RouterWeights:
    """Per-site expert gate vector(s); entries strictly in (0,1)."""

    s: Tensor
    site: str = ""
    expert_energy: np.ndarray | None = None


class MdtaBlock(Block):
    """kv_dim=None builds a self-attention block (kv path shares the q norm);
    passing kv_dim builds a cross block that requires an explicit kv_src."""

    def __init__(self, rng, prefix, dim, heads, kv_dim=None, pre_norm=True, dtype=np.float32):
        self.cross = kv_dim is not None
        kv_dim = dim if kv_dim is None else kv_dim
        if dim % heads or kv_dim % heads:
            raise ConfigError(f"{prefix}: dims ({dim}, {kv_dim}) not divisible by heads={heads}")
        self.dim, self.kv_dim, self.heads = dim, kv_dim, heads
        self.pre_norm = pre_norm
        if pre_norm:
            self.norm_q_w = ones_param(f"{prefix}.norm_q.weight", (dim,), dtype)
            self.norm_q_b = zeros_param(f"{prefix}.norm_q.bias", (dim,), dtype)
        if pre_norm and self.cross:
            self.norm_kv_w = ones_param(f"{prefix}.norm_kv.weight", (kv_dim,), dtype)
            self.norm_kv_b = zeros_param(f"{prefix}.norm_kv.bias", (kv_dim,), dtype)
        self.wq_point = uniform_param(rng, f"{prefix}.q_point.weight", (dim, dim, 1, 1), dim, dtype)
        self.bq_point = zeros_param(f"{prefix}.q_point.bias", (dim,), dtype)
        self.wq_depth = uniform_param(rng, f"{prefix}.q_depth.weight", (dim, 1, 3, 3), 9, dtype)
        self.bq_depth = zeros_param(f"{prefix}.q_depth.bias", (dim,), dtype)
        self.wk_point = uniform_param(rng, f"{prefix}.k_point.weight", (kv_dim, kv_dim, 1, 1), kv_dim, dtype)
        self.bk_point = zeros_param(f"{prefix}.k_point.bias", (kv_dim,), dtype)
        self.wk_depth = uniform_param(rng, f"{prefix}.k_depth.weight", (kv_dim, 1, 3, 3), 9, dtype)
        self.bk_depth = zeros_param(f"{prefix}.k_depth.bias", (kv_dim,), dtype)
        self.wv_point = uniform_param(rng, f"{prefix}.v_point.weight", (kv_dim, kv_dim, 1, 1), kv_dim, dtype)
        self.bv_point = zeros_param(f"{prefix}.v_point.bias", (kv_dim,), dtype)
        self.wv_depth = uniform_param(rng, f"{prefix}.v_depth.weight", (kv_dim, 1, 3, 3), 9, dtype)
        self.bv_depth = zeros_param(f"{prefix}.v_depth.bias", (kv_dim,), dtype)
        self.w_proj = uniform_param(rng, f"{prefix}.proj.weight", (dim, dim, 1, 1), dim, dtype)
        self.b_proj = zeros_param(f"{prefix}.proj.bias", (dim,), dtype)
        self.temp_exp = zeros_param(f"{prefix}.temperature_exp", (heads,), dtype)

    def forward(self, q_src, kv_src=None, return_attn=False):
        if kv_src is q_src:
            kv_src = None
        if self.cross and kv_src is None:
            raise ContractError("mdta: cross-attention block requires kv_src")
        if not self.cross and kv_src is not None:
            raise ContractError("mdta: self-attention block takes no separate kv_src")
        q4, squeeze = _as_batched(q_src, "mdta q_src")
        if kv_src is None:
            kv4 = None
        else:
            kv4, _ = _as_batched(kv_src, "mdta kv_src")
            if kv4.shape[2:] != q4.shape[2:] or kv4.shape[0] != q4.shape[0]:
                raise DimensionError(
                    f"mdta: kv spatial/batch {kv4.shape} does not match q {q4.shape}")
        B, C, H, W = q4.shape
        hw = H * W
        dh = C // self.heads
        dkv = self.kv_dim // self.heads

        qn = ad.layer_norm(q4, self.norm_q_w, self.norm_q_b, axis=1) if self.pre_norm else q4
        if kv4 is None:
            kvn = qn
        else:
            kvn = ad.layer_norm(kv4, self.norm_kv_w, self.norm_kv_b, axis=1) if self.pre_norm else kv4

        q = ad.conv2d(ad.conv2d(qn, self.wq_point, self.bq_point),
                      self.wq_depth, self.bq_depth, groups=self.dim)
        k = ad.conv2d(ad.conv2d(kvn, self.wk_point, self.bk_point),
                      self.wk_depth, self.bk_depth, groups=self.kv_dim)
        v = ad.conv2d(ad.conv2d(kvn, self.wv_point, self.bv_point),
                      self.wv_depth, self.bv_depth, groups=self.kv_dim)

        q = ad.l2_normalize(ad.reshape(q, (B * self.heads, dh, hw)), axis=-1)
        k = ad.l2_normalize(ad.reshape(k, (B * self.heads, dkv, hw)), axis=-1)
        v = ad.reshape(v, (B * self.heads, dkv, hw))

        logits = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
        logits = ad.reshape(logits, (B, self.heads, dh, dkv))
        logits = ad.mul_along_axis(logits, ad.texp(self.temp_exp), axis=1)
        attn = ad.softmax(ad.reshape(logits, (B * self.heads, dh, dkv)), axis=-1)

        out = ad.reshape(ad.matmul(attn, v), (B, C, H, W))
        out = ad.conv2d(out, self.w_proj, self.b_proj)
        res = ad.add(q4, out)
        if squeeze:
            res = ad.reshape(res, (C, H, W))
        return (res, attn) if return_attn else res


class GdfnBlock(Block):
    def __init__(self, rng, prefix, dim, gamma, dtype=np.float32):
        hidden = int(round(gamma * dim))
        self.dim, self.hidden = dim, hidden
        self.norm_w = ones_param(f"{prefix}.norm.weight", (dim,), dtype)
        self.norm_b = zeros_param(f"{prefix}.norm.bias", (dim,), dtype)
        self.w_in = uniform_param(rng, f"{prefix}.expand.weight", (2 * hidden, dim, 1, 1), dim, dtype)
        self.b_in = zeros_param(f"{prefix}.expand.bias", (2 * hidden,), dtype)
        self.w_dw = uniform_param(rng, f"{prefix}.depth.weight", (2 * hidden, 1, 3, 3), 9, dtype)
        self.b_dw = zeros_param(f"{prefix}.depth.bias", (2 * hidden,), dtype)
        self.w_out = uniform_param(rng, f"{prefix}.proj.weight", (dim, hidden, 1, 1), hidden, dtype)
        self.b_out = zeros_param(f"{prefix}.proj.bias", (dim,), dtype)

    def forward(self, x):
        x4, squeeze = _as_batched(x, "gdfn input")
        y = ad.layer_norm(x4, self.norm_w, self.norm_b, axis=1)
        y = ad.conv2d(y, self.w_in, self.b_in)
        y = ad.conv2d(y, self.w_dw, self.b_dw, groups=2 * self.hidden)
        gate, value = ad.split(y, 2, axis=1)
        y = ad.conv2d(ad.mul(ad.gelu(gate), value), self.w_out, self.b_out)
        res = ad.add(x4, y)
        return ad.reshape(res, x.shape) if squeeze else res


class TransformerBlock(Block):
    def __init__(self, rng, prefix, dim, heads, gamma, dtype=np.float32):
        self.attn = MdtaBlock(rng, f"{prefix}.attn", dim, heads, dtype=dtype)
        self.ffn = GdfnBlock(rng, f"{prefix}.ffn", dim, gamma, dtype=dtype)

    def forward(self, x):
        return self.ffn.forward(self.attn.forward(x))


class MgfbBlock(Block):
    """Embedding-conditioned cross-attention with a residual onto the feature."""

    def __init__(self, rng, prefix, dim, embed_dim, tokens, dtype=np.float32):
        if embed_dim % tokens:
            raise ConfigError(
                f"{prefix}: embedding width {embed_dim} not divisible by token count {tokens}")
        self.dim, self.embed_dim, self.tokens = dim, embed_dim, tokens
        token_width = embed_dim // tokens
        self.w_q = uniform_param(rng, f"{prefix}.w_q", (dim, dim), dim, dtype)
        self.w_k = uniform_param(rng, f"{prefix}.w_k", (token_width, dim), token_width, dtype)
        self.w_v = uniform_param(rng, f"{prefix}.w_v", (token_width, dim), token_width, dtype)
        self.w_out = uniform_param(rng, f"{prefix}.w_out", (dim, dim), dim, dtype)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, f, e, return_attn=False):
        f4, squeeze = _as_batched(f, "mgfb feature")
        rows, _ = _as_rows(e)
        B, C, H, W = f4.shape
        if rows.shape[0] != B:
            raise DimensionError(f"mgfb: batch mismatch, feature {B} vs embedding {rows.shape[0]}")
        if rows.shape[1] != self.embed_dim:
            raise DimensionError(
                f"mgfb: embedding width {rows.shape[1]} != configured {self.embed_dim}")

        toks = ad.reshape(rows, (B, self.tokens, self.embed_dim // self.tokens))
        k = ad.matmul(toks, self.w_k)
        v = ad.matmul(toks, self.w_v)
        q = ad.matmul(ad.reshape(ad.transpose(f4, (0, 2, 3, 1)), (B, H * W, C)), self.w_q)
        attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), self.scale), axis=-1)
        out = ad.matmul(ad.matmul(attn, v), self.w_out)
        out = ad.transpose(ad.reshape(out, (B, H, W, C)), (0, 3, 1, 2))
        res = ad.add(f4, out)
        if squeeze:
            res = ad.reshape(res, (C, H, W))
        return (res, attn) if return_attn else res


class FrequencyExpert(Block):
    """Conv-GeLU-Conv over the concatenated high-frequency subbands."""

    def __init__(self, rng, prefix, channels, dtype=np.float32):
        fan = channels * 9
        self.w1 = uniform_param(rng, f"{prefix}.conv1.weight", (channels, channels, 3, 3), fan, dtype)
        self.b1 = zeros_param(f"{prefix}.conv1.bias", (channels,), dtype)
        self.w2 = uniform_param(rng, f"{prefix}.conv2.weight", (channels, channels, 3, 3), fan, dtype)
        self.b2 = zeros_param(f"{prefix}.conv2.bias", (channels,), dtype)

    def forward(self, x):
        return ad.conv2d(ad.gelu(ad.conv2d(x, self.w1, self.b1)), self.w2, self.b2)


class MofeModule(Block):
    HF_CHANNELS = 3  # subbands kept per image channel: LH, HL, HH

    def __init__(self, rng, prefix, dim, heads, num_experts, answer_dim,
                 image_channels=3, dtype=np.float32):
        if num_experts < 1:
            raise ConfigError(f"{prefix}: need at least one expert, got {num_experts}")
        self.site = prefix
        self.dim = dim
        self.num_experts = num_experts
        self.answer_dim = answer_dim
        self.hf_channels = self.HF_CHANNELS * image_channels
        self.experts = [
            FrequencyExpert(rng, f"{prefix}.expert{i}", self.hf_channels, dtype)
            for i in range(num_experts)
        ]
        self.w_router = uniform_param(
            rng, f"{prefix}.router.weight", (answer_dim, num_experts), answer_dim, dtype)
        self.w_proj = uniform_param(
            rng, f"{prefix}.hf_proj.weight", (dim, self.hf_channels, 1, 1), self.hf_channels, dtype)
        self.b_proj = zeros_param(f"{prefix}.hf_proj.bias", (dim,), dtype)
        self.fusion = MdtaBlock(rng, f"{prefix}.fusion", dim, heads, kv_dim=dim, dtype=dtype)

    LOGIT_CLAMP = 16.0  # keeps sigmoid strictly inside (0,1) in f32 and f64

    def route(self, e_answer):
        rows, single = _as_rows(e_answer)
        if rows.shape[1] != self.answer_dim:
            raise DimensionError(
                f"route: embedding width {rows.shape[1]} != router width {self.answer_dim}")
        logits = ad.clip(ad.matmul(rows, self.w_router), -self.LOGIT_CLAMP, self.LOGIT_CLAMP)
        s = ad.sigmoid(logits)
        if single:
            s = ad.reshape(s, (self.num_experts,))
        return RouterWeights(s=s, site=self.site)

    def forward(self, f, i_deg, e_answer):
        f4, squeeze = _as_batched(f, "mofe feature")
        img4, _ = _as_batched(i_deg, "mofe degraded image")
        if img4.shape[1] != 3:
            raise ContractError(f"mofe: degraded image must have 3 channels, got {img4.shape}")
        if img4.shape[0] != f4.shape[0]:
            raise DimensionError(f"mofe: batch mismatch {img4.shape[0]} vs {f4.shape[0]}")
        B, C, H, W = f4.shape

        resized = resize_bilinear(img4, 2 * H, 2 * W)
        bands = dwt_haar(resized)
        f_hf = ad.concat([bands.lh, bands.hl, bands.hh], axis=1)

        weights = self.route(e_answer)
        s_rows = weights.s if weights.s.ndim == 2 else ad.reshape(weights.s, (1, self.num_experts))

        outs = [expert.forward(f_hf) for expert in self.experts]
        stacked = ad.concat(
            [ad.reshape(o, (B, 1, self.hf_channels * H * W)) for o in outs], axis=1)
        mixed = ad.matmul(ad.reshape(s_rows, (B, 1, self.num_experts)), stacked)
        mixed = ad.reshape(mixed, (B, self.hf_channels, H, W))

        hf_feature = ad.conv2d(mixed, self.w_proj, self.b_proj)
        fused = self.fusion.forward(f4, hf_feature)
        if squeeze:
            fused = ad.reshape(fused, (C, H, W))

        energy = np.stack(
            [np.sqrt((o.data.reshape(B, -1) ** 2).sum(axis=1)) for o in outs], axis=1)
        weights.expert_energy = energy[0] if squeeze else energy
        return fused, weights
