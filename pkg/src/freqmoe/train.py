"""Optimization loop, evaluation, and router-behavior dumps.

Training is single-threaded and bit-reproducible from the seed: batch
composition, crops, and flips all come from streams keyed by (seed, role,
counter). Each step samples patches at the current stage's size, runs one
batched forward, assembles L_rec + lambda * mean-over-sites(L_MGL), and
applies one bias-corrected Adam update under a single cosine learning-rate
decay spanning all scheduled steps.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .backbone import save_checkpoint
from .blocks import uniform_param
from .degrade import load_image
from .errors import ConfigError, ContractError, DataError
from .losses import mgl_loss, psnr, rec_loss, ssim, total_loss
from .util import rng_for


# ---------------------------------------------------------------------------
# Adam with cosine decay
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr0: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_optimizer(params, lr0=2e-4):
    state = OptimizerState(lr0=lr0)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(state, params, grads, lr_t):
    """One bias-corrected Adam update; parameters are modified in place."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            name = getattr(p, "name", "<unnamed>")
            raise ContractError(f"adam_step: missing gradient for parameter {name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(step, total_steps, lr0):
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(params, max_norm):
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * factor
    return total


# ---------------------------------------------------------------------------
# stage schedule
# ---------------------------------------------------------------------------

@dataclass
class Stage:
    epoch_start: int
    epoch_end: int
    patch_size: int
    batch_size: int


@dataclass
class StageSchedule:
    stages: list

    def validate(self):
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        expected = 0
        for st in self.stages:
            if st.epoch_start != expected:
                raise ConfigError(
                    f"stages must be contiguous: expected start {expected}, "
                    f"got {st.epoch_start}")
            if st.epoch_end <= st.epoch_start:
                raise ConfigError(f"empty stage: {st}")
            if st.patch_size % 8:
                raise ConfigError(f"patch_size {st.patch_size} not divisible by 8")
            if st.batch_size < 1:
                raise ConfigError(f"batch_size must be >= 1, got {st.batch_size}")
            expected = st.epoch_end
        return self

    @property
    def total_epochs(self):
        return self.stages[-1].epoch_end

    def stage_for_epoch(self, epoch):
        for i, st in enumerate(self.stages):
            if st.epoch_start <= epoch < st.epoch_end:
                return i, st
        raise ContractError(f"epoch {epoch} outside schedule")

    def to_dict(self):
        return {"stages": [vars(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d):
        return cls([Stage(**s) for s in d["stages"]]).validate()


def desk_schedule():
    """Default desk-scale progressive schedule: 4 stages over 40 epochs."""
    return StageSchedule([
        Stage(0, 20, 32, 16),
        Stage(20, 30, 48, 8),
        Stage(30, 36, 64, 4),
        Stage(36, 40, 64, 4),
    ]).validate()


def composite_schedule():
    return StageSchedule([
        Stage(0, 130, 128, 64),
        Stage(130, 190, 160, 32),
        Stage(190, 230, 192, 16),
        Stage(230, 250, 224, 16),
    ]).validate()


def allinone_schedule():
    return StageSchedule([
        Stage(0, 70, 128, 64),
        Stage(70, 120, 160, 32),
        Stage(120, 140, 192, 16),
        Stage(140, 150, 224, 16),
    ]).validate()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log_rows: list
    log_path: str
    checkpoints: list
    final_checkpoint: str


LOG_COLUMNS = ("step", "stage", "lr", "rec", "mgl", "total")


def _preflight(model, manifest, store):
    missing = [rec.id for rec in manifest.records if not store.has(rec.id)]
    if missing:
        raise DataError(f"records missing from embedding store: {missing[:5]}"
                        + ("..." if len(missing) > 5 else ""))
    dims = (store.dim_image, store.dim_joint, store.dim_answer)
    if tuple(model.config.embed_dims) != dims:
        raise DataError(
            f"model embed dims {tuple(model.config.embed_dims)} != store dims {dims}")


def _load_pairs(manifest):
    pairs = []
    for rec in manifest.records:
        deg = load_image(manifest.resolve(rec.degraded_path))
        clean = load_image(manifest.resolve(rec.clean_path))
        if deg.shape != clean.shape:
            raise DataError(f"{rec.id}: degraded/clean shapes differ")
        pairs.append((rec.id, deg, clean))
    return pairs


def _crop_flip(img, top, left, size, flip):
    patch = img[:, top:top + size, left:left + size]
    if flip:
        patch = patch[:, :, ::-1]
    return np.ascontiguousarray(patch)


def _steps_per_epoch(count, batch_size):
    batch = min(batch_size, count)
    return max(count // batch, 1), batch


def train(model, manifest, store, schedule, loss_cfg, seed, out_dir,
          no_mgl=False, lr0=2e-4, grad_clip=None, log_name="loss_log.csv"):
    """Run the staged loop; returns log rows and checkpoint paths."""
    schedule.validate()
    loss_cfg.validate()
    _preflight(model, manifest, store)
    os.makedirs(out_dir, exist_ok=True)
    pairs = _load_pairs(manifest)
    count = len(pairs)
    if count == 0:
        raise DataError("dataset is empty")

    total_steps = 0
    for epoch in range(schedule.total_epochs):
        _, st = schedule.stage_for_epoch(epoch)
        spe, _ = _steps_per_epoch(count, st.batch_size)
        total_steps += spe

    params = model.params()
    opt = init_optimizer(params, lr0)
    use_mgl = (not no_mgl) and loss_cfg.lambda_mgl > 0.0

    log_rows = []
    checkpoints = []
    step = 0
    for epoch in range(schedule.total_epochs):
        stage_idx, st = schedule.stage_for_epoch(epoch)
        spe, batch_size = _steps_per_epoch(count, st.batch_size)
        perm = rng_for(seed, "epoch", epoch).permutation(count)
        for b in range(spe):
            chosen = perm[b * batch_size:(b + 1) * batch_size]
            aug = rng_for(seed, "aug", step)
            deg_batch = np.empty((len(chosen), 3, st.patch_size, st.patch_size), np.float32)
            clean_batch = np.empty_like(deg_batch)
            batch_ids = []
            for j, idx in enumerate(chosen):
                rec_id, deg, clean = pairs[idx]
                _, H, W = deg.shape
                if H < st.patch_size or W < st.patch_size:
                    raise DataError(
                        f"{rec_id}: image {H}x{W} smaller than patch {st.patch_size}")
                top = int(aug.integers(0, H - st.patch_size + 1))
                left = int(aug.integers(0, W - st.patch_size + 1))
                flip = bool(aug.integers(0, 2))
                deg_batch[j] = _crop_flip(deg, top, left, st.patch_size, flip)
                clean_batch[j] = _crop_flip(clean, top, left, st.patch_size, flip)
                batch_ids.append(rec_id)

            ei, ej, ea = store.rows(batch_ids)
            out, routers = model.forward_batch(deg_batch, ei, ej, ea)
            rec = rec_loss(out, Tensor(clean_batch), loss_cfg.alpha_freq)
            if routers and len(batch_ids) > 1:
                site_losses = [mgl_loss(ea, r.s) for r in routers]
                mgl = site_losses[0]
                for extra in site_losses[1:]:
                    mgl = ad.add(mgl, extra)
                mgl = ad.scale(mgl, 1.0 / len(site_losses))
            else:
                mgl = Tensor(np.zeros((), dtype=model.dtype))
            total = total_loss(rec, mgl, loss_cfg) if use_mgl else rec

            model.zero_grads()
            backward(total)
            if grad_clip is not None:
                clip_gradients(params, grad_clip)
            lr_t = cosine_lr(step, total_steps, lr0)
            adam_step(opt, params, [p.grad for p in params], lr_t)
            log_rows.append((step, stage_idx, lr_t, rec.item(), mgl.item(), total.item()))
            step += 1

        if epoch + 1 == st.epoch_end:
            path = os.path.join(out_dir, f"checkpoint_stage{stage_idx}.ckpt")
            save_checkpoint(model, path)
            checkpoints.append(path)

    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    save_checkpoint(model, final_path)
    log_path = os.path.join(out_dir, log_name)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log_rows:
            writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
    return TrainResult(log_rows=log_rows, log_path=log_path,
                       checkpoints=checkpoints, final_checkpoint=final_path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def pad_to_multiple(img, multiple=8):
    _, H, W = img.shape
    ph = (-H) % multiple
    pw = (-W) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (H, W)


def restore_image(model, img, triplet):
    """Whole-image restoration with reflect padding; output clamped to [0,1]."""
    padded, (H, W) = pad_to_multiple(np.asarray(img, dtype=np.float32))
    out, _ = model.forward(padded, triplet)
    return np.clip(out.data[:, :H, :W], 0.0, 1.0)


def evaluate(model, manifest, store, out_csv=None):
    """Per-record PSNR/SSIM plus per-combination and overall averages."""
    _preflight(model, manifest, store)
    rows = []
    by_combo = {}
    for rec in manifest.records:
        deg = load_image(manifest.resolve(rec.degraded_path))
        clean = load_image(manifest.resolve(rec.clean_path))
        restored = restore_image(model, deg, store.get(rec.id))
        p = psnr(restored, clean)
        s = ssim(restored, clean)
        combo = "+".join(rec.labels) if rec.labels else "clean"
        rows.append({"sample_id": rec.id, "labels": combo,
                     "psnr_db": p, "ssim": s})
        by_combo.setdefault(combo, []).append((p, s))

    for combo in sorted(by_combo):
        vals = np.array(by_combo[combo])
        rows.append({"sample_id": "avg", "labels": combo,
                     "psnr_db": float(vals[:, 0].mean()),
                     "ssim": float(vals[:, 1].mean())})
    everything = np.array([(r["psnr_db"], r["ssim"]) for r in rows
                           if r["sample_id"] not in ("avg", "overall")])
    rows.append({"sample_id": "overall", "labels": "all",
                 "psnr_db": float(everything[:, 0].mean()),
                 "ssim": float(everything[:, 1].mean())})

    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("sample_id", "labels", "psnr_db", "ssim"))
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "psnr_db": repr(row["psnr_db"]),
                                 "ssim": repr(row["ssim"])})
    return rows


# ---------------------------------------------------------------------------
# router dumps
# ---------------------------------------------------------------------------

def router_dump(model, store, batch_ids, manifest, weights_csv, sims_csv):
    """Per-sample gate rows + expert energies, and the similarity matrices.

    weights CSV: one row per (sample, site) with gate and energy columns.
    sims CSV: long-form entries of Sim(E_Answer) and Sim(S_site) per site.
    """
    from .guidance import pairwise_cosine

    for rid in batch_ids:
        if not store.has(rid):
            raise DataError(f"router_dump: unknown embedding id {rid!r}")
    by_id = {rec.id: rec for rec in manifest.records}
    for rid in batch_ids:
        if rid not in by_id:
            raise DataError(f"router_dump: id {rid!r} not in dataset manifest")

    imgs = [pad_to_multiple(load_image(manifest.resolve(by_id[r].degraded_path)))[0]
            for r in batch_ids]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DataError(f"router_dump: images must share one shape, got {sorted(shapes)}")
    ei, ej, ea = store.rows(batch_ids)
    _, routers = model.forward_batch(np.stack(imgs), ei, ej, ea)

    n = model.config.num_experts
    with open(weights_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "site"]
                        + [f"s_{i}" for i in range(n)]
                        + [f"energy_{i}" for i in range(n)])
        for r in routers:
            for b, rid in enumerate(batch_ids):
                writer.writerow([rid, r.site]
                                + [repr(float(v)) for v in r.s.data[b]]
                                + [repr(float(v)) for v in r.expert_energy[b]])

    sim_e = pairwise_cosine(ea)
    with open(sims_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "site", "row_id", "col_id", "value"])
        for r in routers:
            sim_s = pairwise_cosine(r.s.data)
            for i, ri in enumerate(batch_ids):
                for j, rj in enumerate(batch_ids):
                    writer.writerow(["e_answer", r.site, ri, rj, repr(float(sim_e[i, j]))])
                    writer.writerow(["router", r.site, ri, rj, repr(float(sim_s[i, j]))])
    return routers


# ---------------------------------------------------------------------------
# router-only alignment probe
# ---------------------------------------------------------------------------

def optimize_router_alignment(e_answer_rows, num_experts, steps=500, lr=1e-2, seed=0):
    """Optimize a standalone router under the alignment loss alone.

    Returns the per-step loss values (first entry = initial loss).
    """
    rows = np.asarray(e_answer_rows, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    w = uniform_param(rng, "router.weight", (rows.shape[1], num_experts),
                      rows.shape[1], np.float64)
    opt = init_optimizer([w], lr)
    losses = []
    e_t = Tensor(rows)
    for step in range(steps):
        gates = ad.sigmoid(ad.clip(ad.matmul(e_t, w), -16.0, 16.0))
        loss = mgl_loss(rows, gates)
        losses.append(loss.item())
        w.zero_grad()
        backward(loss)
        adam_step(opt, [w], [w.grad], lr)
    gates = ad.sigmoid(ad.clip(ad.matmul(e_t, w), -16.0, 16.0))
    losses.append(mgl_loss(rows, gates).item())
    return losses
