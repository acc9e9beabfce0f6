"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one
``ACCEPTANCE <criterion>: PASS`` line per criterion. The end-to-end
criterion trains a toy model on 200 synthetic noisy patches; the whole
module is CPU-only and finishes in a few minutes.
"""

import time

import numpy as np
import pytest

from freqmoe.autodiff import Tensor
from freqmoe.backbone import build, toy_config
from freqmoe.blocks import GdfnBlock, MdtaBlock, MgfbBlock, MofeModule
from freqmoe.degrade import (DatasetManifest, build_dataset,
                             generate_clean_images, load_image)
from freqmoe.freq import dft2, dwt_haar, idwt_haar
from freqmoe.gradcheck import TOLERANCE, run_suite
from freqmoe.guidance import MixtureVector, synth_embed, synth_store
from freqmoe.losses import LossConfig, mgl_loss, psnr, total_loss
from freqmoe.train import (Stage, StageSchedule, optimize_router_alignment,
                           restore_image, train)


def _report(name, ok, detail):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

def test_gradient_suite():
    start = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(err for _, err in results)
    failed = [name for name, err in results if err > TOLERANCE]
    _report("gradient-suite",
            not failed and elapsed < 60.0,
            f"{len(results)} blocks, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# DWT round-trip
# ---------------------------------------------------------------------------

def test_dwt_roundtrip():
    rng = np.random.default_rng(1)
    worst_rec = 0.0
    worst_energy = 0.0
    for _ in range(100):
        x = rng.random((3, 64, 64)).astype(np.float32)
        bands = dwt_haar(Tensor(x))
        rec = idwt_haar(bands).data
        worst_rec = max(worst_rec, float(np.max(np.abs(rec - x))))
        total = sum(float((b.data.astype(np.float64)**2).sum()) for b in bands.all())
        ref = float((x.astype(np.float64)**2).sum())
        worst_energy = max(worst_energy, abs(total - ref) / ref)
    _report("dwt-roundtrip",
            worst_rec <= 1e-5 and worst_energy <= 1e-4,
            f"max abs reconstruction {worst_rec:.2e}, energy rel err {worst_energy:.2e}")


# ---------------------------------------------------------------------------
# DFT oracle
# ---------------------------------------------------------------------------

def test_dft_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 8, 8))
    spec = dft2(Tensor(x))
    got = spec.real.data[0] + 1j * spec.imag.data[0]

    ref = np.zeros((8, 8), dtype=np.complex128)
    for u in range(8):
        for v in range(8):
            acc = 0.0j
            for h in range(8):
                for w in range(8):
                    acc += x[0, h, w] * np.exp(-2j * np.pi * (u * h / 8 + v * w / 8))
            ref[u, v] = acc
    rel = float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)))

    sym = 0.0
    for u in range(8):
        for v in range(8):
            mirror = np.conj(got[(8 - u) % 8, (8 - v) % 8])
            sym = max(sym, abs(got[u, v] - mirror) / max(1.0, abs(got[u, v])))
    _report("dft-oracle", rel <= 1e-4 and sym <= 1e-4,
            f"naive-oracle rel err {rel:.2e}, conjugate symmetry {sym:.2e}")


# ---------------------------------------------------------------------------
# residual identities
# ---------------------------------------------------------------------------

def _zero(*params):
    for p in params:
        p.data[...] = 0.0


def test_residual_identities():
    rng = np.random.default_rng(3)
    f64 = np.float64
    checks = []

    mdta = MdtaBlock(rng, "a", dim=8, heads=2, dtype=f64)
    _zero(mdta.w_proj, mdta.b_proj)
    x = Tensor(rng.standard_normal((8, 8, 8)))
    checks.append(np.array_equal(mdta.forward(x).data, x.data))

    gdfn = GdfnBlock(rng, "g", dim=8, gamma=2.66, dtype=f64)
    _zero(gdfn.w_out, gdfn.b_out)
    checks.append(np.array_equal(gdfn.forward(x).data, x.data))

    mgfb = MgfbBlock(rng, "m", dim=8, embed_dim=64, tokens=8, dtype=f64)
    _zero(mgfb.w_out)
    e = Tensor(rng.standard_normal(64))
    checks.append(np.array_equal(mgfb.forward(x, e).data, x.data))

    mofe = MofeModule(rng, "mo", dim=8, heads=2, num_experts=4, answer_dim=64, dtype=f64)
    _zero(mofe.fusion.w_proj, mofe.fusion.b_proj)
    img = Tensor(rng.random((3, 16, 16)))
    out, _ = mofe.forward(x, img, e)
    checks.append(np.array_equal(out.data, x.data))

    model = build(toy_config(), seed=4)
    for p in model.params():
        if (p.name.endswith(".proj.weight") or p.name.endswith(".proj.bias")
                or p.name.endswith(".w_out") or p.name in ("output.weight", "output.bias")):
            p.data[...] = 0.0
    img32 = rng.random((3, 32, 32)).astype(np.float32)
    gi = rng.standard_normal(64).astype(np.float32)
    from freqmoe.guidance import GuidanceTriplet
    full, _ = model.forward(img32, GuidanceTriplet(gi, gi, gi))
    checks.append(np.array_equal(full.data, img32))

    _report("residual-identities", all(checks),
            f"mdta/gdfn/mgfb/mofe/backbone passthrough = {checks}")


# ---------------------------------------------------------------------------
# router / loss algebra
# ---------------------------------------------------------------------------

def test_router_loss_algebra():
    rng = np.random.default_rng(5)
    mofe = MofeModule(rng, "r", dim=4, heads=2, num_experts=8, answer_dim=64,
                      dtype=np.float64)
    checks = []

    mofe.w_router.data[...] = 0.0
    s = mofe.route(Tensor(rng.standard_normal(64))).s.data
    checks.append(np.allclose(s, 0.5) and np.all((s > 0) & (s < 1)))

    mofe.w_router.data[...] = rng.standard_normal(mofe.w_router.shape)
    for _ in range(20):
        s = mofe.route(Tensor(10.0 * rng.standard_normal(64))).s.data
        checks.append(np.all((s > 0.0) & (s < 1.0)))

    single = mgl_loss(np.array([[1.0, 2.0]]), Tensor(np.array([[0.3, 0.8]]))).item()
    checks.append(single <= 1e-9)

    hand = mgl_loss(np.eye(2), Tensor(np.array([[0.4, 0.4], [0.9, 0.9]]))).item()
    checks.append(abs(hand - 0.5) <= 1e-7)

    rec = Tensor(np.array(1.25))
    mgl = Tensor(np.array(0.7))
    checks.append(total_loss(rec, mgl, LossConfig(lambda_mgl=0.0)) is rec)
    combo = total_loss(Tensor(np.array(1.0)), Tensor(np.array(0.5)),
                       LossConfig(lambda_mgl=0.1)).item()
    checks.append(abs(combo - 1.05) <= 1e-12)

    _report("router-loss-algebra", all(checks),
            f"gate-at-zero=0.5, open-interval, B=1 -> {single:.1e}, "
            f"hand 2x2 -> {hand:.3f}, lambda algebra ok")


# ---------------------------------------------------------------------------
# relational alignment (router-only optimization)
# ---------------------------------------------------------------------------

def test_relational_alignment():
    rows = []
    for axis in range(4):
        for k in range(50):
            mix = [0.0] * 5
            mix[axis] = 1.0
            rows.append(synth_embed(MixtureVector.from_values(mix), (64, 64, 64),
                                    seed=6, sample_id=f"{axis}/{k}").e_answer)
    start = time.perf_counter()
    losses = optimize_router_alignment(np.stack(rows), num_experts=8,
                                       steps=500, lr=1e-2, seed=0)
    elapsed = time.perf_counter() - start
    ratio = losses[-1] / losses[0]
    _report("relational-alignment",
            ratio <= 0.5 and elapsed < 120.0,
            f"L_MGL {losses[0]:.4f} -> {losses[-1]:.4f} "
            f"(x{ratio:.3f}) in 500 steps, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# end-to-end sanity (small denoising run)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def denoise_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    clean_dir = root / "clean"
    generate_clean_images(clean_dir, 40, 64, seed=11)
    manifest = build_dataset(str(clean_dir), str(root / "ds"), per_combo=220,
                             size=64, seed=12, combos=[("N25",)], include_noise=False)
    store = synth_store(manifest, (64, 64, 64), seed=13)
    return root, manifest, store


def test_end_to_end_sanity(denoise_data):
    root, manifest, store = denoise_data
    train_manifest = DatasetManifest(seed=manifest.seed, size=64,
                                     records=manifest.records[:200])
    train_manifest.root = manifest.root
    held = [(load_image(manifest.resolve(r.degraded_path)),
             load_image(manifest.resolve(r.clean_path)), r.id)
            for r in manifest.records[200:220]]
    baseline = float(np.mean([psnr(d, c) for d, c, _ in held]))

    model = build(toy_config(), seed=14)
    schedule = StageSchedule([Stage(0, 6, 32, 8), Stage(6, 8, 48, 4)]).validate()
    start = time.perf_counter()
    result = train(model, train_manifest, store, schedule, LossConfig(),
                   seed=15, out_dir=str(root / "run"), lr0=1e-3)
    restored = float(np.mean(
        [psnr(restore_image(model, d, store.get(i)), c) for d, c, i in held]))
    elapsed = time.perf_counter() - start

    steps = len(result.log_rows)
    gain = restored - baseline
    _report("end-to-end-sanity",
            steps <= 2000 and gain >= 2.0 and elapsed < 900.0,
            f"{steps} steps, held-out {baseline:.2f} -> {restored:.2f} dB "
            f"(gain {gain:+.2f}), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# ablation switch parity
# ---------------------------------------------------------------------------

def test_ablation_parity(tmp_path):
    clean_dir = tmp_path / "clean"
    generate_clean_images(clean_dir, 12, 48, seed=21)
    manifest = build_dataset(str(clean_dir), str(tmp_path / "ds"), per_combo=12,
                             size=48, seed=22,
                             combos=[("L",), ("H",), ("R",), ("S",)],
                             include_noise=False)
    store = synth_store(manifest, (64, 64, 64), seed=23)
    schedule = StageSchedule([Stage(0, 30, 32, 8)]).validate()

    finals = {}
    for lam in (0.1, 0.0):
        model = build(toy_config(), seed=24)
        result = train(model, manifest, store, schedule,
                       LossConfig(lambda_mgl=lam), seed=24,
                       out_dir=str(tmp_path / f"lam{lam}"), lr0=1e-3)
        last_epoch = [row[4] for row in result.log_rows[-6:]]
        finals[lam] = (result.log_rows[-1][4], float(np.mean(last_epoch)))

    ok = finals[0.1][0] < finals[0.0][0] and finals[0.1][1] < finals[0.0][1]
    _report("ablation-parity", ok,
            f"final L_MGL with loss on {finals[0.1][0]:.4f} (epoch mean "
            f"{finals[0.1][1]:.4f}) vs lambda=0 {finals[0.0][0]:.4f} "
            f"(epoch mean {finals[0.0][1]:.4f})")


# ---------------------------------------------------------------------------
# reproducibility
# ---------------------------------------------------------------------------

def test_reproducibility(tmp_path):
    clean_dir = tmp_path / "clean"
    generate_clean_images(clean_dir, 3, 32, seed=31)
    manifest = build_dataset(str(clean_dir), str(tmp_path / "ds"), per_combo=3,
                             size=32, seed=32, combos=[("N25",)], include_noise=False)
    store = synth_store(manifest, (64, 64, 64), seed=33)
    schedule = StageSchedule([Stage(0, 2, 16, 3)]).validate()

    artifacts = []
    for tag in ("one", "two"):
        model = build(toy_config(), seed=34)
        result = train(model, manifest, store, schedule, LossConfig(), seed=34,
                       out_dir=str(tmp_path / tag), lr0=1e-3)
        artifacts.append((open(result.log_path, "rb").read(),
                          open(result.final_checkpoint, "rb").read()))
    same_logs = artifacts[0][0] == artifacts[1][0]
    same_ckpt = artifacts[0][1] == artifacts[1][1]
    _report("reproducibility", same_logs and same_ckpt,
            f"loss logs identical={same_logs}, checkpoints identical={same_ckpt}")
