import os

import numpy as np
import pytest

from freqmoe.degrade import (STANDARD_COMBOS, DatasetManifest, DegradationOp,
                             DegradationRecipe, apply_recipe, build_dataset,
                             generate_clean_images, load_image, make_clean_image,
                             sample_recipe, save_image)
from freqmoe.errors import ConfigError, ContractError, DataError
from freqmoe.losses import psnr, PSNR_CAP_DB
from freqmoe.util import rng_for


def recipe_of(*ops, seed=1):
    return DegradationRecipe(ops=list(ops), seed=seed)


def gray(v=0.5, size=64):
    return np.full((3, size, size), v, dtype=np.float64)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def test_haze_beta_zero_is_identity():
    img = make_clean_image(32, rng_for(0, "img"))
    out = apply_recipe(img, recipe_of(
        DegradationOp("haze", {"strength": 0.0, "beta": 0.0, "airlight": 0.9})))
    assert np.allclose(out, img, atol=1e-6)


def test_low_light_gamma_one_is_identity():
    img = make_clean_image(32, rng_for(1, "img"))
    out = apply_recipe(img, recipe_of(
        DegradationOp("low_light", {"strength": 0.0, "gamma": 1.0})))
    assert np.allclose(out, img, atol=1e-6)


def test_gauss_noise_empirical_sigma():
    img = gray(0.5, 256)
    out = apply_recipe(img, recipe_of(
        DegradationOp("gauss_noise", {"strength": 0.5, "sigma": 25})))
    measured = float((out - img).std())
    assert abs(measured - 25 / 255) / (25 / 255) <= 0.05


def test_low_light_darkens_and_haze_brightens_gray():
    img = gray(0.5)
    dark = apply_recipe(img, recipe_of(
        DegradationOp("low_light", {"strength": 1.0, "gamma": 3.0})))
    assert dark.mean() < img.mean()
    hazed = apply_recipe(img, recipe_of(
        DegradationOp("haze", {"strength": 1.0, "beta": 1.5, "airlight": 1.0})))
    assert hazed.mean() > img.mean()


def test_rain_snow_add_particles():
    img = gray(0.3)
    for kind, params in (
        ("rain", {"strength": 1.0, "density": 0.002, "length": 12.0,
                  "angle": 75.0, "opacity": 0.4}),
        ("snow", {"strength": 1.0, "density": 0.001, "radius_min": 1.0,
                  "radius_max": 2.5, "opacity": 0.5}),
    ):
        out = apply_recipe(img, recipe_of(DegradationOp(kind, params)))
        assert out.max() > img.max()
        assert (out != img).any()


def test_outputs_stay_in_unit_range():
    img = make_clean_image(48, rng_for(2, "img"))
    recipe = sample_recipe(("L", "H", "R"), seed=5)
    out = apply_recipe(img, recipe)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_apply_recipe_rejects_out_of_range_input():
    with pytest.raises(ContractError):
        apply_recipe(gray(1.5), sample_recipe(("L",), seed=0))


def test_apply_recipe_deterministic():
    img = make_clean_image(32, rng_for(3, "img"))
    recipe = sample_recipe(("R", "S"), seed=9)
    a = apply_recipe(img, recipe)
    b = apply_recipe(img, recipe)
    assert np.array_equal(a, b)


def test_recipe_labels_and_mixture():
    recipe = sample_recipe(("L", "H", "R"), seed=4)
    assert recipe.labels() == ["L", "H", "R"]
    mix = recipe.mixture().values()
    assert mix[0] > 0 and mix[1] > 0 and mix[2] > 0
    assert mix[3] == 0 and mix[4] == 0
    noise = sample_recipe(("N25",), seed=4)
    assert noise.labels() == ["N25"]
    assert noise.mixture().noise == 0.5


def test_recipe_roundtrip_dict():
    recipe = sample_recipe(("L", "S"), seed=11)
    again = DegradationRecipe.from_dict(recipe.to_dict())
    img = make_clean_image(32, rng_for(5, "img"))
    assert np.array_equal(apply_recipe(img, recipe), apply_recipe(img, again))


def test_unknown_noise_sigma_rejected():
    with pytest.raises(ConfigError):
        sample_recipe(("N30",), seed=0)


# ---------------------------------------------------------------------------
# dataset builder
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def built_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    clean_dir = root / "clean"
    generate_clean_images(clean_dir, 3, 64, seed=7)
    manifest = build_dataset(str(clean_dir), str(root / "out"), per_combo=1,
                             size=64, seed=7)
    return root, manifest


def test_build_dataset_counts(built_dataset):
    _, manifest = built_dataset
    assert len(manifest.records) == len(STANDARD_COMBOS) + 3  # + three noise profiles
    combo_codes = {r.id.rsplit("_", 1)[0] for r in manifest.records}
    assert "L+H+S" in combo_codes and "N50" in combo_codes


def test_build_dataset_eleven_combos_times_two(tmp_path):
    clean_dir = tmp_path / "clean"
    generate_clean_images(clean_dir, 1, 32, seed=9)
    manifest = build_dataset(str(clean_dir), str(tmp_path / "out"), per_combo=2,
                             size=32, seed=9, include_noise=False)
    assert len(manifest.records) == 22


def test_build_dataset_labels_match_recipes(built_dataset):
    _, manifest = built_dataset
    for rec in manifest.records:
        assert rec.labels == DegradationRecipe.from_dict(rec.recipe).labels()


def test_build_dataset_degradations_reduce_fidelity(built_dataset):
    _, manifest = built_dataset
    for rec in manifest.records:
        clean = load_image(manifest.resolve(rec.clean_path))
        degraded = load_image(manifest.resolve(rec.degraded_path))
        assert psnr(degraded, clean) < PSNR_CAP_DB, rec.id


def test_build_dataset_reproducible(tmp_path):
    clean_dir = tmp_path / "clean"
    generate_clean_images(clean_dir, 2, 32, seed=3)
    m1 = build_dataset(str(clean_dir), str(tmp_path / "a"), per_combo=1, size=32, seed=5)
    m2 = build_dataset(str(clean_dir), str(tmp_path / "b"), per_combo=1, size=32, seed=5)
    for r1, r2 in zip(m1.records, m2.records):
        b1 = open(m1.resolve(r1.degraded_path), "rb").read()
        b2 = open(m2.resolve(r2.degraded_path), "rb").read()
        assert b1 == b2, r1.id


def test_manifest_roundtrip_and_missing_file(built_dataset):
    root, manifest = built_dataset
    path = os.path.join(manifest.root, "manifest.json")
    loaded = DatasetManifest.load(path)
    assert [r.id for r in loaded.records] == [r.id for r in manifest.records]
    victim = loaded.records[0]
    os.rename(loaded.resolve(victim.degraded_path),
              loaded.resolve(victim.degraded_path) + ".bak")
    try:
        with pytest.raises(DataError, match="missing"):
            DatasetManifest.load(path)
    finally:
        os.rename(loaded.resolve(victim.degraded_path) + ".bak",
                  loaded.resolve(victim.degraded_path))


def test_build_dataset_empty_dir_rejected(tmp_path):
    os.makedirs(tmp_path / "empty", exist_ok=True)
    with pytest.raises(ConfigError, match="no images"):
        build_dataset(str(tmp_path / "empty"), str(tmp_path / "out"),
                      per_combo=1, size=32, seed=0)


def test_image_io_roundtrip(tmp_path):
    img = make_clean_image(32, rng_for(8, "img"))
    path = tmp_path / "x.png"
    save_image(img, path)
    back = load_image(path)
    assert np.max(np.abs(back - img)) <= 1.0 / 255.0 + 1e-6
