"""Regenerate the synthetic PPM fixtures in this directory.

    python tests/fixtures/make_fixtures.py

Cats are warm-toned, dogs cool-toned; indoor scenes are dim, outdoor scenes
have a bright sky band over green ground. Images are 32x32.
"""
from pathlib import Path

import numpy as np

from sightline.data import write_ppm

HERE = Path(__file__).parent
SIZE = 32


def _noise(rng, lo, hi):
    return rng.integers(lo, hi, size=(SIZE, SIZE), endpoint=True)


def pet(rng, kind):
    warm, cool = _noise(rng, 150, 230), _noise(rng, 20, 90)
    mid = _noise(rng, 60, 140)
    r, b = (warm, cool) if kind == "cat" else (cool, warm)
    img = np.stack([r, mid, b], axis=-1)
    # a blob so the images are not pure texture
    cy, cx = rng.integers(8, 24, size=2)
    yy, xx = np.mgrid[:SIZE, :SIZE]
    blob = (yy - cy) ** 2 + (xx - cx) ** 2 < rng.integers(16, 50)
    img[blob] = img[blob] // 2 + 60
    return img.astype(np.uint8)


def scene(rng, kind):
    if kind == "indoor":
        base = np.stack([_noise(rng, 50, 110), _noise(rng, 35, 85), _noise(rng, 20, 60)], -1)
        return base.astype(np.uint8)
    horizon = rng.integers(12, 20)
    sky = np.stack([_noise(rng, 120, 170), _noise(rng, 170, 215), _noise(rng, 215, 255)], -1)
    ground = np.stack([_noise(rng, 30, 80), _noise(rng, 120, 190), _noise(rng, 30, 70)], -1)
    img = np.where((np.arange(SIZE) < horizon)[:, None, None], sky, ground)
    return img.astype(np.uint8)


def profile(rng, kind):
    where, animal = kind.split("-")[1], kind.split("-")[0]
    img = scene(rng, where).astype(np.int64)
    p = pet(rng, animal).astype(np.int64)
    img[8:24, 8:24] = p[8:24, 8:24]
    return img.astype(np.uint8)


def main():
    rng = np.random.default_rng(20230501)
    layout = {
        "pets": (pet, ["cat", "dog"], 8),
        "pets_test": (pet, ["cat", "dog"], 4),
        "scenes": (scene, ["indoor", "outdoor"], 8),
        "scenes_test": (scene, ["indoor", "outdoor"], 4),
        "profiles": (profile, ["cat-indoor", "dog-indoor", "cat-outdoor", "dog-outdoor"], 2),
    }
    for folder, (make, classes, n) in layout.items():
        for c in classes:
            d = HERE / folder / c
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_ppm(d / f"{c}_{i:02d}.ppm", make(rng, c))


if __name__ == "__main__":
    main()
