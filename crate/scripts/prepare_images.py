"""Builds the bundled PGM corpus under data/images from sample images that
ship with scikit-image and matplotlib (all public domain or CC0)."""

import argparse
import os

import numpy as np
from PIL import Image
from skimage import io
import skimage.data
import matplotlib

SKIMAGE_DIR = os.path.dirname(skimage.data.__file__)
MPL_DIR = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "sample_data")

HELDOUT = {
    "camera": os.path.join(SKIMAGE_DIR, "camera.png"),
    "coffee": os.path.join(SKIMAGE_DIR, "coffee.png"),
    "chelsea": os.path.join(SKIMAGE_DIR, "chelsea.png"),
    "rocket": os.path.join(SKIMAGE_DIR, "rocket.jpg"),
    "grace_hopper": os.path.join(MPL_DIR, "grace_hopper.jpg"),
}

TRAIN = {
    "astronaut": "astronaut.png",
    "brick": "brick.png",
    "cell": "cell.png",
    "clock": "clock_motion.png",
    "coins": "coins.png",
    "grass": "grass.png",
    "gravel": "gravel.png",
    "hubble": "hubble_deep_field.jpg",
    "ihc": "ihc.png",
    "retina": "retina.jpg",
    "text": "text.png",
}

TILE = 256


def luma(path):
    img = io.imread(path).astype(np.float64)
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img


def resize_short_side(img, short):
    h, w = img.shape
    scale = short / min(h, w)
    if scale >= 1.0:
        return img
    size = (max(TILE, round(w * scale)), max(TILE, round(h * scale)))
    pil = Image.fromarray(img.astype(np.float32), mode="F").resize(size, Image.BOX)
    return np.asarray(pil, dtype=np.float64)


def center_crop(img, side):
    h, w = img.shape
    y, x = (h - side) // 2, (w - side) // 2
    return img[y:y + side, x:x + side]


def save(img, path):
    Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8), mode="L").save(path)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "images"))
    args = ap.parse_args()
    held = os.path.join(args.out, "heldout")
    train = os.path.join(args.out, "train")
    os.makedirs(held, exist_ok=True)
    os.makedirs(train, exist_ok=True)

    for name, path in HELDOUT.items():
        img = center_crop(resize_short_side(luma(path), TILE), TILE)
        save(img, os.path.join(held, f"{name}.pgm"))

    count = 0
    for name, file in TRAIN.items():
        img = luma(os.path.join(SKIMAGE_DIR, file))
        if min(img.shape) > 2 * TILE:
            img = resize_short_side(img, 2 * TILE)
        h, w = img.shape
        if min(h, w) < TILE:
            save(img, os.path.join(train, f"{name}.pgm"))
            count += 1
            continue
        k = 0
        for y in range(0, h - TILE + 1, TILE):
            for x in range(0, w - TILE + 1, TILE):
                tile = img[y:y + TILE, x:x + TILE]
                if tile.std() < 8.0:
                    continue
                save(tile, os.path.join(train, f"{name}_{k}.pgm"))
                k += 1
                count += 1
    print(f"{len(HELDOUT)} held-out images, {count} training images")


if __name__ == "__main__":
    main()
