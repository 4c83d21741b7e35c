import numpy as np
import pytest
from PIL import Image


def paint_scene(rng, size=(192, 160)):
    """One synthetic photo: a warm textured object on a cool textured
    background, plus its exact binary mask (at native resolution)."""
    w, h = size
    yy, xx = np.mgrid[0:h, 0:w]
    # background: cool blue-green gradient with noise
    img = np.zeros((h, w, 3), dtype=np.float32)
    img[..., 0] = 0.10 + 0.05 * rng.random((h, w))
    img[..., 1] = 0.35 + 0.10 * np.sin(xx / 17.0) + 0.05 * rng.random((h, w))
    img[..., 2] = 0.55 + 0.10 * np.cos(yy / 13.0) + 0.05 * rng.random((h, w))
    # object: warm ellipse, random pose and size
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    ry = rng.uniform(0.15, 0.3) * h
    rx = rng.uniform(0.15, 0.3) * w
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0)
    tex = 0.12 * np.sin(xx / 3.5) * np.cos(yy / 4.5)
    img[mask, 0] = 0.85 + tex[mask]
    img[mask, 1] = 0.45 + 0.08 * rng.random(mask.sum())
    img[mask, 2] = 0.10 + 0.05 * rng.random(mask.sum())
    img = np.clip(img, 0.0, 1.0)
    return (img * 255).astype(np.uint8), mask.astype(np.uint8)


@pytest.fixture(scope="session")
def image_corpus(tmp_path_factory):
    """24 images of one held-out class, with masks, on disk as PNGs."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(17)
    items = []
    for i in range(24):
        img, mask = paint_scene(rng)
        image_path = root / f"img_{i:02d}.png"
        mask_path = root / f"mask_{i:02d}.png"
        Image.fromarray(img).save(image_path)
        Image.fromarray(mask * 255).save(mask_path)
        items.append((7, f"img{i:02d}", str(image_path), str(mask_path)))
    return items
