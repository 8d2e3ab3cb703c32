import numpy as np

from vacode.imgaug import ImageBuffer


def random_image(seed: int, h: int = 24, w: int = 32) -> ImageBuffer:
    r = np.random.default_rng(seed)
    return ImageBuffer.from_array(r.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
