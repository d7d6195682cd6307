"""
Two augmented views per image and the NT-Xent loss on them.

Writes nothing; prints the sampled augmentation parameters and shows how
the loss reacts when the embeddings of paired views line up.
"""
import json

import numpy as np

from hyqal.data import SyntheticConfig, generate_synthetic
from hyqal.ssl import AugmentationConfig, make_views, ntxent_loss


def main():
    ds = generate_synthetic(SyntheticConfig(count=8, height=64, width=64, patients=4))
    rng = np.random.default_rng(1)
    img = ds.samples[0].image
    v1, v2, xi1, xi2 = make_views(img, AugmentationConfig(), rng)
    print("view 1 params:", json.dumps(xi1))
    print("view 2 params:", json.dumps(xi2))
    print("pixel range  :", float(v1.min()), float(v1.max()))

    # paired rows (2k, 2k+1) are positives, everything else is a negative
    z = rng.normal(size=(8, 16))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    for tau in (1.0, 0.5, 0.1):
        print(f"random embeddings, tau={tau}: loss {ntxent_loss(z, tau)[0]:.4f}")

    aligned = np.repeat(np.eye(16)[:4], 2, axis=0)
    for tau in (1.0, 0.5, 0.1):
        print(f"aligned pairs,     tau={tau}: loss {ntxent_loss(aligned, tau)[0]:.4f}")


if __name__ == "__main__":
    main()
