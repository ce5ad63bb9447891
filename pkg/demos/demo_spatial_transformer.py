"""Affine grids, bilinear sampling and the transform chain behind a grasp.

Renders a synthetic scene, then walks the same three transforms the
detector composes: a translation to a candidate centre, a rotation, and a
scale that sizes the rectangle.  Each intermediate patch is written as a
PNG, and the chain is decoded into a grasp rectangle in pixels.

    python demos/demo_spatial_transformer.py --out /tmp/stn_demo
"""

import argparse
import math
from pathlib import Path

import numpy as np
from PIL import Image

from stngrasp.fixtures import make_sample
from stngrasp.render import render_overlay, to_rgb8
from stngrasp.stn import AffineTransform2D as A
from stngrasp.stn import affine_grid, bilinear_sample, compose_chain, transform_to_grasp
from stngrasp.tensor import Tensor


def sample(image, transform, size):
    return bilinear_sample(Tensor(image[None]), affine_grid(transform, size, size)).data[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="stn_demo")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    s = make_sample(args.seed, angle_deg=35, n_positive=1)
    img = s.image.channels
    gt = s.positives[0]
    print(f"ground truth: {gt}")

    # normalized coordinates: -1 and +1 are the outer pixel centres
    tx, ty = 2 * gt.x / 400 - 1, 2 * gt.y / 400 - 1
    chain = [A.translation(tx, ty), A.rotation(math.radians(gt.theta)),
             A.scale_translation(gt.h / 400, gt.w / 400)]

    identity = sample(img, A.identity(), 400)
    print(f"identity resample max error: {np.abs(identity - img).max():.1e}")

    steps = [("crop", compose_chain([chain[0], A.scale_translation(0.5, 0.5)])),
             ("rotate", compose_chain(chain[:2] + [A.scale_translation(0.5, 0.5)])),
             ("scale", compose_chain(chain))]
    for name, t in steps:
        patch = sample(img, t, 96)
        Image.fromarray(to_rgb8(patch)).resize((192, 192), Image.NEAREST).save(out / f"patch_{name}.png")
        print(f"{name:7s} transform {np.array2string(t.matrix(), precision=3, suppress_small=True)}".replace("\n", ""))

    decoded = transform_to_grasp(chain, 400, 400, canonical_w=400, canonical_h=400)
    print(f"decoded grasp: {decoded}")
    render_overlay(img, [decoded], out / "decoded.png", labels=["decoded"])
    print(f"patches and overlay written to {out}/")


if __name__ == "__main__":
    main()
