"""Round-trip PSNR of panorama -> mesh -> panorama for smooth analytic fields.

    python3 scripts/resampling_psnr.py --height 128 --mr 5 --tr 0 1 2
"""

import argparse

import numpy as np

from spheredepth.mesh import icosphere, sample_pattern
from spheredepth.panorama import Panorama, image_to_mesh, mesh_to_image, pixel_center_directions

FIELDS = {
    "z": lambda d: d[..., 2],
    "z+xy/2": lambda d: d[..., 2] + 0.5 * d[..., 0] * d[..., 1],
    "cos3lon": lambda d: np.cos(3 * np.arctan2(d[..., 1], d[..., 0])) * np.hypot(d[..., 0], d[..., 1]),
}


def psnr(ref, test):
    mse = np.mean((ref - test) ** 2)
    return 10 * np.log10((ref.max() - ref.min()) ** 2 / mse)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--height", type=int, default=128)
    ap.add_argument("--mr", type=int, default=5)
    ap.add_argument("--tr", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    h, w = args.height, 2 * args.height
    dirs = pixel_center_directions(w, h)
    mesh = icosphere(args.mr)
    print(f"{h}x{w} <-> MR {args.mr}")
    for name, fn in FIELDS.items():
        img = Panorama(fn(dirs)[..., None])
        row = []
        for tr in args.tr:
            t = image_to_mesh(img, mesh, sample_pattern(mesh, tr))
            row.append(f"TR {tr}: {psnr(img.data, mesh_to_image(t, mesh, w, h).data):6.2f} dB")
        print(f"  {name:>8}  " + "  ".join(row))


if __name__ == "__main__":
    main()
