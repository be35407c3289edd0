"""Converts the public Pavia University and Indian Pines `.mat` files into the
ENVI layout the pipeline and the acceptance suite read:

    data/paviau/{cube,gt}.{hdr,raw}
    data/indian_pines/{cube,gt}.{hdr,raw}

Usage:

    python scripts/convert_datasets.py --src DIR [--dst data]

DIR must contain PaviaU.mat, PaviaU_gt.mat, Indian_pines_corrected.mat and
Indian_pines_gt.mat as distributed by the Grupo de Inteligencia Computacional
(UPV/EHU) hyperspectral scene collection. The CLI's `convert` subcommand does
the same for a single array.
"""

import argparse
from pathlib import Path

import numpy as np
import scipy.io

DATASETS = {
    "paviau": ("PaviaU.mat", "paviaU", "PaviaU_gt.mat", "paviaU_gt"),
    "indian_pines": (
        "Indian_pines_corrected.mat",
        "indian_pines_corrected",
        "Indian_pines_gt.mat",
        "indian_pines_gt",
    ),
}


def header(lines: int, samples: int, bands: int, data_type: int) -> str:
    return (
        "ENVI\n"
        f"samples = {samples}\n"
        f"lines = {lines}\n"
        f"bands = {bands}\n"
        "header offset = 0\n"
        "file type = ENVI Standard\n"
        f"data type = {data_type}\n"
        "interleave = bsq\n"
        "byte order = 0\n"
    )


def write_cube(path: Path, cube: np.ndarray) -> None:
    h, w, b = cube.shape
    path.with_suffix(".hdr").write_text(header(h, w, b, 4))
    bsq = np.ascontiguousarray(cube.transpose(2, 0, 1)).astype("<f4")
    path.with_suffix(".raw").write_bytes(bsq.tobytes())


def write_labels(path: Path, gt: np.ndarray) -> None:
    h, w = gt.shape
    path.with_suffix(".hdr").write_text(header(h, w, 1, 12))
    path.with_suffix(".raw").write_bytes(np.ascontiguousarray(gt).astype("<u2").tobytes())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--src", type=Path, required=True)
    ap.add_argument("--dst", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    args = ap.parse_args()
    for name, (cube_file, cube_key, gt_file, gt_key) in DATASETS.items():
        cube_path, gt_path = args.src / cube_file, args.src / gt_file
        if not cube_path.is_file() or not gt_path.is_file():
            print(f"skipping {name}: {cube_file} or {gt_file} not in {args.src}")
            continue
        cube = scipy.io.loadmat(cube_path)[cube_key]
        gt = scipy.io.loadmat(gt_path)[gt_key]
        if cube.shape[:2] != gt.shape:
            raise SystemExit(f"{name}: cube {cube.shape} and ground truth {gt.shape} disagree")
        out = args.dst / name
        out.mkdir(parents=True, exist_ok=True)
        write_cube(out / "cube", cube.astype(np.float64))
        write_labels(out / "gt", gt)
        classes = int(gt.max())
        print(f"{name}: {cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]}, {classes} classes -> {out}")


if __name__ == "__main__":
    main()
