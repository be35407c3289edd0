"""Writes the small binary test fixtures with numpy/scipy.

    python scripts/make_fixtures.py

ENVI fixtures (crates/core/tests/fixtures): a 2x2x3 float32 cube whose value at
(row r, col c, band b) is 1 + 6r + 3c + b, stored BSQ and BIP.

MAT fixture (crates/cli/tests/fixtures/tiny.mat): `cube` of shape 3x4x2 with
value 100r + 10c + b (double) and `gt` of shape 3x4 with (4r + c) % 3 (uint8).
"""

from pathlib import Path

import numpy as np
import scipy.io

ROOT = Path(__file__).resolve().parent.parent


def envi_header(interleave: str) -> str:
    return (
        "ENVI\n"
        "samples = 2\n"
        "lines = 2\n"
        "bands = 3\n"
        "header offset = 0\n"
        "file type = ENVI Standard\n"
        "data type = 4\n"
        f"interleave = {interleave}\n"
        "byte order = 0\n"
        "wavelength = {400.0, 500.0, 600.0}\n"
    )


def write_envi() -> None:
    out = ROOT / "crates/core/tests/fixtures"
    out.mkdir(parents=True, exist_ok=True)
    r, c, b = np.meshgrid(np.arange(2), np.arange(2), np.arange(3), indexing="ij")
    cube = (1 + 6 * r + 3 * c + b).astype("<f4")  # (row, col, band)
    layouts = {
        "bsq": cube.transpose(2, 0, 1),
        "bip": cube,
    }
    for name, arr in layouts.items():
        (out / f"tiny_{name}.hdr").write_text(envi_header(name))
        (out / f"tiny_{name}.raw").write_bytes(np.ascontiguousarray(arr).tobytes())


def write_mat() -> None:
    out = ROOT / "crates/cli/tests/fixtures"
    out.mkdir(parents=True, exist_ok=True)
    r, c, b = np.meshgrid(np.arange(3), np.arange(4), np.arange(2), indexing="ij")
    cube = (100 * r + 10 * c + b).astype(np.float64)
    gt = ((4 * r[:, :, 0] + c[:, :, 0]) % 3).astype(np.uint8)
    scipy.io.savemat(out / "tiny.mat", {"cube": cube, "gt": gt}, format="5", do_compression=False)


if __name__ == "__main__":
    write_envi()
    write_mat()
