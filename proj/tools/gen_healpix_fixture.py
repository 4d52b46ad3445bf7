#!/usr/bin/env python3
"""Writes NESTED pixel centres from healpy as an MSGT fixture.

Output tensor is [npix, 2] float64 holding (latitude, longitude) in radians,
longitude in [0, 2pi). Usage: gen_healpix_fixture.py NSIDE OUT.msgt
"""
import struct
import sys

import healpy as hp
import numpy as np


def write_msgt(path, array):
    array = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as f:
        f.write(b"MSGT")
        f.write(struct.pack("<II", 1, array.ndim))
        f.write(struct.pack("<%dQ" % array.ndim, *array.shape))
        f.write(struct.pack("<B", 1))
        f.write(array.tobytes())


def main():
    nside = int(sys.argv[1])
    out = sys.argv[2]
    theta, phi = hp.pix2ang(nside, np.arange(hp.nside2npix(nside)), nest=True)
    lat = np.pi / 2 - theta
    lon = np.mod(phi, 2 * np.pi)
    write_msgt(out, np.stack([lat, lon], axis=1))


if __name__ == "__main__":
    main()
