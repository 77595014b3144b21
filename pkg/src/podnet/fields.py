"""Nodal field dumps: ``x,y,value`` CSV and 8-bit PGM previews."""

import csv

import numpy as np


def write_field_csv(path, mesh, u):
    """One ``x,y,value`` row per node in row-major node order."""
    u = np.asarray(u, float)
    if u.shape != (mesh.n_nodes,):
        raise ValueError(f"expected {mesh.n_nodes} nodal values, got shape {u.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(mesh.coords, u):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_field_csv(path):
    """Returns ``(coords, values)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2]


def to_gray(u):
    """Min-max scale to ``0..255``; a constant field maps to 0."""
    u = np.asarray(u, float)
    lo, hi = np.min(u), np.max(u)
    if not hi > lo:
        return np.zeros(u.shape, dtype=np.uint8)
    return np.round(255 * (u - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, mesh, u):
    """Binary P5 image, top row at ``y = 1``."""
    img = to_gray(u).reshape(mesh.ny + 1, mesh.nx + 1)[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mesh.nx + 1} {mesh.ny + 1}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    # header is exactly the four tokens written above; pixel bytes follow one newline
    head = raw.split(b"\n", 3)
    if head[0] != b"P5" or len(head) < 4:
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in head[1].split())
    if int(head[2]) != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(head[3], dtype=np.uint8, count=w * h).reshape(h, w)
