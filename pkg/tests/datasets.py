"""Synthetic on-disk datasets: PGM frames, crop sidecars and JSON-lines manifests."""

import json

import numpy as np

from tinytracker import modelio


def write_frames(directory, n, seed=0, size=(96, 128), sidecars=False):
    rng = np.random.default_rng(seed)
    h, w = size
    records = []
    for i in range(n):
        yy, xx = np.mgrid[0:h, 0:w]
        base = 128 + 80 * np.sin(xx / 11.0 + i) * np.cos(yy / 8.0)
        px = np.clip(base + rng.normal(0, 20, (h, w)), 0, 255).astype(np.uint8)
        path = directory / f"f{i:03d}.pgm"
        modelio.save_image(px, path)
        side = int(rng.integers(30, 60))
        crop = [int(rng.integers(0, w - side)), int(rng.integers(0, h - side)), side, side]
        if sidecars:
            (directory / f"f{i:03d}.txt").write_text(" ".join(map(str, crop + [w, h])) + "\n")
        gaze = [float(rng.normal(0, 4)), float(rng.normal(0, 4))]
        records.append({"image": path.name, "crop": crop, "frame": [w, h], "gaze_cm": gaze})
    return records


def write_manifest(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path
