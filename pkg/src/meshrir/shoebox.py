"""Shoebox rooms: scene meshes and image-source ground-truth IRs.

Furniture boxes are part of the scene mesh (so the encoder sees them) but
the image-source IR only models the six walls.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .mesh import TriangleMesh, box_mesh, merge_meshes, save_mesh

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81
SIM_RATE = 48000
# dataset IRs are stored relative to the free-field level at 10 m, which puts
# the STD tag near 0.1, the same scale as the normalised body, instead of 1e-3
REFERENCE_GAIN = 40.0 * math.pi


class SceneError(ValueError):
    pass


@dataclass
class BoxScene:
    dimensions: tuple  # (Lx, Ly, Lz) metres
    # (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz); a scalar applies to every wall
    absorption: object = 0.3
    furniture: list = field(default_factory=list)  # [(lo xyz, hi xyz), ...]

    def __post_init__(self):
        self.dimensions = tuple(float(d) for d in self.dimensions)
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise SceneError(f"room dimensions must be 3 positive lengths, got {self.dimensions}")
        alpha = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise SceneError("absorption coefficients must lie in [0, 1]")
        self.absorption = tuple(float(a) for a in alpha)
        dims = np.array(self.dimensions)
        boxes = []
        for lo, hi in self.furniture:
            lo, hi = np.asarray(lo, float), np.asarray(hi, float)
            if np.any(hi <= lo) or np.any(lo < 0) or np.any(hi > dims):
                raise SceneError(f"furniture box {lo.tolist()}..{hi.tolist()} is not inside the room")
            boxes.append((tuple(lo), tuple(hi)))
        self.furniture = boxes


def make_box_scene(scene: BoxScene) -> TriangleMesh:
    """Inward-facing room shell plus one outward box per furniture item."""
    parts = [box_mesh((0, 0, 0), scene.dimensions, inward=True)]
    parts += [box_mesh(lo, hi) for lo, hi in scene.furniture]
    return merge_meshes(parts)


def _axis_images(src: float, length: float, max_order: int, beta_lo: float, beta_hi: float):
    """Image coordinates along one axis with their reflection counts and gains.

    Image (q, n) sits at (1 - 2q) * src + 2 n L and has bounced |n - q| times
    off the wall at 0 and |n| times off the wall at L.
    """
    n = np.arange(-max_order, max_order + 1)
    pos, order, gain = [], [], []
    for q in (0, 1):
        lo_hits = np.abs(n - q)
        hi_hits = np.abs(n)
        pos.append((1 - 2 * q) * src + 2 * n * length)
        order.append(lo_hits + hi_hits)
        with np.errstate(divide="ignore"):
            gain.append(np.power(beta_lo, lo_hits) * np.power(beta_hi, hi_hits))
    pos, order, gain = map(np.concatenate, (pos, order, gain))
    keep = order <= max_order
    return pos[keep], order[keep], gain[keep]


def image_method_ir(scene: BoxScene, source, listener, max_order: int = 30,
                    rate: int = SIM_RATE, duration: float | None = None) -> codec.ImpulseResponse:
    """Allen-Berkley image-source IR of the empty shoebox.

    Each image contributes prod(sqrt(1 - alpha)) / (4 pi d) at delay d / c,
    placed with an 81-tap Hann-windowed sinc fractional delay.
    """
    src = np.asarray(source, dtype=float)
    lis = np.asarray(listener, dtype=float)
    dims = np.array(scene.dimensions)
    for name, p in (("source", src), ("listener", lis)):
        if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
            raise SceneError(f"{name} {p.tolist()} is not strictly inside the room")
    if np.allclose(src, lis):
        raise SceneError("source and listener coincide")
    if max_order < 0:
        raise SceneError("max_order must be >= 0")

    beta = np.sqrt(1.0 - np.array(scene.absorption))
    axes = [_axis_images(src[i], dims[i], max_order, beta[2 * i], beta[2 * i + 1]) for i in range(3)]
    (px, ox, gx), (py, oy, gy), (pz, oz, gz) = axes
    total = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    ix, iy, iz = np.nonzero(total <= max_order)
    gain = gx[ix] * gy[iy] * gz[iz]
    live = gain > 0
    ix, iy, iz, gain = ix[live], iy[live], iz[live], gain[live]
    dist = np.sqrt((px[ix] - lis[0]) ** 2 + (py[iy] - lis[1]) ** 2 + (pz[iz] - lis[2]) ** 2)
    delay = dist / SPEED_OF_SOUND * rate
    amp = gain / (4.0 * math.pi * dist)

    half = SINC_TAPS // 2
    if duration is None:
        length = int(math.ceil(delay.max())) + half + 1
    else:
        length = int(round(duration * rate))
        keep = delay < length + half
        delay, amp = delay[keep], amp[keep]

    out = np.zeros(length + 3 * half + 2)
    base = np.floor(delay).astype(np.int64)
    frac = delay - base
    taps = np.arange(-half, half + 1)
    chunk = 20000
    for s in range(0, len(delay), chunk):
        x = taps[None, :] - frac[s:s + chunk, None]
        window = 0.5 * (1.0 + np.cos(np.pi * x / (half + 1)))
        h = amp[s:s + chunk, None] * np.sinc(x) * window
        np.add.at(out, (base[s:s + chunk, None] + taps[None, :] + half), h)
    return codec.ImpulseResponse(out[half:half + length], rate, "raw")


# ---------------------------------------------------------------------------
# dataset


ABSORPTION_RANGE = (0.1, 0.9)
# more reflective walls (T60 about 0.3-0.6 s): the direct path then carries
# less of the energy, so packed bodies stay mostly inside the generator's
# tanh range; used by the overfit check
REVERBERANT_ABSORPTION_RANGE = (0.02, 0.3)


def _random_scene(rng: np.random.Generator, absorption_range=ABSORPTION_RANGE) -> BoxScene:
    dims = np.array([rng.uniform(3, 10), rng.uniform(3, 8), rng.uniform(2.4, 3.5)])
    alpha = rng.uniform(*absorption_range, size=6)
    furniture = []
    for _ in range(int(rng.integers(0, 6))):
        size = np.array([rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0.4, 2.0)])
        size = np.minimum(size, dims * np.array([0.4, 0.4, 0.8]))
        lo = np.array([rng.uniform(0, dims[0] - size[0]), rng.uniform(0, dims[1] - size[1]), 0.0])
        furniture.append((tuple(np.round(lo, 4)), tuple(np.round(lo + size, 4))))
    return BoxScene(tuple(np.round(dims, 4)), tuple(np.round(alpha, 4)), furniture)


def _random_pair(rng: np.random.Generator, dims, margin=0.3, min_separation=0.5):
    dims = np.asarray(dims)
    while True:
        s = rng.uniform(margin, dims - margin)
        r = rng.uniform(margin, dims - margin)
        if np.linalg.norm(s - r) >= min_separation:
            return np.round(s, 4), np.round(r, 4)


def simulate_packed_ir(scene: BoxScene, source, listener, max_order: int = 30) -> codec.ImpulseResponse:
    """Oracle IR in packed 4096 form: simulate at 48 kHz, resample, crop, pack."""
    duration = codec.CROP_LENGTH / codec.RATE + 0.01
    raw = image_method_ir(scene, source, listener, max_order, SIM_RATE, duration)
    raw = codec.ImpulseResponse(raw.samples * REFERENCE_GAIN, raw.rate, raw.form)
    ir16 = codec.resample(raw, codec.RATE)
    return codec.pack(codec.crop_or_pad(ir16))


def build_dataset(scenes: int, irs_per_scene: int, seed: int, out_dir,
                  max_order: int = 30, val_fraction: float = 0.2, workers: int = 1,
                  absorption_range=ABSORPTION_RANGE) -> Path:
    """Write meshes, packed IR WAVs and JSON-Lines manifests; return manifest path.

    ``manifest.jsonl`` lists every row; ``train.jsonl`` / ``val.jsonl`` split
    by scene so no scene appears in both. Paths are relative to ``out_dir``.
    """
    if scenes < 1 or irs_per_scene < 1:
        raise SceneError("scenes and irs_per_scene must be >= 1")
    lo, hi = absorption_range
    if not 0 <= lo <= hi <= 1:
        raise SceneError(f"absorption_range must satisfy 0 <= lo <= hi <= 1, got {absorption_range}")
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "irs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    jobs, rows, scene_meta = [], [], []
    for si in range(scenes):
        scene = _random_scene(rng, absorption_range)
        scene_id = f"scene_{si:04d}"
        mesh_rel = f"meshes/{scene_id}.obj"
        save_mesh(make_box_scene(scene), out / mesh_rel)
        scene_meta.append({"scene_id": scene_id, "dimensions": list(scene.dimensions),
                           "absorption": list(scene.absorption),
                           "furniture": [[list(lo), list(hi)] for lo, hi in scene.furniture]})
        for k in range(irs_per_scene):
            src, lis = _random_pair(rng, scene.dimensions)
            ir_rel = f"irs/{scene_id}_ir_{k:03d}.wav"
            jobs.append((scene, src, lis, out / ir_rel))
            rows.append({"mesh": mesh_rel, "source": src.tolist(), "listener": lis.tolist(),
                         "ir": ir_rel, "scene_id": scene_id})

    def run(job):
        scene, src, lis, path = job
        codec.write_wav(simulate_packed_ir(scene, src, lis, max_order), path)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(run, jobs))
    log.info("simulated %d IRs over %d scenes", len(jobs), scenes)

    n_val = 0 if scenes < 2 else max(1, int(round(val_fraction * scenes)))
    val_ids = {m["scene_id"] for m in scene_meta[scenes - n_val:]}
    write_manifest(out / "manifest.jsonl", rows)
    write_manifest(out / "train.jsonl", [r for r in rows if r["scene_id"] not in val_ids])
    write_manifest(out / "val.jsonl", [r for r in rows if r["scene_id"] in val_ids])
    (out / "scenes.json").write_text(json.dumps(scene_meta, indent=1) + "\n")
    return out / "manifest.jsonl"


def write_manifest(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    """Rows with ``mesh`` / ``ir`` resolved against the manifest's directory."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            r = json.loads(line)
            missing = {"mesh", "source", "listener", "ir", "scene_id"} - set(r)
            if missing:
                raise SceneError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            r["mesh"] = str((path.parent / r["mesh"]).resolve())
            r["ir"] = str((path.parent / r["ir"]).resolve())
            rows.append(r)
    return rows
