"""Synthetic equirectangular scenes with analytic depth.

A camera sits at the origin of an axis-aligned box room that contains a few
spheres and boxes. Every ray leaves through a room wall, so depth is always
defined and bounded by the room diagonal.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_text, read_pfm, read_ppm, write_pfm, write_ppm
from .geometry import AngularGrid, build_grid, sph_to_cart_array

AMBIENT = 0.1
MIN_CLEARANCE = 0.1
# fixed camera-to-floor and camera-to-ceiling distance; gives every scene a metric scale cue
ROOM_HALF_HEIGHT = 1.25


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: float


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    albedo: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    room: tuple[float, float, float]
    light: tuple[float, float, float]
    wall_albedo: float = 0.8
    spheres: tuple[Sphere, ...] = field(default_factory=tuple)
    boxes: tuple[Box, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        if min(self.room) <= MIN_CLEARANCE:
            raise ValueError(f"room half extents must exceed {MIN_CLEARANCE}, got {self.room}")
        for s in self.spheres:
            if np.linalg.norm(s.center) - s.radius < MIN_CLEARANCE:
                raise ValueError(f"sphere {s} comes closer than {MIN_CLEARANCE} to the camera")
        for b in self.boxes:
            gap = np.maximum(np.abs(b.center) - np.asarray(b.half), 0.0)
            if np.linalg.norm(gap) < MIN_CLEARANCE:
                raise ValueError(f"box {b} comes closer than {MIN_CLEARANCE} to the camera")

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.room))


def random_scene(seed: int, min_objects: int = 1, max_objects: int = 4) -> SceneSpec:
    rng = np.random.default_rng(seed)
    room = (rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0), ROOM_HALF_HEIGHT)
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 0.5
    light /= np.linalg.norm(light)
    spheres, boxes = [], []
    for _ in range(int(rng.integers(min_objects, max_objects + 1))):
        albedo = float(rng.uniform(0.3, 1.0))
        if rng.random() < 0.5:
            while True:
                r = rng.uniform(0.2, 0.6)
                lim = np.asarray(room) - r
                c = rng.uniform(-lim, lim)
                if np.linalg.norm(c) - r >= MIN_CLEARANCE + 0.2:
                    break
            spheres.append(Sphere(tuple(float(v) for v in c), float(r), albedo))
        else:
            while True:
                half = rng.uniform(0.15, 0.5, size=3)
                lim = np.asarray(room) - half
                c = rng.uniform(-lim, lim)
                if np.linalg.norm(np.maximum(np.abs(c) - half, 0.0)) >= MIN_CLEARANCE + 0.2:
                    break
            boxes.append(Box(tuple(float(v) for v in c), tuple(float(v) for v in half), albedo))
    spec = SceneSpec(seed, tuple(float(v) for v in room), tuple(float(v) for v in light),
                     float(rng.uniform(0.6, 0.9)), tuple(spheres), tuple(boxes))
    spec.validate()
    return spec


def ray_for_pixel(grid: AngularGrid, u: int, v: int) -> np.ndarray:
    """Unit direction through the center of pixel column ``u``, row ``v``."""
    if not (0 <= u < grid.width and 0 <= v < grid.height):
        raise IndexError(f"pixel ({u}, {v}) outside {grid.width}x{grid.height} grid")
    return sph_to_cart_array(1.0, grid.theta[u], grid.phi[v])


def ray_directions(grid: AngularGrid) -> np.ndarray:
    th, ph = np.meshgrid(grid.theta, grid.phi)
    return sph_to_cart_array(1.0, th, ph)


def _room_hit(d: np.ndarray, room) -> tuple[np.ndarray, np.ndarray]:
    half = np.asarray(room)
    with np.errstate(divide="ignore"):
        t_axes = np.where(np.abs(d) > 0, half / np.abs(d), np.inf)
    axis = np.argmin(t_axes, axis=-1)
    t = np.take_along_axis(t_axes, axis[..., None], axis=-1)[..., 0]
    normal = np.zeros_like(d)
    np.put_along_axis(normal, axis[..., None], -np.sign(np.take_along_axis(d, axis[..., None], -1)), -1)
    return t, normal


def _sphere_hit(d: np.ndarray, s: Sphere) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(s.center)
    b = d @ c
    disc = b * b - (c @ c - s.radius**2)
    root = np.sqrt(np.maximum(disc, 0.0))
    t = b - root
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    normal = (d * np.where(np.isfinite(t), t, 0.0)[..., None] - c) / s.radius
    return t, normal


def _box_hit(d: np.ndarray, bx: Box) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(bx.center) - np.asarray(bx.half)
    hi = np.asarray(bx.center) + np.asarray(bx.half)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / d
        t2 = hi / d
    tmin = np.where(d == 0, np.where((lo <= 0) & (hi >= 0), -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where((lo <= 0) & (hi >= 0), np.inf, -np.inf), np.maximum(t1, t2))
    axis = np.argmax(tmin, axis=-1)
    near = np.take_along_axis(tmin, axis[..., None], -1)[..., 0]
    far = tmax.min(axis=-1)
    t = np.where((near <= far) & (near > 0), near, np.inf)
    normal = np.zeros_like(d)
    np.put_along_axis(normal, axis[..., None], -np.sign(np.take_along_axis(d, axis[..., None], -1)), -1)
    return t, normal


def render(spec: SceneSpec, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (image [H, W, 3] in [0, 1], depth [H, W, 1])."""
    d = ray_directions(build_grid(height, width))
    depth, normal = _room_hit(d, spec.room)
    albedo = np.full(depth.shape, spec.wall_albedo)
    hits = [(_sphere_hit(d, s), s.albedo) for s in spec.spheres]
    hits += [(_box_hit(d, b), b.albedo) for b in spec.boxes]
    for (t, n), a in hits:
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal = np.where(closer[..., None], n, normal)
        albedo = np.where(closer, a, albedo)
    shade = albedo * np.maximum(0.0, normal @ np.asarray(spec.light)) + AMBIENT
    image = np.repeat(np.clip(shade, 0.0, 1.0)[..., None], 3, axis=-1)
    return image, depth[..., None]


# --------------------------------------------------------------------------
# dataset directory


@dataclass
class Sample:
    id: str
    image: np.ndarray
    depth: np.ndarray
    split: str


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


def generate_dataset(out, n_scenes: int, height: int, width: int, seed: int,
                     n_test: int | None = None, threads: int | None = None) -> Path:
    """Render ``n_scenes`` scenes into ``out``/scenes plus a manifest.

    The last ``n_test`` scenes (default one fifth) form the test split.
    """
    out = Path(out)
    if n_test is None:
        n_test = n_scenes // 5
    if threads is None:
        threads = int(os.environ.get("EGF_THREADS", "1") or 1)
    seeds = scene_seeds(seed, n_scenes)
    (out / "scenes").mkdir(parents=True, exist_ok=True)

    def one(i):
        image, depth = render(random_scene(seeds[i]), height, width)
        write_ppm(out / "scenes" / f"{i:04d}.ppm", image)
        write_pfm(out / "scenes" / f"{i:04d}.pfm", depth[..., 0])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(one, range(n_scenes)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "seed", "split"])
    for i, s in enumerate(seeds):
        writer.writerow([f"{i:04d}", s, "test" if i >= n_scenes - n_test else "train"])
    atomic_write_text(out / "manifest.csv", buf.getvalue())
    return out


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    samples = []
    with open(root / "manifest.csv", newline="") as f:
        for row in csv.DictReader(f):
            sid = row["id"]
            image = read_ppm(root / "scenes" / f"{sid}.ppm")
            depth = read_pfm(root / "scenes" / f"{sid}.pfm")
            samples.append(Sample(sid, image, depth, row["split"]))
    return samples
