"""Procedural desk-scale datasets: ray-traced ground-truth views of textured
scenes, a camera ring, and an initializing point cloud. Fully deterministic
in the seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .renderer import read_ppm, write_ppm
from .scene import ViewContext

DATASET_KINDS = ("textured-spheres", "voxel-blocks")
BACKGROUND = np.zeros(3)


@dataclass
class SyntheticDataset:
    kind: str
    res: int
    seed: int
    train_images: list
    holdout_images: list
    train_views: list
    holdout_views: list
    point_cloud: np.ndarray
    background: np.ndarray = field(default_factory=lambda: BACKGROUND.copy())


def look_at_view(eye, target, res: int, fov_deg: float = 50.0) -> ViewContext:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0])
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ eye
    view = np.eye(4)
    view[:3, :3] = R
    view[:3, 3] = t
    f = 0.5 * res / np.tan(np.deg2rad(fov_deg) / 2.0)
    return ViewContext(view, fx=f, fy=f, cx=res / 2.0, cy=res / 2.0, width=res, height=res)


def _camera_ring(n: int, res: int, radius: float, height: float, phase: float = 0.0):
    views = []
    for i in range(n):
        a = 2 * np.pi * i / n + phase
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        views.append(look_at_view(eye, np.zeros(3), res))
    return views


# ---------------------------------------------------------------------------
# scene geometry


_LIGHT_DIR = np.array([0.45, 0.35, 0.82])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


def _sphere_params(rng):
    base_colors = np.array(
        [
            [0.92, 0.13, 0.10],
            [0.10, 0.85, 0.22],
            [0.16, 0.28, 0.95],
        ]
    )
    spheres = []
    for i in range(3):
        a = np.deg2rad(90.0 + 120.0 * i)
        center = np.array([0.46 * np.cos(a), 0.46 * np.sin(a), 0.12 * (i - 1)])
        radius = 0.42 - 0.04 * i
        freq = rng.uniform(42.0, 62.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi, size=2)
        spheres.append({"center": center, "radius": radius, "color": base_colors[i], "freq": freq, "phase": phase})
    return spheres


def _sphere_texture(points, sphere):
    local = points - sphere["center"]
    f1, f2 = sphere["freq"]
    p1, p2 = sphere["phase"]
    stripes = np.sin(f1 * local[:, 0] + p1) * np.sin(f2 * local[:, 1] + p2) + 0.4 * np.sign(np.sin(0.9 * f1 * local[:, 1] + p2))
    rings = np.sin(0.5 * (f1 + f2) * local[:, 2] + p1)
    t = 0.5 + 0.48 * stripes + 0.18 * rings
    return np.clip(sphere["color"][None, :] * (0.55 + 0.45 * t[:, None]), 0.0, 1.0)


def _trace_spheres(view: ViewContext, spheres) -> np.ndarray:
    H, W = view.height, view.width
    eye = view.camera_position
    cols, rows = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack(
        [(cols - view.cx) / view.fx, (rows - view.cy) / view.fy, np.ones_like(cols)], axis=-1
    ).reshape(-1, 3)
    d_world = d_cam @ view.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    best_t = np.full(d_world.shape[0], np.inf)
    image = np.zeros((d_world.shape[0], 3))
    for sphere in spheres:
        oc = eye - sphere["center"]
        b = d_world @ oc
        c = oc @ oc - sphere["radius"] ** 2
        disc = b * b - c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = -b - sq
        valid = hit & (t > 1e-6) & (t < best_t)
        if not valid.any():
            continue
        pts = eye + d_world[valid] * t[valid, None]
        normals = (pts - sphere["center"]) / sphere["radius"]
        shade = 0.45 + 0.55 * np.maximum(normals @ _LIGHT_DIR, 0.0)
        image[valid] = _sphere_texture(pts, sphere) * shade[:, None]
        best_t[valid] = t[valid]
    return np.clip(image.reshape(H, W, 3), 0.0, 1.0)


def _sample_spheres(rng, spheres, n_points: int) -> np.ndarray:
    areas = np.array([s["radius"] ** 2 for s in spheres])
    counts = np.maximum((n_points * areas / areas.sum()).astype(int), 8)
    pts = []
    for sphere, cnt in zip(spheres, counts):
        v = rng.normal(size=(cnt, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts.append(sphere["center"] + sphere["radius"] * v)
    return np.concatenate(pts, axis=0)


def _block_params(rng):
    blocks = []
    base_colors = np.array(
        [
            [0.95, 0.75, 0.10],
            [0.15, 0.75, 0.85],
            [0.85, 0.20, 0.80],
        ]
    )
    for i in range(3):
        a = np.deg2rad(30.0 + 120.0 * i)
        center = np.array([0.40 * np.cos(a), 0.40 * np.sin(a), 0.10 * (i - 1)])
        half = np.array([0.26, 0.22, 0.30 - 0.05 * i])
        freq = rng.uniform(42.0, 62.0, size=3)
        blocks.append({"center": center, "half": half, "color": base_colors[i], "freq": freq})
    return blocks


def _trace_blocks(view: ViewContext, blocks) -> np.ndarray:
    H, W = view.height, view.width
    eye = view.camera_position
    cols, rows = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack(
        [(cols - view.cx) / view.fx, (rows - view.cy) / view.fy, np.ones_like(cols)], axis=-1
    ).reshape(-1, 3)
    d_world = d_cam @ view.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    inv = np.where(np.abs(d_world) > 1e-12, 1.0 / d_world, 1e12)
    best_t = np.full(d_world.shape[0], np.inf)
    image = np.zeros((d_world.shape[0], 3))
    for block in blocks:
        lo = block["center"] - block["half"]
        hi = block["center"] + block["half"]
        t1 = (lo - eye) * inv
        t2 = (hi - eye) * inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        valid = (tmax > np.maximum(tmin, 1e-6)) & (tmin > 1e-6) & (tmin < best_t)
        if not valid.any():
            continue
        pts = eye + d_world[valid] * tmin[valid, None]
        rel = (pts - block["center"]) / block["half"]
        axis = np.argmax(np.abs(rel), axis=1)
        normals = np.zeros_like(rel)
        normals[np.arange(rel.shape[0]), axis] = np.sign(rel[np.arange(rel.shape[0]), axis])
        shade = 0.35 + 0.65 * np.maximum(normals @ _LIGHT_DIR, 0.0)
        f = block["freq"]
        checker = np.sin(f[0] * pts[:, 0]) * np.sin(f[1] * pts[:, 1]) + 0.5 * np.sin(f[2] * pts[:, 2])
        t = np.clip(0.5 + 0.4 * checker, 0.0, 1.0)
        image[valid] = np.clip(block["color"][None, :] * (0.45 + 0.55 * t[:, None]) * shade[:, None], 0, 1)
        best_t[valid] = tmin[valid]
    return np.clip(image.reshape(H, W, 3), 0.0, 1.0)


def _sample_blocks(rng, blocks, n_points: int) -> np.ndarray:
    pts = []
    per = n_points // len(blocks)
    for block in blocks:
        u = rng.uniform(-1.0, 1.0, size=(per, 3))
        axis = rng.integers(0, 3, size=per)
        sign = rng.choice([-1.0, 1.0], size=per)
        u[np.arange(per), axis] = sign
        pts.append(block["center"] + u * block["half"])
    return np.concatenate(pts, axis=0)


def make_synthetic_dataset(
    kind: str,
    views: int,
    res: int,
    seed: int,
    holdout_views: int = 3,
    n_points: int = 4000,
) -> SyntheticDataset:
    """Ray-trace ground truth on a camera ring; holdout cameras sit between
    training cameras (and slightly higher)."""
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if views < 2:
        raise ValueError("need at least 2 views")
    rng = np.random.default_rng(seed)
    if kind == "textured-spheres":
        shapes = _sphere_params(rng)
        trace = lambda v: _trace_spheres(v, shapes)
        cloud = _sample_spheres(rng, shapes, n_points)
    else:
        shapes = _block_params(rng)
        trace = lambda v: _trace_blocks(v, shapes)
        cloud = _sample_blocks(rng, shapes, n_points)
    train_views = _camera_ring(views, res, radius=1.7, height=0.6)
    hold_views = _camera_ring(holdout_views, res, radius=1.7, height=0.78, phase=np.pi / views)
    return SyntheticDataset(
        kind=kind,
        res=res,
        seed=seed,
        train_images=[trace(v) for v in train_views],
        holdout_images=[trace(v) for v in hold_views],
        train_views=train_views,
        holdout_views=hold_views,
        point_cloud=cloud,
    )


# ---------------------------------------------------------------------------
# on-disk layout: images/*.ppm, cameras.csv, points.csv, meta


def save_dataset(ds: SyntheticDataset, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, images, views in (
        ("train", ds.train_images, ds.train_views),
        ("holdout", ds.holdout_images, ds.holdout_views),
    ):
        for i, (img, view) in enumerate(zip(images, views)):
            name = f"{split}_{i:03d}.ppm"
            write_ppm(out / "images" / name, img)
            rows.append(
                [split, name, view.fx, view.fy, view.cx, view.cy, view.width, view.height]
                + list(view.view_matrix.reshape(-1))
            )
    with open(out / "cameras.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["split", "image", "fx", "fy", "cx", "cy", "width", "height"]
            + [f"m{i}{j}" for i in range(4) for j in range(4)]
        )
        writer.writerows(rows)
    np.savetxt(out / "points.csv", ds.point_cloud, delimiter=",", fmt="%.9g")
    with open(out / "meta.toml", "w") as fh:
        fh.write(f'kind = "{ds.kind}"\nres = {ds.res}\nseed = {ds.seed}\n')


def load_dataset(path) -> SyntheticDataset:
    root = Path(path)
    meta = {}
    for line in (root / "meta.toml").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip().strip('"')
    train_images, holdout_images = [], []
    train_views, holdout_views = [], []
    with open(root / "cameras.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            mat = np.array([float(row[f"m{i}{j}"]) for i in range(4) for j in range(4)]).reshape(4, 4)
            view = ViewContext(
                mat,
                fx=float(row["fx"]),
                fy=float(row["fy"]),
                cx=float(row["cx"]),
                cy=float(row["cy"]),
                width=int(row["width"]),
                height=int(row["height"]),
            )
            img = read_ppm(root / "images" / row["image"])
            if row["split"] == "train":
                train_views.append(view)
                train_images.append(img)
            else:
                holdout_views.append(view)
                holdout_images.append(img)
    cloud = np.loadtxt(root / "points.csv", delimiter=",")
    return SyntheticDataset(
        kind=meta.get("kind", "textured-spheres"),
        res=int(meta.get("res", 64)),
        seed=int(meta.get("seed", 0)),
        train_images=train_images,
        holdout_images=holdout_images,
        train_views=train_views,
        holdout_views=holdout_views,
        point_cloud=cloud,
    )
