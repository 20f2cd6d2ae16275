"""Dataset I/O, pinhole cameras, and the synthetic-scene generator with its
analytic reference ray tracer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .image_io import read_f32, read_png, write_f32, write_png8
from .intersect import Ray
from .ply import write_ply

# Everything synthetic lives in the unit working volume [-1,1]^3.
WORLD_BBOX_MIN = np.array([-1.0, -1.0, -1.0])
WORLD_BBOX_MAX = np.array([1.0, 1.0, 1.0])
CAMERA_RADIUS = 3.2
CAMERA_ANGLE_X = 0.69  # radians

# The nested scene's rear sphere (the scene's own albedo/alpha describe the
# front slab).
NESTED_SPHERE_ALBEDO = np.array([0.2, 0.4, 0.9])
NESTED_SPHERE_ALPHA = 0.75


@dataclass
class Camera:
    """Pinhole camera, OpenGL-style pose: looks down -z, x right, y up."""

    width: int
    height: int
    focal: float
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("c2w must be 4x4")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        r = self.c2w[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("c2w rotation block must be orthonormal")


@dataclass
class Dataset:
    cameras: list
    images: list  # float rgb arrays in [0,1], premultiplied onto background
    background: np.ndarray = dc_field(
        default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, np.float64)
        for cam, img in zip(self.cameras, self.images):
            if img.shape[:2] != (cam.height, cam.width):
                raise FormatError("image dimensions do not match their camera")

    @property
    def n_pixels(self) -> int:
        return sum(c.width * c.height for c in self.cameras)


@dataclass
class SyntheticScene:
    """Analytic test scene.  kind selects the geometry; sheet-like surfaces
    are idealized as zero-thickness rectangles (the thickness parameter
    records the nominal physical extent used when voxelizing comparisons)."""

    kind: str  # sphere | thin_sheet | semi_transparent_slab | nested
    center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5
    thickness: float = 0.03
    albedo: np.ndarray = dc_field(default_factory=lambda: np.array([0.8, 0.3, 0.25]))
    alpha: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, np.float64)
        self.albedo = np.asarray(self.albedo, np.float64)
        if self.kind not in ("sphere", "thin_sheet", "semi_transparent_slab", "nested"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")


def make_scene(kind: str, alpha: float | None = None) -> SyntheticScene:
    """Stock scene of each kind with geometry inside the working volume."""
    if kind == "sphere":
        return SyntheticScene(kind=kind, radius=0.5,
                              alpha=1.0 if alpha is None else alpha)
    if kind == "thin_sheet":
        return SyntheticScene(kind=kind, center=np.array([0.0, 0.0, 0.1]),
                              radius=0.55, albedo=np.array([0.25, 0.55, 0.8]),
                              alpha=0.6 if alpha is None else alpha)
    if kind == "semi_transparent_slab":
        return SyntheticScene(kind=kind, center=np.array([0.0, 0.0, 0.15]),
                              radius=0.55, albedo=np.array([0.85, 0.35, 0.3]),
                              alpha=0.5 if alpha is None else alpha)
    if kind == "nested":
        return SyntheticScene(kind=kind, center=np.array([0.0, 0.0, 0.7]),
                              radius=0.55, albedo=np.array([0.85, 0.35, 0.3]),
                              alpha=0.5 if alpha is None else alpha)
    raise ValueError(f"unknown scene kind {kind!r}")


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

def generate_ray(camera: Camera, px: int, py: int) -> Ray:
    """Ray through the center of pixel (px, py); direction not normalized."""
    d_cam = np.array([
        (px + 0.5 - camera.width / 2.0) / camera.focal,
        -(py + 0.5 - camera.height / 2.0) / camera.focal,
        -1.0,
    ])
    return Ray(origin=camera.c2w[:3, 3].copy(), dir=camera.c2w[:3, :3] @ d_cam)


def camera_rays(camera: Camera):
    """All pixel-center rays of a camera, row-major: (origins, dirs)."""
    xs = (np.arange(camera.width) + 0.5 - camera.width / 2.0) / camera.focal
    ys = -(np.arange(camera.height) + 0.5 - camera.height / 2.0) / camera.focal
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ camera.c2w[:3, :3].T
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """OpenGL-style camera-to-world matrix looking from eye at target."""
    eye = np.asarray(eye, np.float64)
    target = np.asarray(target, np.float64)
    up = np.asarray(up, np.float64)
    z = eye - target
    z = z / np.linalg.norm(z)
    if abs(np.dot(up, z)) > 0.99 * np.linalg.norm(up):
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0] = x
    c2w[:3, 1] = y
    c2w[:3, 2] = z
    c2w[:3, 3] = eye
    return c2w


# ---------------------------------------------------------------------------
# dataset I/O (NeRF-synthetic transforms.json layout)
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, outdir):
    """transforms.json + 8-bit PNG previews + lossless .f32 sidecars."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cam0 = dataset.cameras[0]
    meta = {
        "camera_angle_x": 2.0 * np.arctan(0.5 * cam0.width / cam0.focal),
        "background": dataset.background.tolist(),
        "frames": [],
    }
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        name = f"r_{i}"
        meta["frames"].append({
            "file_path": f"./{name}",
            "transform_matrix": cam.c2w.tolist(),
        })
        write_png8(outdir / f"{name}.png", img)
        write_f32(outdir / f"{name}.f32", img)
    with open(outdir / "transforms.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_dataset(path, background=None) -> Dataset:
    """Load a NeRF-synthetic-style directory.

    focal = 0.5*W / tan(0.5*camera_angle_x); RGBA images are composited onto
    the background (white unless the metadata or argument says otherwise).
    A lossless .f32 sidecar takes precedence over the PNG when present.
    """
    path = Path(path)
    tj = path / "transforms.json"
    if not tj.exists():
        raise FormatError(f"{tj}: missing transforms.json")
    with open(tj) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{tj}: invalid JSON ({e})") from None
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise FormatError(f"{tj}: missing key '{key}'")
    if background is None:
        background = meta.get("background", (1.0, 1.0, 1.0))
    background = np.asarray(background, np.float64)
    cameras = []
    images = []
    for fi, frame in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise FormatError(f"{tj}: frame {fi} missing key '{key}'")
        m = np.asarray(frame["transform_matrix"], np.float64)
        if m.shape != (4, 4):
            raise FormatError(f"{tj}: frame {fi} transform_matrix is not 4x4")
        stem = path / frame["file_path"]
        f32 = stem.with_suffix(".f32")
        png = stem.with_suffix(".png")
        if f32.exists():
            img = read_f32(f32)
        elif png.exists():
            img = read_png(png)
        else:
            raise FormatError(f"missing image for frame {fi}: {png}")
        if img.ndim == 3 and img.shape[2] == 4:
            a = img[..., 3:4]
            img = img[..., :3] * a + background * (1.0 - a)
        h, w = img.shape[:2]
        focal = 0.5 * w / np.tan(0.5 * float(meta["camera_angle_x"]))
        cameras.append(Camera(width=w, height=h, focal=focal, c2w=m))
        images.append(np.asarray(img, np.float64))
    return Dataset(cameras=cameras, images=images, background=background)


# ---------------------------------------------------------------------------
# analytic reference renderer (test oracle) and scene sampling
# ---------------------------------------------------------------------------

def _scene_primitives(scene: SyntheticScene):
    """(kind-specific) list of analytic surfaces as (params, albedo, alpha)."""
    prims = []
    if scene.kind == "sphere":
        prims.append(("sphere", (scene.center, scene.radius), scene.albedo, scene.alpha))
    elif scene.kind in ("thin_sheet", "semi_transparent_slab"):
        prims.append(("rect_z", (scene.center, scene.radius), scene.albedo, scene.alpha))
    elif scene.kind == "nested":
        prims.append(("rect_z", (scene.center, scene.radius), scene.albedo, scene.alpha))
        prims.append(("sphere", (np.zeros(3), 0.4),
                      NESTED_SPHERE_ALBEDO, NESTED_SPHERE_ALPHA))
    return prims


def _prim_hit(kind, params, o, d):
    """Front-facing analytic hit parameter t > 0, or None.

    Spheres contribute their entry point only (the exit is back-facing);
    rectangles are two-sided single crossings.
    """
    if kind == "sphere":
        center, radius = params
        oc = o - center
        b = np.dot(oc, d)
        c = np.dot(oc, oc) - radius * radius
        disc = b * b - np.dot(d, d) * c
        if disc <= 0.0:
            return None
        t = (-b - np.sqrt(disc)) / np.dot(d, d)
        return t if t > 1e-9 else None
    center, half = params
    if abs(d[2]) < 1e-300:
        return None
    t = (center[2] - o[2]) / d[2]
    if t <= 1e-9:
        return None
    p = o + t * d
    if abs(p[0] - center[0]) <= half and abs(p[1] - center[1]) <= half:
        return t
    return None


def reference_render(scene: SyntheticScene, camera: Camera,
                     background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact front-to-back compositing of analytic surface hits with their
    intrinsic opacity, residual transmittance onto the background."""
    bg = np.asarray(background, np.float64)
    prims = _scene_primitives(scene)
    origins, dirs = camera_rays(camera)
    img = np.empty((origins.shape[0], 3))
    for r in range(origins.shape[0]):
        hits = []
        for kind, params, albedo, alpha in prims:
            t = _prim_hit(kind, params, origins[r], dirs[r])
            if t is not None:
                hits.append((t, albedo, alpha))
        hits.sort(key=lambda h: h[0])
        color = np.zeros(3)
        transmit = 1.0
        for _, albedo, alpha in hits:
            color += transmit * alpha * albedo
            transmit *= 1.0 - alpha
        img[r] = color + transmit * bg
    return img.reshape(camera.height, camera.width, 3)


def sample_surface_points(scene: SyntheticScene, n_points: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the scene's analytic surfaces (area-weighted)."""
    areas = []
    prims = _scene_primitives(scene)
    for kind, params, _, _ in prims:
        if kind == "sphere":
            areas.append(4.0 * np.pi * params[1] ** 2)
        else:
            areas.append((2.0 * params[1]) ** 2)
    areas = np.asarray(areas)
    counts = np.maximum(1, np.round(n_points * areas / areas.sum()).astype(int))
    pts = []
    for (kind, params, _, _), cnt in zip(prims, counts):
        if kind == "sphere":
            center, radius = params
            v = rng.normal(size=(cnt, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            pts.append(center + radius * v)
        else:
            center, half = params
            xy = rng.uniform(-half, half, size=(cnt, 2))
            p = np.column_stack([center[0] + xy[:, 0], center[1] + xy[:, 1],
                                 np.full(cnt, center[2])])
            pts.append(p)
    return np.concatenate(pts, axis=0)


def make_dataset(scene: SyntheticScene, n_views: int, resolution: int,
                 seed: int = 0, background=(1.0, 1.0, 1.0),
                 gt_points: int = 20000):
    """Cameras on a Fibonacci sphere looking at the origin, reference-rendered
    images, and ground-truth surface points.  Returns (Dataset, points)."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    rng = np.random.default_rng(seed)
    focal = 0.5 * resolution / np.tan(0.5 * CAMERA_ANGLE_X)
    cameras = []
    images = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n_views):
        y = 1.0 - 2.0 * (i + 0.5) / n_views
        r = np.sqrt(max(0.0, 1.0 - y * y))
        th = golden * i
        eye = CAMERA_RADIUS * np.array([np.cos(th) * r, y, np.sin(th) * r])
        cam = Camera(width=resolution, height=resolution, focal=focal,
                     c2w=look_at(eye))
        cameras.append(cam)
        images.append(reference_render(scene, cam, background))
    dataset = Dataset(cameras=cameras, images=images, background=background)
    points = sample_surface_points(scene, gt_points, rng)
    return dataset, points


def save_scene_bundle(scene: SyntheticScene, dataset: Dataset,
                      points: np.ndarray, outdir):
    """Dataset directory plus the ground-truth point cloud (gt_points.ply)."""
    outdir = Path(outdir)
    save_dataset(dataset, outdir)
    write_ply(outdir / "gt_points.ply", points)
    with open(outdir / "scene.json", "w") as fh:
        json.dump({"kind": scene.kind, "center": scene.center.tolist(),
                   "radius": scene.radius, "thickness": scene.thickness,
                   "albedo": scene.albedo.tolist(), "alpha": scene.alpha},
                  fh, indent=1)
