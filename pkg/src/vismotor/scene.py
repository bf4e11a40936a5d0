"""Pinhole rendering of block layouts over procedural table backgrounds.

World frame: the board occupies ``[0, 8*cell_size]^2`` in x/y on the table
plane z = 0, z points up.  Camera frame: x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import zoom

from .blockworld import GRID, Block, Layout

CELL_SIZE = 0.04
IMAGE_SIZE = (352, 198)

COLOR_RGB = {
    "yellow": (0.95, 0.85, 0.10),
    "white": (0.96, 0.96, 0.96),
    "gray": (0.50, 0.50, 0.52),
    "magenta": (0.85, 0.10, 0.75),
    "blue": (0.10, 0.20, 0.90),
    "cyan": (0.10, 0.85, 0.90),
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
}
LIGHT_DIR = np.array([-0.3, -0.5, 0.8]) / np.linalg.norm([-0.3, -0.5, 0.8])


class SceneError(ValueError):
    pass


class BehindCameraError(SceneError):
    pass


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int] = IMAGE_SIZE

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise SceneError("camera rotation is not orthonormal")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``eye``."""
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


def project(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(N, 2)`` and camera depths ``(N,)`` of world points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    pc = camera.to_camera(pts)
    z = pc[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    uv = np.stack([camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy], axis=1)
    return uv, z


def framed_camera(image_size=IMAGE_SIZE, eye=(0.16, -0.24, 0.40), target=(0.16, 0.17, 0.03),
                  cell_size=CELL_SIZE, frame_height=0.08, margin=0.01) -> CameraModel:
    """Camera looking at the board with focal length chosen to frame it.

    The box ``board x [0, frame_height]`` plus ``margin`` meters on every side
    is fitted inside the image with square pixels and centered.
    """
    R, t = look_at(eye, target)
    side = GRID * cell_size
    lo, hi = -margin, side + margin
    corners = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (0.0, frame_height)])
    pc = corners @ R.T + t
    u, v = pc[:, 0] / pc[:, 2], pc[:, 1] / pc[:, 2]
    w, h = image_size
    f = min(w / (u.max() - u.min()), h / (v.max() - v.min()))
    cx = w / 2 - f * (u.max() + u.min()) / 2
    cy = h / 2 - f * (v.max() + v.min()) / 2
    return CameraModel(f, f, cx, cy, R, t, tuple(image_size))


def camera_for_background(background_id: int, base: CameraModel | None = None,
                          eye_jitter: float = 0.015, focal_jitter: float = 0.03) -> CameraModel:
    """Slightly perturbed camera, one per background (fixed per id)."""
    base = base or framed_camera()
    rng = np.random.default_rng([background_id, 7])
    eye = base.center + rng.uniform(-eye_jitter, eye_jitter, 3)
    target = base.center + base.rotation[2] * 0.5
    R, t = look_at(eye, target)
    s = 1.0 + rng.uniform(-focal_jitter, focal_jitter)
    return replace(base, fx=base.fx * s, fy=base.fy * s, rotation=R, translation=t)


def world_coords(cell, cell_size: float = CELL_SIZE, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Centroid of a grid cell in meters."""
    cell = tuple(cell)
    if len(cell) != 3 or not all(0 <= int(c) < GRID and int(c) == c for c in cell):
        raise SceneError(f"cell {cell} outside the {GRID}^3 grid")
    if cell_size <= 0:
        raise SceneError("cell_size must be positive")
    return np.asarray(origin, dtype=float) + (np.asarray(cell, dtype=float) + 0.5) * cell_size


# ---------------------------------------------------------------------------
# meshes and noise

_CUBE_FACES = ((0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (3, 0, 4, 7))
_PYRAMID_FACES = ((0, 3, 2, 1), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4))


def block_mesh(shape: str, centroid, size: float = CELL_SIZE):
    """Vertices and outward-wound faces of a block filling one cell."""
    c = np.asarray(centroid, dtype=float)
    h = size / 2
    base = np.array([[-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h]])
    if shape == "cube":
        verts = np.vstack([base, base + [0, 0, size]])
        faces = _CUBE_FACES
    elif shape == "pyramid":
        verts = np.vstack([base, [[0, 0, h]]])
        faces = _PYRAMID_FACES
    else:
        raise SceneError(f"unknown shape {shape!r}")
    return verts + c, faces


@dataclass(frozen=True)
class NoiseParams:
    scale_frac: float = 0.10
    rot_xy_deg: float = 6.0
    rot_z_deg: float = 10.0
    disp_m: float = 0.01

    def __post_init__(self):
        if min(self.scale_frac, self.rot_xy_deg, self.rot_z_deg, self.disp_m) < 0:
            raise SceneError("noise parameters must be non-negative")

    @classmethod
    def off(cls) -> "NoiseParams":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BlockNoise:
    """One draw of per-block noise."""

    scale: np.ndarray          # per-axis factors
    angles_deg: np.ndarray     # rotation about x, y, z
    displacement: np.ndarray   # meters

    def rotation(self) -> np.ndarray:
        ax, ay, az = np.radians(self.angles_deg)
        cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return rz @ ry @ rx


def sample_block_noise(noise: NoiseParams, rng: np.random.Generator) -> BlockNoise:
    u = rng.uniform(-1.0, 1.0, size=9)
    return BlockNoise(
        scale=1.0 + noise.scale_frac * u[0:3],
        angles_deg=np.array([noise.rot_xy_deg * u[3], noise.rot_xy_deg * u[4], noise.rot_z_deg * u[5]]),
        displacement=noise.disp_m * u[6:9],
    )


def apply_noise(vertices, noise: NoiseParams, rng_seed, centroid=None) -> np.ndarray:
    """Scale, rotate (about the centroid) and displace a block's vertices.

    ``rng_seed`` may be an int or a ``numpy`` Generator.  ``centroid``
    defaults to the vertex mean.
    """
    v = np.asarray(vertices, dtype=float)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    draw = sample_block_noise(noise, rng)
    c = v.mean(axis=0) if centroid is None else np.asarray(centroid, dtype=float)
    return ((v - c) * draw.scale) @ draw.rotation().T + c + draw.displacement


# ---------------------------------------------------------------------------
# rasterization

def fill_convex(poly: np.ndarray, width: int, height: int):
    """Pixels whose centers lie inside a convex polygon.

    Returns ``(rows, cols)`` index arrays.  Boundary pixels use a half-open
    rule so polygons sharing an edge do not both claim it.
    """
    poly = np.asarray(poly, dtype=float)
    x0 = max(int(np.floor(poly[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(poly[:, 0].max() - 0.5)), width - 1)
    y0 = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(poly[:, 1].max() - 0.5)), height - 1)
    if x1 < x0 or y1 < y0:
        return np.empty(0, int), np.empty(0, int)
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = np.arange(y0, y1 + 1) + 0.5
    px, py = np.meshgrid(xs, ys)
    area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if abs(area2) < 1e-12:
        return np.empty(0, int), np.empty(0, int)
    sign = 1.0 if area2 > 0 else -1.0
    inside = np.ones(px.shape, dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        ex, ey = b - a
        cross = sign * (ex * (py - a[1]) - ey * (px - a[0]))
        # top-left style tie break
        tie = (ey * sign > 0) | ((ey == 0) & (ex * sign < 0))
        inside &= (cross > 0) | ((cross == 0) & tie)
    r, c = np.nonzero(inside)
    return r + y0, c + x0


@dataclass
class Annotation:
    block_index: int
    class_index: int
    bbox: tuple[float, float, float, float]
    visible_fraction: float
    cell: tuple[int, int, int]


@dataclass
class RenderedScene:
    image: np.ndarray
    annotations: list[Annotation] = field(default_factory=list)
    owner: np.ndarray | None = None  # per-pixel block index, -1 for background


@dataclass
class _Face:
    block: int
    poly: np.ndarray
    depth: float
    color: np.ndarray


def block_geometry(layout: Layout, noise: NoiseParams | None = None, rng_seed=0,
                   cell_size: float = CELL_SIZE):
    """World-space vertices and faces for every block (noise applied if given)."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for b in layout.blocks:
        centroid = world_coords(b.cell, cell_size)
        verts, faces = block_mesh(b.shape, centroid, cell_size)
        if noise is not None:
            verts = apply_noise(verts, noise, rng, centroid)
        out.append((verts, faces))
    return out


def render_scene(layout: Layout, camera: CameraModel, background: np.ndarray,
                 noise: NoiseParams | None = None, rng_seed=0, *, cell_size: float = CELL_SIZE,
                 lightness_jitter: float = 0.15) -> RenderedScene:
    """Composite flat-shaded blocks over ``background`` with the painter's algorithm.

    Back faces are culled and the remaining faces drawn far to near by mean
    camera depth.  Boxes cover each block's full projected extent; visible
    fractions compare owned pixels against the block's unoccluded silhouette.
    Noise (and the per-scene lightness jitter that accompanies it) is only
    applied when ``noise`` is given.
    """
    w, h = camera.image_size
    background = np.asarray(background)
    if background.shape != (h, w, 3):
        raise SceneError(f"background shape {background.shape} does not match camera {(h, w, 3)}")
    rng = np.random.default_rng(rng_seed)
    lightness = 1.0
    if noise is not None and lightness_jitter > 0:
        lightness = 1.0 + rng.uniform(-lightness_jitter, lightness_jitter)
    geometry = block_geometry(layout, noise, rng, cell_size)
    eye = camera.center

    faces: list[_Face] = []
    silhouettes = []
    boxes = []
    for i, (b, (verts, mesh_faces)) in enumerate(zip(layout.blocks, geometry)):
        uv, _ = project(camera, verts)
        pc = camera.to_camera(verts)
        base = np.array(COLOR_RGB[b.color]) * lightness
        centre = verts.mean(axis=0)
        sil = np.zeros((h, w), dtype=bool)
        for f in mesh_faces:
            fv = verts[list(f)]
            normal = np.cross(fv[1] - fv[0], fv[2] - fv[0])
            normal /= np.linalg.norm(normal)
            if np.dot(normal, fv.mean(axis=0) - centre) < 0:
                normal = -normal
            if np.dot(normal, eye - fv.mean(axis=0)) <= 0:
                continue
            shade = 0.55 + 0.45 * max(0.0, float(normal @ LIGHT_DIR))
            poly = uv[list(f)]
            faces.append(_Face(i, poly, float(pc[list(f), 2].mean()), np.clip(base * shade, 0, 1)))
            rr, cc = fill_convex(poly, w, h)
            sil[rr, cc] = True
        silhouettes.append(sil)
        x0, y0 = uv.min(axis=0)
        x1, y1 = uv.max(axis=0)
        boxes.append((max(x0, 0.0), max(y0, 0.0), min(x1, w - 1.0), min(y1, h - 1.0)))

    image = background.copy()
    owner = np.full((h, w), -1, dtype=np.int32)
    for face in sorted(faces, key=lambda f: -f.depth):
        rr, cc = fill_convex(face.poly, w, h)
        image[rr, cc] = face.color
        owner[rr, cc] = face.block

    annotations = []
    for i, b in enumerate(layout.blocks):
        x0, y0, x1, y1 = boxes[i]
        if not (x0 < x1 and y0 < y1):
            continue  # entirely outside the frame
        total = int(silhouettes[i].sum())
        vis = float(np.sum(owner == i) / total) if total else 0.0
        annotations.append(Annotation(i, b.class_index, (float(x0), float(y0), float(x1), float(y1)),
                                      vis, b.cell))
    return RenderedScene(image, annotations, owner)


# ---------------------------------------------------------------------------
# backgrounds

def board_mask(camera: CameraModel, cell_size: float = CELL_SIZE) -> np.ndarray:
    w, h = camera.image_size
    side = GRID * cell_size
    uv, _ = project(camera, [[0, 0, 0], [side, 0, 0], [side, side, 0], [0, side, 0]])
    mask = np.zeros((h, w), dtype=bool)
    rr, cc = fill_convex(uv, w, h)
    mask[rr, cc] = True
    return mask


def _low_frequency(rng, h, w, grid=(4, 7)):
    coarse = rng.uniform(0, 1, size=(grid[0], grid[1], 3))
    img = zoom(coarse, (h / grid[0], w / grid[1], 1), order=3, mode="nearest")
    return np.clip(img[:h, :w], 0, 1)


def background_layers(rng_seed: int, camera: CameraModel, distractors: bool = False,
                      cell_size: float = CELL_SIZE):
    """Background image plus its board mask and distractor mask."""
    w, h = camera.image_size
    rng = np.random.default_rng(rng_seed)
    room = 0.25 + 0.5 * _low_frequency(rng, h, w)
    tint = rng.uniform(0.6, 1.0, 3)
    img = room * tint

    # table around the board
    margin = 0.12
    side = GRID * cell_size
    table_c = np.array([0.55, 0.40, 0.25]) * rng.uniform(0.8, 1.2)
    tq = [[-margin, -margin, 0], [side + margin, -margin, 0], [side + margin, side + margin, 0],
          [-margin, side + margin, 0]]
    rr, cc = fill_convex(project(camera, tq)[0], w, h)
    img[rr, cc] = np.clip(table_c, 0, 1)

    light, dark = rng.uniform(0.82, 0.95), rng.uniform(0.08, 0.22)
    for gx in range(GRID):
        for gy in range(GRID):
            q = np.array([[gx, gy, 0], [gx + 1, gy, 0], [gx + 1, gy + 1, 0], [gx, gy + 1, 0]], float)
            rr, cc = fill_convex(project(camera, q * cell_size)[0], w, h)
            img[rr, cc] = light if (gx + gy) % 2 == 0 else dark
    mask = board_mask(camera, cell_size)

    dmask = np.zeros((h, w), dtype=bool)
    if distractors:
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        for _ in range(int(rng.integers(1, 6))):
            for _attempt in range(50):
                cx, cy = rng.uniform(0, w), rng.uniform(0, h)
                ax, ay = rng.uniform(6, 22), rng.uniform(6, 22)
                blob = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
                if rng.random() < 0.5:  # ring
                    blob &= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 >= 0.35
                if blob.any() and not (blob & mask).any():
                    img[blob] = rng.uniform(0, 1, 3)
                    dmask |= blob
                    break

    # global contrast and lightness variation
    contrast, offset = rng.uniform(0.8, 1.2), rng.uniform(-0.08, 0.08)
    img = np.clip((img - 0.5) * contrast + 0.5 + offset, 0, 1)
    return img, mask, dmask


def synth_background(rng_seed: int, camera: CameraModel | None = None, distractors: bool = False,
                     cell_size: float = CELL_SIZE) -> np.ndarray:
    camera = camera or framed_camera()
    return background_layers(rng_seed, camera, distractors, cell_size)[0]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
