"""Procedural (dressed figure, garment mask, flat-lay) triplets and VITON-HD style I/O.

Figures are built from discs, rectangles, capsules and trapezoids in a body
frame where the full figure is one unit tall (head top at y=0, feet at y~1).
Everything is rasterised at pixel centres without anti-aliasing, so the
garment mask is exactly the set of pixels the garment painter wrote last.

Directory layout written by :func:`generate_dataset`::

    out_dir/
      image/<id>.png        person wearing the garment
      cloth/<id>.png        flat-lay garment on white
      cloth-mask/<id>.png   garment mask on the person image (0/255)
      manifest.csv          id,category,body_view,seed
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .conditioning import TryOffPair
from .errors import ConfigError, DatasetError, ShapeError

log = logging.getLogger(__name__)

CATEGORIES = ("top", "bottom", "dress")
BODY_VIEWS = ("half", "full")
SLEEVES = ("short", "long", "none")
PATTERNS = ("solid", "stripes", "checks", "logo")
MANIFEST_FIELDS = ("id", "category", "body_view", "seed")


@dataclass(frozen=True)
class Pattern:
    kind: str = "solid"
    size: float = 0.05  # stripe width / check size / logo half-size, body units
    color2: tuple = (1.0, 1.0, 1.0)
    position: tuple = (0.0, 0.1)  # logo centre relative to the garment anchor


@dataclass(frozen=True)
class GarmentSpec:
    category: str = "top"
    base_color: tuple = (0.8, 0.2, 0.2)
    pattern: Pattern = field(default_factory=Pattern)
    sleeve: str = "short"
    seed: int = 0

    def validate(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"garment category {self.category!r} not in {CATEGORIES}")
        if self.sleeve not in SLEEVES:
            raise ConfigError(f"sleeve {self.sleeve!r} not in {SLEEVES}")
        if self.pattern.kind not in PATTERNS:
            raise ConfigError(f"pattern {self.pattern.kind!r} not in {PATTERNS}")
        if self.pattern.size <= 0:
            raise ConfigError("pattern size must be positive")
        for c in (self.base_color, self.pattern.color2):
            if len(c) != 3 or not all(0.0 <= v <= 1.0 for v in c):
                raise ConfigError(f"colour {c} outside [0, 1]^3")


@dataclass(frozen=True)
class SceneSpec:
    body_view: str = "full"
    pose_angle: float = 20.0  # arm spread from vertical, degrees
    figure_tone: float = 0.7
    background: float = 0.35
    resolution: tuple = (64, 48)
    seed: int = 0

    def validate(self):
        H, W = self.resolution
        if H % 16 or W % 16:
            raise ConfigError(f"resolution {H}x{W} must be divisible by 16")
        if not 0.0 <= self.pose_angle <= 60.0:
            raise ConfigError(f"pose_angle {self.pose_angle} outside [0, 60]")
        if self.body_view not in BODY_VIEWS:
            raise ConfigError(f"body_view {self.body_view!r} not in {BODY_VIEWS}")


# --- geometry -------------------------------------------------------------------


def _disc(cx, cy, r):
    return lambda x, y: (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def _rect(x0, y0, x1, y1):
    return lambda x, y: (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def _capsule(ax, ay, bx, by, r):
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy

    def inside(x, y):
        s = np.clip(((x - ax) * dx + (y - ay) * dy) / ll, 0.0, 1.0)
        return (x - ax - s * dx) ** 2 + (y - ay - s * dy) ** 2 <= r * r

    return inside


def _trapezoid(cx, y0, y1, half0, half1):
    def inside(x, y):
        s = (y - y0) / (y1 - y0)
        half = half0 + s * (half1 - half0)
        return (y >= y0) & (y <= y1) & (np.abs(x - cx) <= half)

    return inside


def _union(*shapes):
    def inside(x, y):
        out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for s in shapes:
            out |= s(x, y)
        return out

    return inside


TORSO = (-0.13, 0.16, 0.13, 0.50)
SHOULDER = (0.12, 0.19)
ARM_LEN, ARM_R = 0.36, 0.035
HIP = (-0.13, 0.48, 0.13, 0.56)
LEG_TOP, LEG_BOTTOM, LEG_R = (0.065, 0.54), (0.075, 0.97), 0.05
SLEEVE_FRACTION = {"short": 0.35, "long": 1.0, "none": 0.0}
# Vertical centre of each garment in body units, used to frame half-body views.
GARMENT_CENTRE = {"top": 0.34, "bottom": 0.74, "dress": 0.48}


def _arm_end(side, angle_deg, frac=1.0):
    a = math.radians(angle_deg)
    sx, sy = side * SHOULDER[0], SHOULDER[1]
    return sx, sy, sx + side * frac * ARM_LEN * math.sin(a), sy + frac * ARM_LEN * math.cos(a)


def _body_shapes(angle):
    head = _disc(0.0, 0.08, 0.07)
    torso = _rect(*TORSO)
    hips = _rect(*HIP)
    legs = [_capsule(s * LEG_TOP[0], LEG_TOP[1], s * LEG_BOTTOM[0], LEG_BOTTOM[1], LEG_R) for s in (-1, 1)]
    arms = [_capsule(*_arm_end(s, angle), ARM_R) for s in (-1, 1)]
    return _union(head, torso, hips, *legs), _union(*arms)


def _garment_shapes(spec: GarmentSpec, angle: float, scale: tuple[float, float]):
    """(trunk part drawn under the arms, sleeve part drawn over them)."""
    sw, sl = scale
    frac = SLEEVE_FRACTION[spec.sleeve]
    sleeves = None
    if spec.category in ("top", "dress") and frac > 0:
        sleeves = _union(*[_capsule(*_arm_end(s, angle, frac), ARM_R + 0.012) for s in (-1, 1)])
    x0, y0, x1, _ = TORSO
    if spec.category == "top":
        trunk = _rect(x0 * sw - 0.01, y0, x1 * sw + 0.01, y0 + (0.52 - y0) * sl)
    elif spec.category == "dress":
        hem = 0.56 + 0.26 * sl
        trunk = _union(_rect(x0 * sw - 0.01, y0, x1 * sw + 0.01, 0.50), _trapezoid(0.0, 0.48, hem, 0.14 * sw, 0.22 * sw))
    else:
        hx0, hy0, hx1, hy1 = HIP
        waist = _rect(hx0 * sw - 0.01, hy0, hx1 * sw + 0.01, hy1)
        if spec.sleeve == "none":  # skirt
            trunk = _union(waist, _trapezoid(0.0, hy0, 0.56 + 0.22 * sl, 0.14 * sw, 0.21 * sw))
        else:  # shorts ("short") or trousers ("long")
            length = 0.4 if spec.sleeve == "short" else 1.0
            legs = []
            for s in (-1, 1):
                ax, ay = s * LEG_TOP[0], LEG_TOP[1]
                bx, by = s * LEG_BOTTOM[0], LEG_BOTTOM[1]
                legs.append(_capsule(ax, ay, ax + length * (bx - ax), ay + length * (by - ay) * sl, LEG_R + 0.012))
            trunk = _union(waist, *legs)
    return trunk, sleeves


def _anchor(spec: GarmentSpec):
    return (0.0, TORSO[1]) if spec.category in ("top", "dress") else (0.0, HIP[1])


def _pattern_colour(spec: GarmentSpec, u, v):
    """RGB at garment-local coordinates ``(u, v)``."""
    base = np.asarray(spec.base_color, dtype=np.float64)
    alt = np.asarray(spec.pattern.color2, dtype=np.float64)
    p = spec.pattern
    if p.kind == "solid":
        sel = np.zeros(np.shape(u), dtype=bool)
    elif p.kind == "stripes":
        sel = np.floor(v / p.size).astype(int) % 2 == 1
    elif p.kind == "checks":
        sel = (np.floor(u / p.size).astype(int) + np.floor(v / p.size).astype(int)) % 2 == 1
    else:
        sel = (np.abs(u - p.position[0]) <= p.size) & (np.abs(v - p.position[1]) <= p.size)
    return np.where(sel[..., None], alt, base)


def _garment_jitter(spec: GarmentSpec):
    rng = np.random.default_rng(spec.seed)
    return tuple(rng.uniform(0.92, 1.08, size=2))


def _grid(H, W, scale, cx_px, cy_px, centre_y):
    """Body-frame coordinates of every pixel centre."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    return (xs - cx_px) / scale, (ys - cy_px) / scale + centre_y


def render_person(garment: GarmentSpec, scene: SceneSpec):
    """Person image ``[3, H, W]`` and exact garment mask ``[H, W]``."""
    H, W = scene.resolution
    rng = np.random.default_rng(scene.seed)
    dx, zoom = rng.uniform(-0.04, 0.04) * W, rng.uniform(0.95, 1.05)
    if scene.body_view == "full":
        scale, centre_y = 0.93 * H * zoom, 0.5
    else:
        scale, centre_y = 1.6 * H * zoom, GARMENT_CENTRE[garment.category]
    x, y = _grid(H, W, scale, W / 2 + dx, H / 2, centre_y)

    img = np.empty((H, W, 3))
    img[:] = scene.background
    owner = np.zeros((H, W), dtype=bool)

    body, arms = _body_shapes(scene.pose_angle)
    trunk, sleeves = _garment_shapes(garment, scene.pose_angle, _garment_jitter(garment))
    au, av = _anchor(garment)
    cloth = _pattern_colour(garment, x - au, y - av)

    def paint(inside, colour, is_garment):
        img[inside] = colour[inside] if np.ndim(colour) == 3 else colour
        owner[inside] = is_garment

    paint(body(x, y), scene.figure_tone, False)
    paint(trunk(x, y), cloth, True)
    paint(arms(x, y), scene.figure_tone, False)
    if sleeves is not None:
        paint(sleeves(x, y), cloth, True)
    return img.transpose(2, 0, 1).astype(np.float32), owner.astype(np.float32)


FLAT_ANGLE = 60.0


def render_flat_lay(garment: GarmentSpec, resolution=(64, 48)):
    """Flat-lay ``[3, H, W]`` on white and its silhouette ``[H, W]``."""
    H, W = resolution
    trunk, sleeves = _garment_shapes(garment, FLAT_ANGLE, _garment_jitter(garment))
    shape = trunk if sleeves is None else _union(trunk, sleeves)
    # Centre the garment by its bounding box in body units.
    xs, ys = np.meshgrid(np.linspace(-0.6, 0.6, 241), np.linspace(0.0, 1.1, 221))
    inside = shape(xs, ys)
    bx = (xs[inside].min() + xs[inside].max()) / 2
    by0, by1 = ys[inside].min(), ys[inside].max()
    extent = max(xs[inside].max() - xs[inside].min(), 1e-6) / W, (by1 - by0) / H
    scale = min(0.9 / max(extent), 1.2 * H)
    x, y = _grid(H, W, scale, W / 2 - bx * scale, H / 2, (by0 + by1) / 2)
    sil = shape(x, y)
    au, av = _anchor(garment)
    cloth = _pattern_colour(garment, x - au, y - av)
    img = np.ones((H, W, 3))
    img[sil] = cloth[sil]
    return img.transpose(2, 0, 1).astype(np.float32), sil.astype(np.float32)


def generate_pair(garment: GarmentSpec, scene: SceneSpec, id: str = "pair") -> TryOffPair:
    garment.validate()
    scene.validate()
    person, mask = render_person(garment, scene)
    flat, _ = render_flat_lay(garment, scene.resolution)
    return TryOffPair(
        id=id, person=person, mask=mask, garment=flat, category=garment.category, body_view=scene.body_view
    )


# --- datasets -------------------------------------------------------------------


def _random_colour(rng):
    return tuple(float(v) for v in rng.uniform(0.05, 0.9, size=3))


def random_specs(category: str, body_view: str, seed: int, resolution=(64, 48)):
    """Garment and scene specs fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    kind = PATTERNS[rng.integers(len(PATTERNS))]
    pattern = Pattern(
        kind=kind,
        size=float(rng.uniform(0.03, 0.07)),
        color2=_random_colour(rng),
        position=(float(rng.uniform(-0.06, 0.06)), float(rng.uniform(0.06, 0.2))),
    )
    garment = GarmentSpec(
        category=category,
        base_color=_random_colour(rng),
        pattern=pattern,
        sleeve=SLEEVES[rng.integers(len(SLEEVES))],
        seed=int(rng.integers(2**31)),
    )
    scene = SceneSpec(
        body_view=body_view,
        pose_angle=float(rng.uniform(0.0, 60.0)),
        figure_tone=float(rng.uniform(0.55, 0.85)),
        background=float(rng.uniform(0.15, 0.45)),
        resolution=tuple(resolution),
        seed=int(rng.integers(2**31)),
    )
    return garment, scene


def manifest_rows(n: int, master_seed: int):
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(master_seed)
    seeds = rng.integers(0, 2**31, size=n)
    return [
        {"id": f"{i:05d}", "category": CATEGORIES[i % 3], "body_view": BODY_VIEWS[i % 2], "seed": int(seeds[i])}
        for i in range(n)
    ]


def synthesize(n: int, master_seed: int, resolution=(64, 48)) -> list[TryOffPair]:
    """Generate ``n`` pairs in memory, balanced round-robin over categories and views."""
    pairs = []
    for row in manifest_rows(n, master_seed):
        g, s = random_specs(row["category"], row["body_view"], row["seed"], resolution)
        pairs.append(generate_pair(g, s, id=row["id"]))
    return pairs


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` or ``[H, W]`` float in [0, 1] to 8-bit, channels last."""
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0) if arr.ndim == 3 else arr


def write_png(path, img) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def generate_dataset(n: int, master_seed: int, out_dir, resolution=(64, 48)) -> list[dict]:
    """Write ``n`` synthetic triplets and ``manifest.csv`` under ``out_dir``; return the manifest rows."""
    out = Path(out_dir)
    rows = manifest_rows(n, master_seed)
    for sub in ("image", "cloth", "cloth-mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for row in rows:
        g, s = random_specs(row["category"], row["body_view"], row["seed"], resolution)
        pair = generate_pair(g, s, id=row["id"])
        write_png(out / "image" / f"{pair.id}.png", pair.person)
        write_png(out / "cloth" / f"{pair.id}.png", pair.garment)
        write_png(out / "cloth-mask" / f"{pair.id}.png", pair.mask)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_manifest(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {row["id"]: row for row in csv.DictReader(fh)}


def load_dataset(data_dir, strict: bool = False) -> list[TryOffPair]:
    """Load a VITON-HD style directory, sorted by id.

    Ids lacking a mask (or a flat-lay, when ``cloth/`` exists) are skipped with a
    warning; ``strict=True`` raises :class:`DatasetError` listing them instead.
    """
    root = Path(data_dir)
    if not (root / "image").is_dir():
        raise DatasetError(f"{root} has no image/ directory")
    has_cloth = (root / "cloth").is_dir()
    meta = read_manifest(root / "manifest.csv") if (root / "manifest.csv").exists() else {}
    ids = sorted(p.stem for p in (root / "image").glob("*.png"))
    pairs, missing = [], []
    for pid in ids:
        mask_path = root / "cloth-mask" / f"{pid}.png"
        cloth_path = root / "cloth" / f"{pid}.png"
        if not mask_path.exists() or (has_cloth and not cloth_path.exists()):
            missing.append(pid)
            continue
        person = read_png(root / "image" / f"{pid}.png")[:3]
        mask = read_png(mask_path)
        if mask.ndim == 3:
            mask = mask[0]
        mask = (mask >= 0.5).astype(np.float32)
        garment = read_png(cloth_path)[:3] if has_cloth else None
        if person.shape[-2:] != mask.shape or (garment is not None and garment.shape != person.shape):
            raise ShapeError(f"pair {pid}: image, mask and cloth sizes disagree")
        info = meta.get(pid, {})
        pairs.append(
            TryOffPair(
                id=pid,
                person=person,
                mask=mask,
                garment=garment,
                category=info.get("category", ""),
                body_view=info.get("body_view", ""),
            )
        )
    if missing:
        msg = f"{len(missing)} id(s) missing counterpart files: {', '.join(missing)}"
        if strict:
            raise DatasetError(msg, missing)
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    return pairs
