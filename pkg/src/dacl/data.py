"""Procedural two-domain street scenes and their on-disk format.

Both domains share one scene model: a ground plane receding to a horizon,
sky above it, and a handful of flat objects standing on (or above) the
ground. The source renderer paints flat per-class colours; the target
renderer re-paints the same geometry with a hue rotation, a smooth
illumination field, gamma jitter and sensor noise. Depth and class maps do
not depend on the domain.

Record layout (little-endian)::

    magic    8s   b"DACLREC\\0"
    version  u16
    height   u16
    width    u16
    flags    u8   bit0 image, bit1 depth, bit2 classes
    domain   u8   0 source, 1 target
    scene_id u32
    image    f32[3*H*W]   when bit0
    depth    f32[H*W]     when bit1
    classes  u8[H*W]      when bit2

The ``manifest`` next to the split directories is ``key = value`` text.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ProtocolError

RECORD_MAGIC = b"DACLREC\0"
RECORD_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<8sHHHBBI")

D_MIN, D_MAX = 0.5, 80.0
OBJ_D_MIN, OBJ_D_MAX = 1.0, 75.0
# sky and the far ground sit inside the depth head's open range, not on its bound
FAR_DEPTH = 70.0
CAMERA_HEIGHT = 1.5  # meters; focal length is one image height in pixels

CLASS_NAMES = (
    "sky", "road", "terrain", "building", "vegetation", "car",
    "van", "truck", "pole", "traffic_light", "traffic_sign", "guardrail",
)
NUM_CLASSES = len(CLASS_NAMES)
SKY, ROAD, TERRAIN = 0, 1, 2

PALETTE = np.array(
    [
        [0.55, 0.75, 0.95],
        [0.35, 0.35, 0.38],
        [0.55, 0.50, 0.30],
        [0.70, 0.45, 0.35],
        [0.25, 0.60, 0.25],
        [0.85, 0.15, 0.15],
        [0.90, 0.60, 0.10],
        [0.20, 0.30, 0.80],
        [0.60, 0.60, 0.60],
        [0.95, 0.90, 0.20],
        [0.90, 0.30, 0.70],
        [0.80, 0.80, 0.75],
    ]
)

# width, height, elevation above ground (m), shape, depth range (m)
OBJECT_TYPES = {
    3: (12.0, 9.0, 0.0, "rect", (20.0, 75.0)),
    4: (5.0, 6.0, 0.0, "ellipse", (8.0, 75.0)),
    5: (4.0, 1.5, 0.0, "rect", (3.0, 50.0)),
    6: (5.0, 2.2, 0.0, "rect", (3.0, 50.0)),
    7: (8.0, 3.5, 0.0, "rect", (5.0, 60.0)),
    8: (0.3, 6.0, 0.0, "rect", (2.0, 30.0)),
    9: (0.7, 1.4, 4.0, "rect", (3.0, 30.0)),
    10: (0.9, 0.9, 2.0, "ellipse", (2.0, 30.0)),
    11: (10.0, 0.8, 0.0, "rect", (2.0, 30.0)),
}

TARGET_HUE_DEG = 110.0
TARGET_HUE_JITTER_DEG = 20.0
TARGET_NOISE_SIGMA = 0.05
TARGET_GAMMA_RANGE = (0.8, 1.25)


@dataclass
class SceneObject:
    class_id: int
    shape: str
    x: float  # centre column, pixels
    bottom: float  # bottom row, pixels
    width: float
    height: float
    depth: float


@dataclass
class SceneGeometry:
    seed: int
    scene_id: int
    height: int
    width: int
    horizon: float
    road_x: float
    road_slope: float
    objects: list = field(default_factory=list)

    def ground_depth(self, y):
        """Depth of the ground plane at pixel-centre row ``y``."""
        v = (np.asarray(y, dtype=np.float64) - self.horizon) / self.height
        with np.errstate(divide="ignore"):
            d = np.where(v > 0, CAMERA_HEIGHT / np.maximum(v, 1e-12), FAR_DEPTH)
        return np.clip(d, D_MIN, FAR_DEPTH)

    def rasterize(self):
        """Dense (depth, classes) maps, objects painted far to near."""
        H, W = self.height, self.width
        ys = np.arange(H) + 0.5
        xs = np.arange(W) + 0.5
        depth = np.repeat(self.ground_depth(ys)[:, None], W, axis=1)
        classes = np.full((H, W), TERRAIN, dtype=np.uint8)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        # road converges on a vanishing point at mid-width on the horizon
        t = (yy - self.horizon) / (H - self.horizon)
        centre = W / 2 + (self.road_x - W / 2) * t
        road = (yy > self.horizon) & (np.abs(xx - centre) < self.road_slope * (yy - self.horizon))
        classes[road] = ROAD
        sky = yy <= self.horizon
        classes[sky] = SKY
        depth[sky] = FAR_DEPTH
        for ob in sorted(self.objects, key=lambda o: -o.depth):
            top = ob.bottom - ob.height
            if ob.shape == "rect":
                mask = (np.abs(xx - ob.x) <= ob.width / 2) & (yy >= top) & (yy <= ob.bottom)
            else:
                cy = ob.bottom - ob.height / 2
                mask = ((xx - ob.x) / (ob.width / 2)) ** 2 + ((yy - cy) / (ob.height / 2)) ** 2 <= 1.0
            classes[mask] = ob.class_id
            depth[mask] = ob.depth
        return depth.astype(np.float32), classes


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def generate_scene(seed: int, scene_id: int, height: int = 32, width: int = 64, attempt: int = 0) -> SceneGeometry:
    """Deterministic scene layout for ``(seed, scene_id)``."""
    rng = _rng(seed, scene_id, attempt, 11)
    horizon = height * rng.uniform(0.35, 0.5)
    geom = SceneGeometry(
        seed=seed,
        scene_id=scene_id,
        height=height,
        width=width,
        horizon=horizon,
        road_x=width * rng.uniform(0.3, 0.7),
        road_slope=rng.uniform(0.6, 1.1),
    )
    kinds = sorted(OBJECT_TYPES)
    for _ in range(int(rng.integers(2, 7))):
        cid = int(rng.choice(kinds))
        w_m, h_m, lift, shape, (lo, hi) = OBJECT_TYPES[cid]
        d = float(np.clip(math.exp(rng.uniform(math.log(lo), math.log(hi))), OBJ_D_MIN, OBJ_D_MAX))
        scale = height / d  # pixels per meter at this depth
        ground_row = horizon + CAMERA_HEIGHT * scale
        geom.objects.append(
            SceneObject(
                class_id=cid,
                shape=shape,
                x=float(rng.uniform(0, width)),
                bottom=ground_row - lift * scale,
                width=max(1.0, w_m * scale * rng.uniform(0.8, 1.25)),
                height=max(1.0, h_m * scale * rng.uniform(0.8, 1.25)),
                depth=d,
            )
        )
    return geom


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [-1, 1]
    domain: str
    scene_id: int
    _depth: np.ndarray | None = None
    _classes: np.ndarray | None = None

    @property
    def has_labels(self) -> bool:
        return self._depth is not None

    @property
    def depth(self) -> np.ndarray:
        if self._depth is None:
            raise ProtocolError(f"labels of {self.domain} scene {self.scene_id} are withheld")
        return self._depth

    @property
    def classes(self) -> np.ndarray:
        if self._classes is None:
            raise ProtocolError(f"labels of {self.domain} scene {self.scene_id} are withheld")
        return self._classes


def _hue_rotation(deg: float) -> np.ndarray:
    """RGB rotation about the grey axis (Rodrigues)."""
    a = math.radians(deg)
    k = np.ones(3) / math.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * K + (1 - math.cos(a)) * (K @ K)


def _smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    f = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        py, px = rng.uniform(0, 2 * math.pi, size=2)
        f += np.cos(2 * math.pi * fy * yy + py) * np.cos(2 * math.pi * fx * xx + px)
    return np.clip(1.0 + 0.25 * f, 0.5, 1.5)


def render(geom: SceneGeometry, domain: str) -> Sample:
    depth, classes = geom.rasterize()
    rgb = PALETTE[classes]  # H, W, 3 in [0, 1]
    if domain == "source":
        img = rgb * 2.0 - 1.0
    elif domain == "target":
        rng = _rng(geom.seed, geom.scene_id, 1, 23)
        hue = TARGET_HUE_DEG + rng.uniform(-TARGET_HUE_JITTER_DEG, TARGET_HUE_JITTER_DEG)
        rgb = np.clip(rgb @ _hue_rotation(hue).T, 0.0, 1.0)
        rgb = rgb * _smooth_field(rng, geom.height, geom.width)[..., None]
        gamma = math.exp(rng.uniform(*np.log(TARGET_GAMMA_RANGE)))
        rgb = np.clip(rgb, 0.0, 1.0) ** gamma
        img = rgb * 2.0 - 1.0 + rng.normal(0.0, TARGET_NOISE_SIGMA, size=rgb.shape)
    else:
        raise DataError(f"unknown domain {domain!r}")
    img = np.clip(img, -1.0, 1.0).astype(np.float32).transpose(2, 0, 1).copy()
    return Sample(image=img, domain=domain, scene_id=geom.scene_id, _depth=depth, _classes=classes)


# --- serialization ---------------------------------------------------------

def encode_record(sample: Sample, with_labels: bool = True) -> bytes:
    _, H, W = sample.image.shape
    flags = 1 | ((2 | 4) if with_labels else 0)
    parts = [
        _HEADER.pack(RECORD_MAGIC, RECORD_VERSION, H, W, flags, 0 if sample.domain == "source" else 1, sample.scene_id),
        sample.image.astype("<f4").tobytes(),
    ]
    if with_labels:
        parts.append(sample.depth.astype("<f4").tobytes())
        parts.append(sample.classes.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_record(buf: bytes, path="<memory>") -> Sample:
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: truncated record header")
    magic, version, H, W, flags, dom, scene_id = _HEADER.unpack_from(buf)
    if magic != RECORD_MAGIC:
        raise DataError(f"{path}: not a scene record")
    if version != RECORD_VERSION:
        raise DataError(f"{path}: record version {version}, expected {RECORD_VERSION}")
    n = H * W
    need = _HEADER.size + (12 * n if flags & 1 else 0) + (4 * n if flags & 2 else 0) + (n if flags & 4 else 0)
    if len(buf) != need:
        raise DataError(f"{path}: record is {len(buf)} bytes, expected {need} (truncated?)")
    off = _HEADER.size
    image = np.frombuffer(buf, "<f4", 3 * n, off).reshape(3, H, W).astype(np.float32)
    off += 12 * n
    depth = classes = None
    if flags & 2:
        depth = np.frombuffer(buf, "<f4", n, off).reshape(H, W).astype(np.float32)
        off += 4 * n
    if flags & 4:
        classes = np.frombuffer(buf, np.uint8, n, off).reshape(H, W).copy()
    return Sample(image=image, domain="source" if dom == 0 else "target", scene_id=scene_id, _depth=depth, _classes=classes)


def scene_ids(split: str, domain: str, n_train: int, n_test: int) -> range:
    """Train source and train target use disjoint scenes; test scenes are shared."""
    if split == "train":
        return range(0, n_train) if domain == "source" else range(n_train, 2 * n_train)
    if split == "test":
        return range(2 * n_train, 2 * n_train + n_test)
    raise DataError(f"unknown split {split!r}")


def _ensure_class_coverage(seed, ids, height, width):
    """Per-scene attempt numbers such that every class id appears somewhere."""
    attempts = {i: 0 for i in ids}
    seen = {}
    for i in ids:
        _, cls = generate_scene(seed, i, height, width).rasterize()
        seen[i] = set(np.unique(cls).tolist())
    for c in range(NUM_CLASSES):
        if any(c in s for s in seen.values()):
            continue
        covered = set().union(*seen.values())
        for i in ids:
            rest = set().union(*(seen[j] for j in ids if j != i))
            for a in range(1, 64):
                _, cls = generate_scene(seed, i, height, width, attempt=a).rasterize()
                got = set(np.unique(cls).tolist())
                if c in got and (covered - {c}) <= (rest | got):
                    attempts[i], seen[i] = a, got
                    break
            if c in seen[i]:
                break
    return attempts


def write_manifest(path: Path, entries: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest"
    if not path.is_file():
        raise DataError(f"{path}: missing dataset manifest")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    if int(out.get("version", -1)) != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {out.get('version')}")
    return out


def write_dataset(data_dir, seed: int, n_train: int, n_test: int, height: int = 32, width: int = 64) -> Path:
    if n_train < 1 or n_test < 1:
        raise DataError("dataset counts must be at least 1")
    if height % 16 or width % 16:
        raise DataError("image dims must be divisible by 16")
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    train_src = scene_ids("train", "source", n_train, n_test)
    attempts = _ensure_class_coverage(seed, train_src, height, width) if n_train >= 200 else {}
    counts = {}
    for split in ("train", "test"):
        for domain in ("source", "target"):
            out = root / split / domain
            out.mkdir(parents=True, exist_ok=True)
            ids = scene_ids(split, domain, n_train, n_test)
            for i in ids:
                geom = generate_scene(seed, i, height, width, attempt=attempts.get(i, 0))
                sample = render(geom, domain)
                labelled = not (split == "train" and domain == "target")
                (out / f"{i}.rec").write_bytes(encode_record(sample, with_labels=labelled))
            counts[f"count.{split}.{domain}"] = len(ids)
    entries = {"version": MANIFEST_VERSION, "seed": seed, "height": height, "width": width,
               "num_classes": NUM_CLASSES, "n_train": n_train, "n_test": n_test}
    entries.update(counts)
    entries.update({f"class.{i}": name for i, name in enumerate(CLASS_NAMES)})
    write_manifest(root / "manifest", entries)
    return root


def load_split(data_dir, split: str, domain: str) -> list:
    """Records of one split/domain in scene-id order, validated against the manifest."""
    root = Path(data_dir)
    man = read_manifest(root)
    key = f"count.{split}.{domain}"
    if key not in man:
        raise DataError(f"{root / 'manifest'}: no entry {key}")
    files = sorted((root / split / domain).glob("*.rec"), key=lambda p: int(p.stem))
    if len(files) != int(man[key]):
        raise DataError(f"{root / split / domain}: {len(files)} records but manifest says {man[key]}")
    samples = [decode_record(p.read_bytes(), p) for p in files]
    H, W = int(man["height"]), int(man["width"])
    for p, s in zip(files, samples):
        if s.image.shape != (3, H, W):
            raise DataError(f"{p}: image shape {s.image.shape} disagrees with manifest")
    return samples


def stack(samples, labels: bool = True):
    """Numpy arrays ``(images, depth, classes)``; label arrays are None if not requested."""
    images = np.stack([s.image for s in samples])
    if not labels:
        return images, None, None
    return images, np.stack([s.depth for s in samples]), np.stack([s.classes for s in samples])
