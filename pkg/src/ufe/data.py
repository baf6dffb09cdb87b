"""Synthetic "moving sounding shapes" clips and their on-disk format.

Each clip has T sampled frames, the raw-rate successor of every sampled frame,
a per-frame audio embedding whose first three entries one-hot encode the
sounding shape's class, and masks of the sounding shape.  Training clips keep
only the frame-0 mask; val/test clips keep all T.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ConfigDict
from scipy import ndimage

SHAPE_CLASSES = ("circle", "square", "triangle")
SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


class DatasetFormatError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    size: int = 64
    frames: int = 5
    raw_stride: int = 8
    audio_dim: int = 16
    max_step: float = 2.0
    num_shapes: int = 2
    max_sounding: int = 1
    audio_noise: float = 0.05
    train_clips: int = 200
    val_clips: int = 40
    test_clips: int = 40

    def validate(self) -> None:
        if self.frames < 2:
            raise ConfigError(f"frames must be >= 2, got {self.frames}")
        if self.size not in (32, 64, 128):
            raise ConfigError(f"size must be one of 32, 64, 128, got {self.size}")
        if not 1 <= self.num_shapes <= 3:
            raise ConfigError(f"num_shapes must be in [1, 3], got {self.num_shapes}")
        if not 1 <= self.max_sounding <= min(2, self.num_shapes):
            raise ConfigError(f"max_sounding must be in [1, min(2, num_shapes)], got {self.max_sounding}")
        if self.audio_dim < len(SHAPE_CLASSES):
            raise ConfigError(f"audio_dim must be >= {len(SHAPE_CLASSES)}")
        if self.raw_stride < 1 or self.max_step <= 0:
            raise ConfigError("raw_stride must be >= 1 and max_step > 0")


@dataclass
class SceneSpec:
    shape_class: str
    sounding: bool
    texture_seed: int
    color: list
    # one [cx, cy, radius, angle] per raw frame
    trajectory: list = field(default_factory=list)


@dataclass
class Clip:
    clip_id: str
    split: str
    frames: np.ndarray          # [T,3,H,W] float32 in [0,1]
    neighbor_frames: np.ndarray  # [T,3,H,W]
    audio: np.ndarray           # [T,d]
    masks: np.ndarray           # [len(labeled_indices),H,W] uint8
    labeled_indices: list
    scenes: list = field(default_factory=list)
    raw_stride: int = 8

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def mask(self, t: int) -> np.ndarray:
        try:
            return self.masks[self.labeled_indices.index(t)]
        except ValueError:
            raise KeyError(f"clip {self.clip_id}: frame {t} has no mask") from None

    def pose(self, shape_index: int, t: int, neighbor: bool = False) -> list:
        raw = t * self.raw_stride + (1 if neighbor else 0)
        return self.scenes[shape_index].trajectory[raw]


@dataclass
class Dataset:
    config: DatasetConfig
    clips: dict = field(default_factory=dict)  # split -> list[Clip]
    seed: int = 0

    def split(self, name: str) -> list:
        if name not in self.clips:
            raise KeyError(f"unknown split {name!r}; valid splits: {sorted(self.clips)}")
        return self.clips[name]

    def __len__(self) -> int:
        return sum(len(v) for v in self.clips.values())


# ------------------------------------------------------------ rendering
def value_noise(shape: tuple[int, int], rng: np.random.Generator, octaves=(4, 8, 16)) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, rescaled to [0,1]."""
    h, w = shape
    out = np.zeros(shape)
    amp = 1.0
    for cells in octaves:
        grid = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        out += amp * ndimage.map_coordinates(grid, [yy, xx], order=1)
        amp *= 0.5
    out -= out.min()
    return out / max(out.max(), 1e-12)


def _local_coords(size: int, pose) -> tuple[np.ndarray, np.ndarray]:
    cx, cy, _, ang = pose
    c = np.arange(size) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(ang), np.sin(ang)
    return ca * dx + sa * dy, -sa * dx + ca * dy


def rasterize(shape_class: str, pose, size: int) -> np.ndarray:
    """Binary mask of pixels whose centers fall inside the shape."""
    u, v = _local_coords(size, pose)
    r = pose[2]
    if shape_class == "circle":
        inside = u * u + v * v <= r * r
    elif shape_class == "square":
        inside = (np.abs(u) <= r) & (np.abs(v) <= r)
    elif shape_class == "triangle":
        # equilateral, circumradius r, inradius r/2; outward edge normals at -90, 30, 150 deg
        inside = np.ones_like(u, dtype=bool)
        for deg in (-90.0, 30.0, 150.0):
            t = np.deg2rad(deg)
            inside &= u * np.cos(t) + v * np.sin(t) <= r / 2
    else:
        raise ValueError(f"unknown shape class {shape_class!r}")
    return inside.astype(np.uint8)


def _texture(scene: SceneSpec, pose, size: int) -> np.ndarray:
    """Object-attached texture so the shape's interior moves with it."""
    rng = np.random.default_rng(scene.texture_seed)
    grid = rng.random((12, 12))
    u, v = _local_coords(size, pose)
    return ndimage.map_coordinates(grid, [v / 4 + 6, u / 4 + 6], order=1, mode="wrap")


def render_frame(background: np.ndarray, scenes: list, raw: int, size: int) -> np.ndarray:
    img = background.copy()
    # silent shapes first so the sounding shape is never occluded
    for scene in sorted(scenes, key=lambda s: s.sounding):
        pose = scene.trajectory[raw]
        m = rasterize(scene.shape_class, pose, size).astype(bool)
        tex = _texture(scene, pose, size)
        color = np.asarray(scene.color)[:, None, None]
        shaded = np.clip(color * (0.7 + 0.6 * tex[None]), 0, 1)
        img[:, m] = shaded[:, m]
    return img.astype(np.float32)


def _trajectory(rng, cfg: DatasetConfig, radius: float, sounding: bool) -> Optional[list]:
    s = cfg.size
    steps = (cfg.frames - 1) * cfg.raw_stride
    n_raw = steps + 2
    margin = radius * 1.1 + 1
    lo, hi = margin, s - margin
    if hi <= lo:
        return None
    start = rng.uniform(lo, hi, size=2)
    if sounding:
        # large drift between first and last sampled frame plus a periodic wobble
        dist = rng.uniform(0.3, 0.45) * s
        amp = 1.0
        speed_cap = cfg.max_step - amp * 0.9
        dist = min(dist, speed_cap * steps)
    else:
        dist = rng.uniform(0.0, 0.15) * s
        dist = min(dist, 0.25 * cfg.max_step * steps)
        amp = 0.0
    ang = rng.uniform(0, 2 * np.pi)
    end = start + dist * np.array([np.cos(ang), np.sin(ang)])
    if not (lo <= end[0] <= hi and lo <= end[1] <= hi):
        return None
    t = np.arange(n_raw)
    frac = t / steps
    centers = start[None] + (end - start)[None] * frac[:, None]
    phase = rng.uniform(0, 2 * np.pi)
    wob = amp * np.sin(0.9 * t + phase)
    perp = np.array([-np.sin(ang), np.cos(ang)])
    centers = centers + wob[:, None] * perp[None]
    if np.any(centers < lo) or np.any(centers > hi):
        return None
    step = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    if np.any(step > cfg.max_step):
        return None
    spin = rng.uniform(-0.05, 0.05) if sounding else rng.uniform(-0.01, 0.01)
    angle0 = rng.uniform(0, 2 * np.pi)
    scale = 1.0 + (0.1 * np.sin(0.2 * t + phase) if sounding else 0.0 * t)
    return [[float(centers[i, 0]), float(centers[i, 1]), float(radius * scale[i]),
             float(angle0 + spin * i)] for i in range(n_raw)]


def _separated(scenes: list, cfg: DatasetConfig) -> bool:
    for t in range(cfg.frames):
        raw = t * cfg.raw_stride
        for i in range(len(scenes)):
            for j in range(i + 1, len(scenes)):
                a, b = scenes[i].trajectory[raw], scenes[j].trajectory[raw]
                if np.hypot(a[0] - b[0], a[1] - b[1]) <= a[2] + b[2]:
                    return False
    return True


def _random_color(rng) -> list:
    from colorsys import hsv_to_rgb

    return list(hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.5, 1.0), rng.uniform(0.55, 0.85)))


def _scenes(rng, cfg: DatasetConfig) -> list:
    for _ in range(1000):
        classes = rng.permutation(len(SHAPE_CLASSES))[:cfg.num_shapes]
        n_sounding = 1 if cfg.max_sounding == 1 else int(rng.integers(1, cfg.max_sounding + 1))
        scenes = []
        for i, c in enumerate(classes):
            radius = rng.uniform(0.11, 0.17) * cfg.size
            traj = _trajectory(rng, cfg, radius, sounding=i < n_sounding)
            if traj is None:
                break
            scenes.append(SceneSpec(SHAPE_CLASSES[c], i < n_sounding,
                                    int(rng.integers(2 ** 31)), _random_color(rng), traj))
        else:
            if _separated(scenes, cfg):
                return scenes
    raise RuntimeError("could not place shapes on the canvas; config too crowded")


def encode_audio_class(classes: list, dim: int, rng=None, noise: float = 0.0) -> np.ndarray:
    vec = np.zeros(dim, dtype=np.float64)
    for c in classes:
        vec[SHAPE_CLASSES.index(c)] = 1.0
    if rng is not None and noise > 0:
        vec += rng.normal(0, noise, size=dim)
    return vec.astype(np.float32)


def decode_audio_class(audio: np.ndarray) -> str:
    return SHAPE_CLASSES[int(np.argmax(np.asarray(audio)[:len(SHAPE_CLASSES)]))]


def _clip_seed(seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _SPLIT_CODE[split], index])


def generate_clip(seed, config: DatasetConfig, split: str = "train", clip_id: Optional[str] = None) -> Clip:
    """Deterministic in ``seed`` (an int or a SeedSequence)."""
    config.validate()
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng(seed)
    s = config.size
    scenes = _scenes(rng, config)
    tint = rng.uniform(0.3, 0.7, size=3)
    bg = np.stack([np.clip(0.55 * value_noise((s, s), rng) + tint[c] * 0.45, 0, 1) for c in range(3)])
    frames, neighbors, audio, masks = [], [], [], []
    sounding = [sc.shape_class for sc in scenes if sc.sounding]
    for t in range(config.frames):
        raw = t * config.raw_stride
        frames.append(render_frame(bg, scenes, raw, s))
        neighbors.append(render_frame(bg, scenes, raw + 1, s))
        audio.append(encode_audio_class(sounding, config.audio_dim, rng, config.audio_noise))
        m = np.zeros((s, s), dtype=np.uint8)
        for sc in scenes:
            if sc.sounding:
                m |= rasterize(sc.shape_class, sc.trajectory[raw], s)
        masks.append(m)
    labeled = [0] if split == "train" else list(range(config.frames))
    return Clip(clip_id=clip_id or f"{split}-{rng.integers(1 << 30):08x}", split=split,
                frames=np.stack(frames), neighbor_frames=np.stack(neighbors),
                audio=np.stack(audio), masks=np.stack([masks[i] for i in labeled]),
                labeled_indices=labeled, scenes=scenes, raw_stride=config.raw_stride)


def generate_dataset(config: DatasetConfig, seed: int = 0) -> Dataset:
    config.validate()
    counts = {"train": config.train_clips, "val": config.val_clips, "test": config.test_clips}
    clips = {}
    for split in SPLITS:
        clips[split] = [generate_clip(_clip_seed(seed, split, i), config, split, f"{split}-{i:04d}")
                        for i in range(counts[split])]
    return Dataset(config=config, clips=clips, seed=seed)


# ------------------------------------------------------------- sampling
@dataclass
class Batch:
    ids: list                 # (split-local clip index, frame index)
    images: np.ndarray        # [B,3,H,W]
    neighbors: np.ndarray     # [B,3,H,W]
    audio: np.ndarray         # [B,d]
    masks: Optional[np.ndarray] = None  # [B,H,W] for labeled batches

    def __len__(self) -> int:
        return len(self.ids)


def distant_pool(clips: list, min_index: int = 2) -> list:
    return [(ci, t) for ci, c in enumerate(clips) for t in range(min_index, c.num_frames)]


def _gather(clips: list, ids: list, with_masks: bool, size: int, dim: int) -> Batch:
    if not ids:
        empty = np.zeros((0, 3, size, size), np.float32)
        return Batch([], empty, empty.copy(), np.zeros((0, dim), np.float32),
                     np.zeros((0, size, size), np.uint8) if with_masks else None)
    return Batch(
        ids=list(ids),
        images=np.stack([clips[c].frames[t] for c, t in ids]),
        neighbors=np.stack([clips[c].neighbor_frames[t] for c, t in ids]),
        audio=np.stack([clips[c].audio[t] for c, t in ids]),
        masks=np.stack([clips[c].mask(t) for c, t in ids]) if with_masks else None,
    )


def sample_training_batch(dataset: Dataset, batch_sizes: tuple[int, int], rng: np.random.Generator,
                          labeled_clips: Optional[list] = None) -> tuple[Batch, Batch]:
    """Labeled frame-0 items (with masks) and distant unlabeled items (without)."""
    b_l, b_u = batch_sizes
    clips = dataset.split("train")
    if not clips:
        raise ConfigError("training split is empty")
    if b_l < 1 or b_u < 0:
        raise ConfigError(f"invalid batch sizes {batch_sizes}")
    pool_l = list(range(len(clips))) if labeled_clips is None else list(labeled_clips)
    if not pool_l:
        raise ConfigError("no labeled clips to sample from")
    lab_ids = [(pool_l[i], 0) for i in rng.integers(len(pool_l), size=b_l)]
    unl_ids = []
    if b_u > 0:
        pool_u = distant_pool(clips)
        if not pool_u:
            raise ConfigError("unlabeled batch requested but no distant frames (index >= 2) exist")
        unl_ids = [pool_u[i] for i in rng.integers(len(pool_u), size=b_u)]
    s, d = dataset.config.size, dataset.config.audio_dim
    return _gather(clips, lab_ids, True, s, d), _gather(clips, unl_ids, False, s, d)


# ------------------------------------------------------------ serialization
BLOB_MAGIC = b"UFET"
BLOB_VERSION = 1
_DTYPES = {"f32": "<f4", "u8": "u1"}


def _blob_bytes(arr: np.ndarray, kind: str) -> bytes:
    a = np.ascontiguousarray(arr, dtype=_DTYPES[kind])
    head = BLOB_MAGIC + struct.pack("<II", BLOB_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _parse_blob(raw: bytes, kind: str, path) -> np.ndarray:
    if len(raw) < 12 or raw[:4] != BLOB_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic (expected UFET)")
    version, rank = struct.unpack("<II", raw[4:12])
    if version != BLOB_VERSION:
        raise DatasetFormatError(f"{path}: unsupported blob version {version}")
    if len(raw) < 12 + 4 * rank:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", raw[12:12 + 4 * rank])
    dt = np.dtype(_DTYPES[kind])
    need = int(np.prod(dims)) * dt.itemsize
    body = raw[12 + 4 * rank:]
    if len(body) != need:
        raise DatasetFormatError(f"{path}: truncated tensor ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=dt).reshape(dims).copy()


_BLOBS = (("frames", "f32"), ("neighbor_frames", "f32"), ("audio", "f32"), ("masks", "u8"))


def write_dataset(dataset: Dataset, path) -> dict:
    """Directory with manifest.json and clips/<id>/<tensor>.bin; returns the manifest."""
    root = Path(path)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for split in SPLITS:
        for clip in dataset.clips.get(split, []):
            cdir = root / "clips" / clip.clip_id
            cdir.mkdir(exist_ok=True)
            files = {}
            for name, kind in _BLOBS:
                arr = getattr(clip, name)
                blob = _blob_bytes(arr, kind)
                (cdir / f"{name}.bin").write_bytes(blob)
                files[name] = {"dtype": kind, "shape": list(arr.shape),
                               "sha256": hashlib.sha256(blob).hexdigest()}
            entries.append({"clip_id": clip.clip_id, "split": split,
                            "labeled_indices": clip.labeled_indices,
                            "raw_stride": clip.raw_stride,
                            "scenes": [asdict(s) for s in clip.scenes], "files": files})
    manifest = {"format": "ufe-dataset", "version": BLOB_VERSION, "seed": dataset.seed,
                "config": asdict(dataset.config),
                "counts": {s: len(dataset.clips.get(s, [])) for s in SPLITS},
                "clips": entries}
    blob = json.dumps(manifest, sort_keys=True, indent=1).encode()
    manifest["checksum"] = hashlib.sha256(blob).hexdigest()
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def read_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{root}: no manifest.json") from None
    except ValueError as e:
        raise DatasetFormatError(f"{mpath}: corrupt manifest: {e}") from None
    if manifest.get("format") != "ufe-dataset":
        raise DatasetFormatError(f"{mpath}: not a ufe dataset manifest")
    cfg = DatasetConfig(**manifest["config"])
    clips = {s: [] for s in SPLITS}
    on_disk = {p.name for p in (root / "clips").iterdir() if p.is_dir()} if (root / "clips").exists() else set()
    if len(on_disk) != len(manifest["clips"]):
        raise DatasetFormatError(f"{root}: manifest lists {len(manifest['clips'])} clips, "
                                 f"directory holds {len(on_disk)}")
    for e in manifest["clips"]:
        arrays = {}
        for name, meta in e["files"].items():
            fpath = root / "clips" / e["clip_id"] / f"{name}.bin"
            try:
                raw = fpath.read_bytes()
            except FileNotFoundError:
                raise DatasetFormatError(f"{fpath}: missing tensor file") from None
            if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
                raise DatasetFormatError(f"{fpath}: checksum mismatch")
            arr = _parse_blob(raw, meta["dtype"], fpath)
            if list(arr.shape) != meta["shape"]:
                raise DatasetFormatError(f"{fpath}: shape {arr.shape} != manifest {meta['shape']}")
            arrays[name] = arr
        scenes = [SceneSpec(**s) for s in e["scenes"]]
        clips[e["split"]].append(Clip(clip_id=e["clip_id"], split=e["split"],
                                      labeled_indices=list(e["labeled_indices"]),
                                      scenes=scenes, raw_stride=e["raw_stride"], **arrays))
    return Dataset(config=cfg, clips=clips, seed=manifest.get("seed", 0))
