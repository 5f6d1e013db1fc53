"""Deterministic synthetic corpus: moving shapes with transient distractors.

Each video has one primary object that persists across (nearly) all frames
and zero or more look-alike distractors that exist only inside a lifetime
window. Ground-truth masks mark the primary object only, so a segmenter
must use cross-frame consistency, not per-frame saliency, to reach high
region similarity. A companion static set provides single-image scenes for
the saliency pre-training phase.

On-disk layout under a corpus root:

    <seq>/frames/NNNNN.ppm      binary P6 frames
    <seq>/masks/NNNNN.pgm       binary P5 masks, values {0, 255}
    static/images/NNNNN.ppm     static scenes
    static/masks/NNNNN.pgm
    index.json                  splits, per-sequence frame counts

index.json schema (format "coattseg-corpus-v1"):
    frame_size: [H, W]
    splits: {"train": [names...], "test": [names...]}
    sequences: {name: {"t": int, "split": "train"|"test"}}
    static: {"count": int}
"""

from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

SHAPE_KINDS = ("circle", "square", "triangle")

CORPUS_FORMAT = "coattseg-corpus-v1"

_PALETTE = (
    (0.90, 0.20, 0.15),
    (0.15, 0.55, 0.90),
    (0.20, 0.80, 0.30),
    (0.95, 0.75, 0.10),
    (0.75, 0.25, 0.85),
    (0.10, 0.80, 0.80),
    (0.95, 0.45, 0.10),
    (0.55, 0.35, 0.20),
)


@dataclass
class MovingShape:
    kind: str
    color: tuple
    size: float
    start: tuple  # (row, col) at t = 0
    velocity: tuple  # (rows, cols) per frame


@dataclass
class DistractorSpec:
    shape: MovingShape
    color_similarity: float  # 0 = own color, 1 = identical to the primary
    lifetime: tuple  # [start, end) in frame units, subset of [0, T)


@dataclass
class SceneSpec:
    t_frames: int
    primary: MovingShape
    frame_size: tuple = (96, 96)
    presence_rate: float = 1.0
    distractors: list = field(default_factory=list)
    noise_sigma: float = 0.02
    background: tuple = (0.10, 0.10, 0.12)
    seed: int = 0

    def validate(self) -> None:
        if self.t_frames < 2:
            raise UsageError(f"a video needs at least 2 frames, got {self.t_frames}")
        if not 0.0 < self.presence_rate <= 1.0:
            raise UsageError(f"presence_rate must be in (0, 1], got {self.presence_rate}")
        if self.primary.kind not in SHAPE_KINDS:
            raise UsageError(f"unknown shape kind {self.primary.kind!r}")
        primary_count = max(1, round(self.presence_rate * self.t_frames))
        for d in self.distractors:
            lo, hi = d.lifetime
            if not (0 <= lo < hi <= self.t_frames):
                raise UsageError(f"distractor lifetime {d.lifetime} not inside [0, {self.t_frames})")
            if not 0.0 <= d.color_similarity <= 1.0:
                raise UsageError(f"color similarity must be in [0, 1], got {d.color_similarity}")
            if d.shape.kind not in SHAPE_KINDS:
                raise UsageError(f"unknown shape kind {d.shape.kind!r}")
            if self.presence_rate < (hi - lo) / self.t_frames:
                raise UsageError(
                    "primary presence_rate must be at least every distractor's lifetime fraction"
                )
            if primary_count <= len(_lifetime_frames(d.lifetime)):
                raise UsageError(
                    "primary object must appear in strictly more frames than any distractor"
                )


def _lifetime_frames(lifetime: tuple) -> range:
    lo, hi = lifetime
    return range(math.ceil(lo), math.floor(hi))


def _reflect(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return (lo + hi) / 2.0
    period = 2.0 * (hi - lo)
    m = (value - lo) % period
    return lo + (m if m <= hi - lo else period - m)


def _position(shape: MovingShape, t: int, frame_size: tuple) -> tuple:
    h, w = frame_size
    margin = shape.size + 1.0
    row = _reflect(shape.start[0] + shape.velocity[0] * t, margin, h - 1 - margin)
    col = _reflect(shape.start[1] + shape.velocity[1] * t, margin, w - 1 - margin)
    return row, col


def _coverage(kind: str, center: tuple, size: float, frame_size: tuple) -> np.ndarray:
    h, w = frame_size
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    cy, cx = center
    if kind == "circle":
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= size**2
    if kind == "square":
        return np.maximum(np.abs(rows - cy), np.abs(cols - cx)) <= size
    # upward triangle: apex at (cy - size, cx), base at cy + size
    u = (rows - (cy - size)) / (2.0 * size)
    return (u >= 0) & (u <= 1) & (np.abs(cols - cx) <= u * size)


def _paint(image: np.ndarray, cover: np.ndarray, color: tuple) -> None:
    image[cover] = np.asarray(color, dtype=np.float64)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_video(spec: SceneSpec) -> tuple[list, list]:
    """Rasterize a scene; returns (frames u8 HxWx3, masks u8 HxW of {0,255})."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    t_total = spec.t_frames
    count = max(1, round(spec.presence_rate * t_total))
    if count >= t_total:
        present = set(range(t_total))
    else:
        present = set(rng.choice(t_total, size=count, replace=False).tolist())
    frames, masks = [], []
    for t in range(t_total):
        image = np.empty((*spec.frame_size, 3), dtype=np.float64)
        image[:] = np.asarray(spec.background)
        for d in spec.distractors:
            if t in _lifetime_frames(d.lifetime):
                color = tuple(
                    d.color_similarity * p + (1.0 - d.color_similarity) * c
                    for p, c in zip(spec.primary.color, d.shape.color)
                )
                _paint(image, _coverage(d.shape.kind, _position(d.shape, t, spec.frame_size), d.shape.size, spec.frame_size), color)
        mask = np.zeros(spec.frame_size, dtype=bool)
        if t in present:
            cover = _coverage(
                spec.primary.kind, _position(spec.primary, t, spec.frame_size), spec.primary.size, spec.frame_size
            )
            _paint(image, cover, spec.primary.color)
            mask = cover
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        frames.append(_quantize(image))
        masks.append(mask.astype(np.uint8) * 255)
    return frames, masks


def generate_video(spec: SceneSpec, seq_dir) -> int:
    """Write one sequence to ``seq_dir`` (frames/, masks/); returns T."""
    frames, masks = render_video(spec)
    seq_dir = Path(seq_dir)
    for t, (frame, mask) in enumerate(zip(frames, masks)):
        write_ppm(seq_dir / "frames" / f"{t:05d}.ppm", frame)
        write_pgm(seq_dir / "masks" / f"{t:05d}.pgm", mask)
    return len(frames)


def generate_static_set(n: int, seed: int, out_dir) -> int:
    """Write ``n`` single-shape scenes with saliency-style masks."""
    if n < 0:
        raise UsageError(f"static set size must be nonnegative, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    size_hw = (96, 96)
    for i in range(n):
        kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        color = _PALETTE[rng.integers(len(_PALETTE))]
        # target foreground fraction well inside [0.02, 0.4]
        frac = rng.uniform(0.04, 0.30)
        if kind == "circle":
            size = math.sqrt(frac * size_hw[0] * size_hw[1] / math.pi)
        elif kind == "square":
            size = math.sqrt(frac * size_hw[0] * size_hw[1]) / 2.0
        else:
            size = math.sqrt(frac * size_hw[0] * size_hw[1] / 2.0)
        center = (
            rng.uniform(size + 2, size_hw[0] - 2 - size),
            rng.uniform(size + 2, size_hw[1] - 2 - size),
        )
        image = np.empty((*size_hw, 3), dtype=np.float64)
        image[:] = (0.10 + rng.uniform(-0.02, 0.02), 0.10 + rng.uniform(-0.02, 0.02), 0.12)
        cover = _coverage(kind, center, size, size_hw)
        _paint(image, cover, color)
        image = image + rng.normal(0.0, 0.02, size=image.shape)
        write_ppm(out_dir / "images" / f"{i:05d}.ppm", _quantize(image))
        write_pgm(out_dir / "masks" / f"{i:05d}.pgm", cover.astype(np.uint8) * 255)
    return n


# ---------------------------------------------------------------------------
# corpus assembly
# ---------------------------------------------------------------------------

def _random_shape(rng: np.random.Generator, frame_size: tuple, color: tuple, size_range) -> MovingShape:
    size = rng.uniform(*size_range)
    h, w = frame_size
    start = (rng.uniform(size + 2, h - 2 - size), rng.uniform(size + 2, w - 2 - size))
    speed = rng.uniform(1.5, 3.0)
    angle = rng.uniform(0, 2 * math.pi)
    return MovingShape(
        kind=SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))],
        color=color,
        size=size,
        start=start,
        velocity=(speed * math.sin(angle), speed * math.cos(angle)),
    )


def random_scene_spec(
    rng: np.random.Generator,
    t_frames: int = 24,
    frame_size: tuple = (96, 96),
    n_distractors: int = 2,
    primary_size_range: tuple = (13.0, 18.0),
    distractor_size_range: tuple = (11.0, 16.0),
    similarity_range: tuple = (0.75, 0.95),
    lifetime_fraction_range: tuple = (0.25, 0.45),
    noise_sigma: float = 0.02,
) -> SceneSpec:
    """Draw one scene: a persistent primary plus transient look-alikes."""
    palette = list(_PALETTE)
    primary_color = palette.pop(rng.integers(len(palette)))
    primary = _random_shape(rng, frame_size, primary_color, primary_size_range)
    distractors = []
    for _ in range(n_distractors):
        base_color = palette[rng.integers(len(palette))]
        length = rng.uniform(*lifetime_fraction_range) * t_frames
        lo = rng.uniform(0.0, t_frames - length)
        distractors.append(
            DistractorSpec(
                shape=_random_shape(rng, frame_size, base_color, distractor_size_range),
                color_similarity=float(rng.uniform(*similarity_range)),
                lifetime=(lo, lo + length),
            )
        )
    background = (
        0.10 + rng.uniform(-0.02, 0.02),
        0.10 + rng.uniform(-0.02, 0.02),
        0.12 + rng.uniform(-0.02, 0.02),
    )
    return SceneSpec(
        t_frames=t_frames,
        primary=primary,
        frame_size=frame_size,
        distractors=distractors,
        noise_sigma=noise_sigma,
        background=background,
        seed=int(rng.integers(2**31)),
    )


def build_corpus(
    root,
    seed: int = 7,
    n_train: int = 5,
    n_test: int = 3,
    t_frames: int = 24,
    frame_size: tuple = (96, 96),
    n_static: int = 48,
    n_distractors: int = 2,
    noise_sigma: float = 0.02,
    primary_size_range: tuple = (13.0, 18.0),
    similarity_range: tuple = (0.75, 0.95),
) -> dict:
    """Generate the full corpus (videos, static set, index.json) under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    splits = {"train": [], "test": []}
    sequences = {}
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            name = f"{split}_{i:03d}"
            spec = random_scene_spec(
                rng,
                t_frames=t_frames,
                frame_size=frame_size,
                n_distractors=n_distractors,
                noise_sigma=noise_sigma,
                primary_size_range=primary_size_range,
                similarity_range=similarity_range,
            )
            t = generate_video(spec, root / name)
            splits[split].append(name)
            sequences[name] = {"t": t, "split": split}
    generate_static_set(n_static, seed=seed + 1, out_dir=root / "static")
    index = {
        "format": CORPUS_FORMAT,
        "frame_size": list(frame_size),
        "splits": splits,
        "sequences": sequences,
        "static": {"count": n_static},
    }
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return index


# ---------------------------------------------------------------------------
# corpus loading
# ---------------------------------------------------------------------------

@dataclass
class VideoSequence:
    name: str
    split: str
    frame_paths: list
    mask_paths: list

    def __len__(self) -> int:
        return len(self.frame_paths)

    def load_frames(self) -> list:
        return [load_frame(p) for p in self.frame_paths]

    def load_masks(self) -> list:
        return [load_mask(p) for p in self.mask_paths]


def load_frame(path) -> np.ndarray:
    """An (H, W, 3) float64 image in [0, 1]."""
    return read_ppm(path).astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    """An (H, W) float64 mask of {0, 1}; refuses non-bilevel files."""
    raw = read_pgm(path)
    if not np.all((raw == 0) | (raw == 255)):
        raise DataError(f"{path}: mask is not bilevel {{0, 255}}")
    return (raw == 255).astype(np.float64)


class Corpus:
    """Reader over a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / "index.json"
        if not index_path.exists():
            raise DataError(f"no corpus index at {index_path}")
        self.index = json.loads(index_path.read_text())
        if self.index.get("format") != CORPUS_FORMAT:
            raise DataError(f"unrecognized corpus format in {index_path}")

    def sequence(self, name: str) -> VideoSequence:
        meta = self.index["sequences"].get(name)
        if meta is None:
            raise DataError(f"sequence {name!r} not in corpus index")
        t = meta["t"]
        frames = [self.root / name / "frames" / f"{i:05d}.ppm" for i in range(t)]
        masks = [self.root / name / "masks" / f"{i:05d}.pgm" for i in range(t)]
        for p in (*frames, *masks):
            if not p.exists():
                raise DataError(f"missing corpus file {p}")
        return VideoSequence(name=name, split=meta["split"], frame_paths=frames, mask_paths=masks)

    def sequences(self, split: str) -> list:
        return [self.sequence(name) for name in self.index["splits"][split]]

    def static_pairs(self) -> list:
        count = self.index.get("static", {}).get("count", 0)
        pairs = []
        for i in range(count):
            img = self.root / "static" / "images" / f"{i:05d}.ppm"
            mask = self.root / "static" / "masks" / f"{i:05d}.pgm"
            if not img.exists() or not mask.exists():
                raise DataError(f"missing static file {img if not img.exists() else mask}")
            pairs.append((img, mask))
        return pairs
