"""Synthetic vision tasks, the prompt database, pixel retrieval and prompt substitution.

Scenes are built on the patch grid: every shape is rasterized at one cell per
patch, so a P x P patch is always a single surface (textured background or a
flat object color). Each scene has a target object whose color is the class
color, a distractor object of another class color, and a background tint that
depends on the class. All pixel values are multiples of 1/255 so that images
round-trip through 8-bit files exactly.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, CapacityError, ModeError
from .tensor import atomic_write


class TaskKind(str, enum.Enum):
    SEGMENTATION = "seg"
    DETECTION = "det"
    COLORIZATION = "color"

    @classmethod
    def parse(cls, value: str) -> "TaskKind":
        aliases = {"segmentation": "seg", "detection": "det", "colorization": "color"}
        return cls(aliases.get(value, value))


# Saturated object colors, one per class, and a matching dull background tint.
OBJECT_COLORS = np.array(
    [[220, 40, 40], [40, 170, 60], [50, 80, 220], [230, 200, 30], [170, 60, 200],
     [30, 200, 200], [240, 130, 20], [120, 120, 120]], dtype=np.int64)
BACKGROUND_TINTS = np.array(
    [[110, 70, 70], [70, 100, 70], [70, 80, 120], [115, 110, 60], [100, 70, 110],
     [60, 105, 105], [120, 90, 60], [80, 80, 80]], dtype=np.int64)
TEXTURE_AMPLITUDE = 14


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.SEGMENTATION
    num_classes: int = 5
    image_size: int = 32
    patch_size: int = 4
    n_train: int = 512
    n_test: int = 128
    radius_range: tuple[float, float] = (1.3, 2.8)
    class_tint: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind.parse(self.kind))
        object.__setattr__(self, "radius_range", tuple(self.radius_range))
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError("split sizes must be positive")
        if not 2 <= self.num_classes <= len(OBJECT_COLORS):
            raise ConfigError(f"num_classes must be in [2, {len(OBJECT_COLORS)}]")
        if self.image_size % self.patch_size:
            raise ConfigError("image size must be divisible by the patch size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["radius_range"] = list(self.radius_range)
        return d


@dataclass
class PromptPair:
    image: np.ndarray
    label: np.ndarray
    id: str
    class_tag: int

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ")


def to_float(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def luminance_u8(rgb: np.ndarray) -> np.ndarray:
    """8-bit ITU-R 601 grayscale with integer rounding; input and output uint8."""
    rgb = rgb.astype(np.int64)
    return ((rgb[..., 0] * 299 + rgb[..., 1] * 587 + rgb[..., 2] * 114 + 500) // 1000).astype(np.uint8)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Grayscale of a float image in [0,1], replicated over 3 channels."""
    gray = to_float(luminance_u8(to_uint8(rgb)))
    return np.repeat(gray[..., None], 3, axis=-1)


# ---------------------------------------------------------------- scene rendering


def _ellipse_cells(rng, g, rmin, rmax):
    cx, cy = rng.uniform(1.0, g - 2.0, size=2)
    rx, ry = rng.uniform(rmin, rmax, size=2)
    xs, ys = np.meshgrid(np.arange(g) + 0.5, np.arange(g) + 0.5, indexing="ij")
    return ((xs - cx - 0.5) / rx) ** 2 + ((ys - cy - 0.5) / ry) ** 2 <= 1.0


def _polygon_cells(rng, g, rmin, rmax):
    cx, cy = rng.uniform(1.5, g - 1.5, size=2)
    k = int(rng.integers(3, 6))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = rng.uniform(rmin, rmax + 0.5, size=k)
    px, py = cx + radii * np.cos(angles), cy + radii * np.sin(angles)
    xs, ys = np.meshgrid(np.arange(g) + 0.5, np.arange(g) + 0.5, indexing="ij")
    inside = np.zeros((g, g), dtype=bool)
    # even-odd ray casting
    for i in range(k):
        x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % k], py[(i + 1) % k]
        crosses = (y0 > ys) != (y1 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < xcross)
    return inside


def _shape_cells(rng, g, radius_range, min_cells=2):
    for _ in range(100):
        draw = _ellipse_cells if rng.random() < 0.5 else _polygon_cells
        cells = draw(rng, g, *radius_range)
        if min_cells <= cells.sum() <= g * g // 2:
            return cells
    raise RuntimeError("could not draw a shape of acceptable size")


def _texture(patch: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(patch), np.arange(patch), indexing="ij")
    return np.where((i + j) % 2 == 0, TEXTURE_AMPLITUDE, -TEXTURE_AMPLITUDE)


def render_scene(rng: np.random.Generator, spec: TaskSpec, cls: int, tint: int | None = None):
    """Return (scene uint8 HxWx3, target cell mask GxG bool)."""
    g, p = spec.grid, spec.patch_size
    tint = cls if tint is None else tint
    distractor = int(rng.choice([c for c in range(spec.num_classes) if c != cls]))
    d_cells = _shape_cells(rng, g, spec.radius_range)
    t_cells = _shape_cells(rng, g, spec.radius_range)

    cell_rgb = np.broadcast_to(BACKGROUND_TINTS[tint], (g, g, 3)).copy()
    cell_rgb[d_cells] = OBJECT_COLORS[distractor]
    cell_rgb[t_cells] = OBJECT_COLORS[cls]
    textured = ~(d_cells | t_cells)

    img = np.repeat(np.repeat(cell_rgb, p, axis=0), p, axis=1)
    tex = np.tile(_texture(p), (g, g))[..., None] * np.repeat(np.repeat(textured, p, 0), p, 1)[..., None]
    return np.clip(img + tex, 0, 255).astype(np.uint8), t_cells


def _cells_to_pixels(cells: np.ndarray, p: int) -> np.ndarray:
    return np.repeat(np.repeat(cells, p, axis=0), p, axis=1)


def bounding_box(mask: np.ndarray) -> np.ndarray:
    """Filled tight axis-aligned bounding box of a boolean mask."""
    out = np.zeros_like(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size:
        out[rows.min(): rows.max() + 1, cols.min(): cols.max() + 1] = True
    return out


def make_pair(rng, spec: TaskSpec, cls: int, pair_id: str, tint: int | None = None) -> PromptPair:
    scene, cells = render_scene(rng, spec, cls, tint)
    mask = _cells_to_pixels(cells, spec.patch_size)
    if spec.kind is TaskKind.SEGMENTATION:
        image, label = scene, np.repeat(mask[..., None] * 255, 3, axis=-1).astype(np.uint8)
    elif spec.kind is TaskKind.DETECTION:
        box = bounding_box(mask)
        image, label = scene, np.repeat(box[..., None] * 255, 3, axis=-1).astype(np.uint8)
    else:
        gray = luminance_u8(scene)
        image, label = np.repeat(gray[..., None], 3, axis=-1), scene
    return PromptPair(to_float(image), to_float(label), pair_id, cls)


# ---------------------------------------------------------------- database / retrieval


class PromptDatabase:
    def __init__(self, pairs: Sequence[PromptPair]):
        ids = [p.id for p in pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("prompt ids must be unique")
        self.pairs = list(pairs)
        self._by_id = {p.id: i for i, p in enumerate(self.pairs)}
        flat = np.stack([p.image.reshape(-1) for p in self.pairs]).astype(np.float64) if pairs else np.zeros((0, 1))
        self.retrieval_index = flat
        self._norms = np.linalg.norm(flat, axis=1) if pairs else np.zeros(0)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> PromptPair:
        return self.pairs[i]

    def index_of(self, pair_id: str) -> int:
        return self._by_id[pair_id]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def similarities(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        denom = np.maximum(self._norms, 1e-12) * max(float(np.linalg.norm(q)), 1e-12)
        return self.retrieval_index @ q / denom


def retrieve_topN(query: np.ndarray, db: PromptDatabase, n: int, exclude: Sequence[str] = ()) -> list[PromptPair]:
    """Top-n pairs by pixel cosine similarity, ties broken by ascending id."""
    excluded = {db.index_of(e) for e in exclude if e in db._by_id}
    available = len(db) - len(excluded)
    if n <= 0:
        raise ConfigError("n must be positive")
    if n > available:
        raise CapacityError(f"requested {n} prompts from a database of {available}")
    return [db[i] for i in rank(query, db, excluded)[:n]]


def rank(query: np.ndarray, db: PromptDatabase, excluded: set[int] | None = None) -> list[int]:
    sims = db.similarities(query)
    ids = np.array(db.ids)
    order = np.lexsort((ids, -sims))
    return [int(i) for i in order if not excluded or int(i) not in excluded]


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    p_q: float = 0.3
    p_r: float = 0.15
    seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if not (0 <= self.p_q <= 1 and 0 <= self.p_r <= 1 and self.p_q + self.p_r <= 1):
            raise ConfigError(f"invalid substitution probabilities p_q={self.p_q}, p_r={self.p_r}")


def augment(prompts: Sequence[PromptPair], query_pair: PromptPair, db: PromptDatabase,
            cfg: AugmentConfig, key: int = 0, mode: str = "train") -> list[PromptPair]:
    """Substitute each slot with the query pair (p_q) or a random database pair (p_r).

    ``key`` identifies the training example; slot draws are seeded by
    ``(cfg.seed, key, slot)`` so results do not depend on call order.
    """
    if mode != "train":
        raise ModeError("prompt substitution is a training-time operation")
    if not cfg.enabled:
        return list(prompts)
    out = []
    for slot, pair in enumerate(prompts):
        rng = np.random.default_rng((cfg.seed, key, slot))
        u = rng.random()
        if u < cfg.p_q:
            out.append(query_pair)
        elif u < cfg.p_q + cfg.p_r and len(db) > 1:
            j = int(rng.integers(len(db) - 1))
            incumbent = db._by_id.get(pair.id)
            if incumbent is not None and j >= incumbent:
                j += 1
            out.append(db[j])
        else:
            out.append(pair)
    return out


# ---------------------------------------------------------------- generation / disk


@dataclass
class Dataset:
    spec: TaskSpec
    train: PromptDatabase
    test: list[PromptPair] = field(default_factory=list)


def generate_dataset(spec: TaskSpec) -> tuple[PromptDatabase, list[PromptPair]]:
    rng = np.random.default_rng(spec.seed)
    classes = lambda n: rng.integers(spec.num_classes, size=n)  # noqa: E731
    train_cls, test_cls = classes(spec.n_train), classes(spec.n_test)
    train = [make_pair(rng, spec, int(c), f"tr{i:05d}", None if spec.class_tint else int(rng.integers(spec.num_classes)))
             for i, c in enumerate(train_cls)]
    test = [make_pair(rng, spec, int(c), f"te{i:05d}", None if spec.class_tint else int(rng.integers(spec.num_classes)))
            for i, c in enumerate(test_cls)]
    return PromptDatabase(train), test


def pretraining_pairs(spec: TaskSpec, n: int, seed: int) -> list[tuple[PromptPair, PromptPair]]:
    """(prompt, query) pairs sharing a class but with independently drawn tints.

    Decoupling tint from class keeps the class recoverable only from the prompt,
    so a backbone trained on these must read its in-context example.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        cls = int(rng.integers(spec.num_classes))
        a = make_pair(rng, spec, cls, f"pa{i:05d}", int(rng.integers(spec.num_classes)))
        b = make_pair(rng, spec, cls, f"pb{i:05d}", int(rng.integers(spec.num_classes)))
        out.append((a, b))
    return out


def write_image(path: Path, img: np.ndarray) -> None:
    path = Path(path)
    u8 = to_uint8(img)
    if path.suffix == ".ppm":
        h, w, _ = u8.shape
        atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + u8.tobytes())
        return
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB"), dtype=np.uint8))


def _save_split(root: Path, pairs: Sequence[PromptPair], spec: TaskSpec, ext: str) -> None:
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_image(root / "pairs" / f"{p.id}_img{ext}", p.image)
        write_image(root / "pairs" / f"{p.id}_lbl{ext}", p.label)
    manifest = {"ids": [p.id for p in pairs], "class_tags": [int(p.class_tag) for p in pairs],
                "seed": spec.seed, "spec": spec.to_dict(), "format": ext.lstrip(".")}
    atomic_write(root / "manifest.json", json.dumps(manifest, indent=2).encode("utf-8"))


def save_dataset(out_dir, spec: TaskSpec, train: PromptDatabase, test: Sequence[PromptPair], ext: str = ".png") -> None:
    out_dir = Path(out_dir)
    _save_split(out_dir / "train", train.pairs, spec, ext)
    _save_split(out_dir / "test", list(test), spec, ext)


def _load_split(root: Path) -> tuple[list[PromptPair], TaskSpec]:
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    ext = "." + manifest.get("format", "png")
    pairs = [PromptPair(read_image(root / "pairs" / f"{i}_img{ext}"), read_image(root / "pairs" / f"{i}_lbl{ext}"), i, int(c))
             for i, c in zip(manifest["ids"], manifest["class_tags"])]
    return pairs, TaskSpec(**manifest["spec"])


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    if not (data_dir / "train" / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest under {data_dir}")
    train, spec = _load_split(data_dir / "train")
    test, _ = _load_split(data_dir / "test")
    return Dataset(spec, PromptDatabase(train), test)
