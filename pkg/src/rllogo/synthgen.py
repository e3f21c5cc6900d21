"""Deterministic synthetic logo scenes.

Each class is a glyph bitmap painted in a saturated color. Colors are shared
by pairs of classes (a filled glyph and a hollow one) so that recognizing a
small logo requires looking at its shape, not just its color. Logos are
composited at a random scale, position and quarter-turn rotation over smooth
value noise with a few muted distractor shapes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .locenv import BBox
from .ppm import read_ppm, write_ppm

GLYPH_SIDE = 16
CANVAS = 64
SCALE_RANGE = (0.15, 0.9)

PALETTE = [
    ("red", (220, 40, 40)),
    ("green", (40, 180, 60)),
    ("blue", (40, 80, 225)),
    ("yellow", (235, 205, 30)),
    ("magenta", (205, 45, 200)),
    ("cyan", (30, 195, 205)),
    ("orange", (245, 130, 20)),
    ("violet", (125, 60, 210)),
]
FAMILIES = ["disk", "ring", "cross", "xmark", "checker", "hstripes", "vstripes", "triangle"]


class PlacementError(ValueError):
    """The requested placement would clip the logo."""


@dataclass(frozen=True)
class LogoTemplate:
    class_id: int
    glyph: np.ndarray = field(repr=False, compare=False)
    color: tuple
    pattern_id: int
    name: str

    def __eq__(self, other):
        return (isinstance(other, LogoTemplate) and self.class_id == other.class_id
                and self.color == other.color and self.pattern_id == other.pattern_id
                and np.array_equal(self.glyph, other.glyph))

    def __hash__(self):
        return hash((self.class_id, self.color, self.pattern_id, self.glyph.tobytes()))


def _glyph(family: str, rng: np.random.Generator, side: int = GLYPH_SIDE) -> np.ndarray:
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0  # cell centers in (-1, 1)
    x, y = np.meshgrid(c, c)
    if family in ("disk", "ring"):
        p = rng.uniform(2.0, 4.0)
        r = np.abs(x) ** p + np.abs(y) ** p
        mask = r <= 1.0
        if family == "ring":
            inner = rng.uniform(0.55, 0.7) ** p
            mask &= r > inner
    elif family == "cross":
        t = rng.uniform(0.25, 0.4)
        mask = (np.abs(x) <= t) | (np.abs(y) <= t)
    elif family == "xmark":
        t = rng.uniform(0.2, 0.35)
        mask = (np.abs(x - y) <= t) | (np.abs(x + y) <= t)
    elif family == "checker":
        n = int(rng.choice([2, 4]))
        i = ((x + 1) / 2 * n).astype(int)
        j = ((y + 1) / 2 * n).astype(int)
        mask = (i + j) % 2 == 0
        if n == 2:
            mask |= np.abs(x) + np.abs(y) < 0.3  # keep a connected center
    elif family in ("hstripes", "vstripes"):
        n = int(rng.choice([3, 5]))
        coord = y if family == "hstripes" else x
        mask = ((coord + 1) / 2 * n).astype(int) % 2 == 0
    elif family == "triangle":
        mask = np.abs(x) <= (y + 1) / 2 + 1.0 / side
    else:
        raise ValueError(f"unknown glyph family {family!r}")
    mask = mask.astype(bool)
    # glyphs span their whole bitmap so a logo's tight box equals its placement square
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    assert rows[0] == 0 and rows[-1] == side - 1 and cols[0] == 0 and cols[-1] == side - 1
    return mask


def make_templates(num_classes: int, seed: int) -> list[LogoTemplate]:
    """One template per class; classes ``2k`` and ``2k+1`` share a color."""
    if not 2 <= num_classes <= 64:
        raise ValueError("num_classes must lie in [2, 64]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E3]))
    per_color = 2 if num_classes <= 16 else math.ceil(num_classes / len(PALETTE))
    colors = [PALETTE[i] for i in rng.permutation(len(PALETTE))]
    extra = [FAMILIES[2 + i] for i in rng.permutation(len(FAMILIES) - 2)]
    families = FAMILIES[:2] + extra
    templates = []
    for cid in range(num_classes):
        cname, rgb = colors[cid // per_color]
        fam = families[cid % per_color]
        templates.append(LogoTemplate(cid, _glyph(fam, rng), rgb, FAMILIES.index(fam),
                                      f"{cname}_{fam}"))
    return templates


@dataclass(frozen=True)
class Placement:
    scale: float
    rotation: int  # degrees, multiple of 90
    center: tuple  # normalized (cx, cy)


@dataclass(frozen=True)
class BackgroundParams:
    canvas: int = CANVAS
    min_distractors: int = 1
    max_distractors: int = 3


@dataclass
class Scene:
    image: np.ndarray = field(repr=False)
    class_id: int
    gt_box: BBox
    placement: Placement
    seed: int


def rotate_90k(image: np.ndarray, k: int) -> np.ndarray:
    """Exact counter-clockwise rotation by ``k`` quarter turns."""
    if image.shape[0] != image.shape[1]:
        raise ValueError("rotate_90k needs a square image")
    return np.ascontiguousarray(np.rot90(image, k % 4, axes=(0, 1)))


def rotate_box_90k(box: BBox, k: int) -> BBox:
    """Box transform matching :func:`rotate_90k`."""
    x1, y1, x2, y2 = box.as_tuple()
    for _ in range(k % 4):
        x1, y1, x2, y2 = y1, 1.0 - x2, y2, 1.0 - x1
    return BBox(x1, y1, x2, y2)


def _value_noise(rng, side, cells):
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    t = np.arange(side) / side * cells
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    top = grid[i][:, i] * (1 - f)[None, :] + grid[i][:, i + 1] * f[None, :]
    bot = grid[i + 1][:, i] * (1 - f)[None, :] + grid[i + 1][:, i + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _muted_color(rng):
    level = rng.uniform(70, 190)
    return np.clip(level + rng.uniform(-22, 22, size=3), 0, 255)


def _upscale(mask: np.ndarray, side: int) -> np.ndarray:
    idx = ((np.arange(side) + 0.5) * mask.shape[0] / side).astype(int)
    return mask[idx][:, idx]


def _matches_template(mask, templates):
    h, w = mask.shape
    if h != w:
        return False
    for t in templates:
        g = _upscale(t.glyph, h)
        if any(np.array_equal(mask, np.rot90(g, k)) for k in range(4)):
            return True
    return False


def _background(rng, params: BackgroundParams, templates) -> np.ndarray:
    n = params.canvas
    base = _muted_color(rng)
    lum = 38 * _value_noise(rng, n, 4) + 16 * _value_noise(rng, n, 8)
    img = base[None, None, :] + lum[:, :, None] + rng.uniform(-6, 6, size=(n, n, 3))
    for _ in range(rng.integers(params.min_distractors, params.max_distractors + 1)):
        while True:
            w, h = rng.integers(int(0.1 * n), int(0.4 * n) + 1, size=2)
            x0, y0 = rng.integers(0, n - w + 1), rng.integers(0, n - h + 1)
            if rng.random() < 0.5:
                local = np.ones((h, w), dtype=bool)
            else:
                ly, lx = np.mgrid[0:h, 0:w]
                local = ((lx + 0.5 - w / 2) / (w / 2)) ** 2 + ((ly + 0.5 - h / 2) / (h / 2)) ** 2 <= 1
            if not _matches_template(local, templates):
                break
        color = _muted_color(rng)
        region = img[y0:y0 + h, x0:x0 + w]
        region[local] = color + rng.uniform(-6, 6, size=(int(local.sum()), 3))
    return img


def render_scene(template: LogoTemplate, background: BackgroundParams, placement: Placement,
                 seed: int, templates=None) -> Scene:
    """Composite ``template`` over a seeded background at ``placement``.

    ``templates`` (all classes) is used to keep distractors distinct from
    every logo glyph; defaults to ``[template]``.
    """
    n = background.canvas
    side = int(round(placement.scale * n))
    if side < 8 or placement.rotation % 90:
        raise PlacementError(f"bad placement {placement}")
    cx, cy = placement.center
    x0 = int(round(cx * n - side / 2))
    y0 = int(round(cy * n - side / 2))
    if x0 < 0 or y0 < 0 or x0 + side > n or y0 + side > n:
        raise PlacementError(f"logo at {placement} leaves the {n}x{n} canvas")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0xB6]))
    img = _background(rng, background, templates or [template])

    mask = np.rot90(_upscale(template.glyph, side), placement.rotation // 90 % 4)
    shade = rng.uniform(-8, 8, size=(int(mask.sum()), 3))
    img[y0:y0 + side, x0:x0 + side][mask] = np.asarray(template.color, dtype=np.float64) + shade
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    gt = BBox((x0 + cols[0]) / n, (y0 + rows[0]) / n, (x0 + cols[-1] + 1) / n, (y0 + rows[-1] + 1) / n)
    return Scene(img, template.class_id, gt, placement, int(seed))


def sample_placement(rng: np.random.Generator, scale_range, canvas: int = CANVAS) -> Placement:
    scale = float(rng.uniform(*scale_range))
    side = int(round(scale * canvas))
    x0 = int(rng.integers(0, canvas - side + 1))
    y0 = int(rng.integers(0, canvas - side + 1))
    rot = int(rng.integers(4)) * 90
    return Placement(scale, rot, ((x0 + side / 2) / canvas, (y0 + side / 2) / canvas))


def record_seed(master: int, split: str, index: int) -> int:
    stream = {"train": 0, "eval": 1}[split]
    ss = np.random.SeedSequence([int(master), stream, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def scene_for_record(templates, class_id: int, seed: int, scale_range,
                     background: BackgroundParams = BackgroundParams()) -> Scene:
    rng = np.random.default_rng(seed)
    placement = sample_placement(rng, scale_range, background.canvas)
    return render_scene(templates[class_id], background, placement, seed, templates)


@dataclass
class ManifestRecord:
    id: str
    image_path: str
    class_id: int
    class_name: str
    gt_box: list
    seed: int


@dataclass
class DatasetManifest:
    records: list
    split: str
    num_classes: int
    class_names: list
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        return read_ppm(self.root / self.records[i].image_path)

    def load_images(self) -> np.ndarray:
        return np.stack([self.image(i) for i in range(len(self.records))])

    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def gt_boxes(self) -> list:
        return [None if r.gt_box is None else BBox(*r.gt_box) for r in self.records]

    def subset(self, keep) -> "DatasetManifest":
        return DatasetManifest([r for r, k in zip(self.records, keep) if k], self.split,
                               self.num_classes, self.class_names, self.root)

    def write(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path, split: str | None = None) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    if set(d) != {"id", "image_path", "class_id", "class_name", "gt_box", "seed"}:
                        raise ValueError(f"manifest record has keys {sorted(d)}")
                    records.append(ManifestRecord(**d))
        meta_path = path.parent / "dataset.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            num_classes, names = meta["num_classes"], meta["class_names"]
        else:
            num_classes = max(r.class_id for r in records) + 1
            names = [f"class_{i}" for i in range(num_classes)]
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids")
        if any(not 0 <= r.class_id < num_classes for r in records):
            raise ValueError("class id out of range")
        split = split or path.stem
        return cls(records, split, num_classes, names, path.parent)


def generate_dataset(num_classes: int, n_train: int, n_eval: int, scale_range, seed: int,
                     out_dir, canvas: int = CANVAS):
    """Render ``n_train + n_eval`` scenes to ``out_dir`` and write both manifests.

    Layout: ``images/*.ppm``, ``train.jsonl``, ``eval.jsonl``, ``dataset.json``.
    Image paths in the manifests are relative to ``out_dir``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    templates = make_templates(num_classes, seed)
    names = [t.name for t in templates]
    scale_range = tuple(float(v) for v in scale_range)
    bg = BackgroundParams(canvas=canvas)
    manifests = []
    for split, n in (("train", n_train), ("eval", n_eval)):
        order = np.random.default_rng(record_seed(seed, split, 2**31)).permutation(n)
        labels = order % num_classes  # balanced to within one per class
        records = []
        for i in range(n):
            rseed = record_seed(seed, split, i)
            scene = scene_for_record(templates, int(labels[i]), rseed, scale_range, bg)
            rel = f"images/{split}_{i:06d}.ppm"
            write_ppm(out / rel, scene.image)
            records.append(ManifestRecord(f"{split}_{i:06d}", rel, int(labels[i]),
                                          names[labels[i]], list(scene.gt_box.as_tuple()), rseed))
        m = DatasetManifest(records, split, num_classes, names, out)
        m.write(out / f"{split}.jsonl")
        manifests.append(m)
    meta = {"num_classes": num_classes, "class_names": names, "canvas": canvas,
            "scale_range": list(scale_range), "seed": int(seed), "n_train": n_train, "n_eval": n_eval}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifests[0], manifests[1]


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    return (DatasetManifest.read(data_dir / "train.jsonl", "train"),
            DatasetManifest.read(data_dir / "eval.jsonl", "eval"))


__all__ = [
    "BackgroundParams", "DatasetManifest", "LogoTemplate", "ManifestRecord", "Placement",
    "PlacementError", "Scene", "generate_dataset", "load_dataset", "make_templates",
    "render_scene", "rotate_90k", "rotate_box_90k", "scene_for_record",
]
