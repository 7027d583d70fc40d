"""Annotation sidecars, manifests, splits and the synthetic rail-scene generator."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import MalformedAnnotationError, ValidationError
from .grid import SCENE_TAGS, RailAnnotation, RailPolyline, RowAnchorGrid, clip_polyline

SCENE_GROUPS = {
    "lighting": ("sun", "rain", "night"),
    "structure": ("line", "curve", "slope", "cross"),
    "view": ("near", "far"),
}


# -- annotation sidecars -----------------------------------------------------

def annotation_to_dict(annotation: RailAnnotation, image: str = "") -> dict:
    h, w = annotation.image_size
    return {
        "image": image,
        "width": w,
        "height": h,
        "scenes": [t for t in SCENE_TAGS if t in annotation.scene_tags],
        "rails": [
            {"order": r.order_number, "points": [[x, y] for x, y in r.vertices]}
            for r in annotation.sorted_rails()
        ],
    }


def annotation_from_dict(d: dict) -> RailAnnotation:
    try:
        rails = [RailPolyline(int(r["order"]), [(p[0], p[1]) for p in r["points"]])
                 for r in d["rails"]]
        size = (int(d["height"]), int(d["width"]))
        scenes = list(d.get("scenes", []))
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise MalformedAnnotationError(f"bad annotation structure: {exc!r}") from None
    return RailAnnotation(rails, frozenset(scenes), size)


def dumps_annotation(annotation: RailAnnotation, image: str = "") -> str:
    return json.dumps(annotation_to_dict(annotation, image), indent=1) + "\n"


def save_annotation(annotation: RailAnnotation, path, image: str = ""):
    Path(path).write_text(dumps_annotation(annotation, image), encoding="utf-8")


def load_annotation(path) -> RailAnnotation:
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise MalformedAnnotationError(f"{path}: top level must be an object")
    return annotation_from_dict(d)


# Converters from foreign annotation layouts (e.g. a real Rail-DB export) register
# here; each maps a source path to a RailAnnotation. Only the native format ships.
IMPORTERS: dict = {"railrow": load_annotation}


def register_importer(name: str):
    def deco(fn):
        IMPORTERS[name] = fn
        return fn
    return deco


def import_annotation(path, fmt: str = "railrow") -> RailAnnotation:
    if fmt not in IMPORTERS:
        raise ValidationError(f"no importer registered for {fmt!r}; known: {sorted(IMPORTERS)}")
    ann = IMPORTERS[fmt](path)
    if not isinstance(ann, RailAnnotation):
        raise ValidationError(f"importer {fmt!r} returned {type(ann).__name__}, not RailAnnotation")
    return ann


def load_image(path) -> np.ndarray:
    """Grayscale uint8 H x W (PNG, PPM/PGM or anything Pillow reads)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_image(image: np.ndarray, path):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG", optimize=False)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    annotation: str
    scenes: tuple
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list
    root: Path = field(default_factory=Path)
    grid: RowAnchorGrid | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def subset(self, entries) -> "DatasetManifest":
        return DatasetManifest(list(entries), self.root, self.grid)

    def by_split(self, name: str) -> "DatasetManifest":
        return self.subset(e for e in self.entries if e.split == name)

    def load(self):
        """Images (N x H x W uint8) and their annotations."""
        images, annotations = [], []
        for e in self.entries:
            images.append(load_image(self.root / e.image))
            annotations.append(load_annotation(self.root / e.annotation))
        if not images:
            return np.zeros((0, 0, 0), np.uint8), []
        return np.stack(images), annotations

    def save(self, path):
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({"image": e.image, "annotation": e.annotation,
                                     "scenes": list(e.scenes), "split": e.split}) + "\n")
        if self.grid is not None:
            grid_path(path).write_text(json.dumps(self.grid.to_dict(), indent=1) + "\n")


def grid_path(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".grid.json")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                entries.append(ManifestEntry(d["image"], d["annotation"],
                                             tuple(d.get("scenes", ())), d.get("split", "train")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise MalformedAnnotationError(f"{path}:{n}: bad manifest line ({exc})") from None
    for e in entries:
        for p in (e.image, e.annotation):
            if not (path.parent / p).exists():
                raise FileNotFoundError(f"{path}: referenced file missing: {path.parent / p}")
    grid = None
    gp = grid_path(path)
    if gp.exists():
        grid = RowAnchorGrid.from_dict(json.loads(gp.read_text()))
    return DatasetManifest(entries, path.parent, grid)


def split(manifest: DatasetManifest, fractions=(0.8, 0.2), seed: int = 0):
    """Deterministic shuffled split into ``(train, val)``; also relabels ``entry.split``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
        raise ValidationError(f"fractions must be two non-negative values summing to 1: {fractions}")
    n = len(manifest)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    train_idx = set(order[:n_train].tolist())
    train, val = [], []
    for i, e in enumerate(manifest.entries):
        if i in train_idx:
            train.append(replace(e, split="train"))
        else:
            val.append(replace(e, split="val"))
    return manifest.subset(train), manifest.subset(val)


def split_indices(n: int, fractions=(0.8, 0.2), seed: int = 0):
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def filter_by_scene(manifest: DatasetManifest, tags) -> DatasetManifest:
    tags = set(tags)
    return manifest.subset(e for e in manifest.entries if tags & set(e.scenes))


# -- synthetic scenes --------------------------------------------------------

def allocate_scenes(count: int, scene_mix: dict | None, seed: int) -> list:
    """Exact per-group tag allocation, deterministically shuffled.

    ``scene_mix`` maps tags to fractions; within each group, fractions left
    unassigned are shared evenly by the group's unnamed tags.
    """
    scene_mix = dict(scene_mix or {})
    unknown = set(scene_mix) - set(SCENE_TAGS)
    if unknown:
        raise ValidationError(f"unknown scene tags in mix: {sorted(unknown)}")
    per_sample = [set() for _ in range(count)]
    for g, (group, tags) in enumerate(SCENE_GROUPS.items()):
        named = {t: float(scene_mix[t]) for t in tags if t in scene_mix}
        if any(v < 0 for v in named.values()) or sum(named.values()) > 1 + 1e-9:
            raise ValidationError(f"{group} fractions must be non-negative and sum to <= 1")
        rest = [t for t in tags if t not in named]
        left = 1.0 - sum(named.values())
        fr = {t: named.get(t, left / len(rest) if rest else 0.0) for t in tags}
        if not np.isclose(sum(fr.values()), 1.0):
            raise ValidationError(f"{group} fractions sum to {sum(fr.values())}, not 1")
        raw = np.array([fr[t] * count for t in tags])
        counts = np.floor(raw + 1e-9).astype(int)
        for i in np.argsort(-(raw - counts), kind="stable")[: count - counts.sum()]:
            counts[i] += 1
        labels = np.repeat(np.arange(len(tags)), counts)
        labels = np.random.default_rng([seed, 7919, g]).permutation(labels)
        for s, lab in zip(per_sample, labels):
            s.add(tags[lab])
    return [frozenset(s) for s in per_sample]


@dataclass
class SyntheticDataset:
    images: np.ndarray  # N x H x W uint8
    annotations: list
    grid: RowAnchorGrid

    def __len__(self):
        return len(self.annotations)

    @property
    def tags(self):
        return [a.scene_tags for a in self.annotations]

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=int)
        return SyntheticDataset(self.images[idx], [self.annotations[i] for i in idx], self.grid)

    def with_scene(self, tags) -> "SyntheticDataset":
        tags = set(tags)
        return self.subset([i for i, a in enumerate(self.annotations) if tags & a.scene_tags])

    def write(self, out_dir, split_fractions=(0.8, 0.2), seed: int = 0,
              manifest_name: str = "manifest.jsonl") -> Path:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "annotations").mkdir(parents=True, exist_ok=True)
        train_idx, _ = split_indices(len(self), split_fractions, seed)
        train_set = set(train_idx.tolist())
        entries = []
        for i, (img, ann) in enumerate(zip(self.images, self.annotations)):
            img_rel = f"images/{i:05d}.png"
            ann_rel = f"annotations/{i:05d}.json"
            save_image(img, out / img_rel)
            save_annotation(ann, out / ann_rel, image=img_rel)
            scenes = tuple(t for t in SCENE_TAGS if t in ann.scene_tags)
            entries.append(ManifestEntry(img_rel, ann_rel, scenes,
                                         "train" if i in train_set else "val"))
        path = out / manifest_name
        DatasetManifest(entries, out, self.grid).save(path)
        return path


def _rail_vertices(fn, y_top, y_bottom, step=2.0):
    ys = np.arange(y_top, y_bottom, step)
    ys = np.append(ys, y_bottom)
    return [(float(fn(y)), float(y)) for y in ys]


def render_scene(rng, tags, H, W, straight=False):
    """One synthetic frame and its exact polylines (dict order -> vertices)."""
    near = "near" in tags
    vp_y = rng.uniform(0.30, 0.40) * H if near else rng.uniform(0.12, 0.22) * H
    if "slope" in tags:
        vp_y -= rng.uniform(0.02, 0.06) * H
    curved = bool({"curve", "slope"} & set(tags)) and not straight
    lateral = rng.uniform(25, 45) * rng.choice([-1, 1]) if "curve" in tags else rng.uniform(-10, 10)
    vp_x = W / 2 + lateral
    if "line" in tags or straight:
        gamma = 1.0
    elif "curve" in tags:
        gamma = rng.choice([rng.uniform(0.8, 0.9), rng.uniform(1.15, 1.3)])
    else:
        gamma = rng.uniform(0.8, 1.3)
    gauge = rng.uniform(105, 135) if near else rng.uniform(70, 95)
    center = W / 2 + rng.uniform(-12, 12)
    bottom = H - 1.0
    span = H - vp_y
    y_top = vp_y + 0.1 * span

    def track(x_base):
        return lambda y: vp_x + (x_base - vp_x) * ((y - vp_y) / span) ** gamma

    fns = {1: track(center - gauge / 2), 2: track(center + gauge / 2)}
    tops = {1: y_top, 2: y_top}
    if "cross" in tags:
        side = rng.choice([-1, 1])
        y_b = rng.uniform(0.45, 0.65) * H
        spread = rng.uniform(0.8, 1.1) * gauge
        d = lambda y: side * spread * (max(y - y_b, 0.0) / (H - y_b)) ** 1.8  # noqa: E731
        f1, f2 = fns[1], fns[2]
        fns[3] = lambda y: f1(y) + d(y)
        fns[4] = lambda y: f2(y) + d(y)
        tops[3] = tops[4] = y_b
    elif rng.random() < 0.5:
        side = rng.choice([-1, 1])
        offset = side * gauge * rng.uniform(1.5, 1.8)
        fns[3] = track(center + offset - gauge / 2)
        fns[4] = track(center + offset + gauge / 2)
        tops[3] = tops[4] = y_top

    polylines = {}
    for order, fn in fns.items():
        verts = clip_polyline(_rail_vertices(fn, tops[order], bottom), W, H)
        if len(verts) >= 2:
            polylines[order] = verts

    night, rain = "night" in tags, "rain" in tags
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.where(yy < vp_y, 150.0 + 20 * (vp_y - yy) / max(vp_y, 1), 80.0 + 25 * (yy - vp_y) / span)
    tex = rng.standard_normal((H // 8 + 2, W // 8 + 2))
    img += 10 * np.kron(tex, np.ones((8, 8)))[:H, :W]
    # sleepers: darker bands between the primary rails at perspective spacing
    f1, f2 = fns[1], fns[2]
    n_sleepers = 14
    phase = rng.uniform(0, 1)
    for k in range(n_sleepers):
        t = ((k + phase) / n_sleepers) ** 1.6
        y = y_top + t * (bottom - y_top)
        thick = 0.6 + 2.0 * (y - vp_y) / span
        xl, xr = f1(y), f2(y)
        pad = 0.15 * (xr - xl)
        band = (np.abs(yy - y) < thick / 2) & (xx > xl - pad) & (xx < xr + pad)
        img[band] -= 25
    bright = rng.uniform(205, 235)
    for order, verts in polylines.items():
        pl = RailPolyline(order, verts)
        rows = np.arange(int(np.ceil(pl.ys.min())), int(np.floor(pl.ys.max())) + 1)
        xs = pl.x_at(rows)
        width = 0.8 + 2.2 * (rows - vp_y) / span
        # horizontal extent of a slanted stroke of the given normal width
        width = width * np.sqrt(1.0 + np.gradient(xs) ** 2) if len(rows) > 1 else width
        prof = np.clip(width[:, None] / 2 + 0.5 - np.abs(xx[0][None, :] - xs[:, None]), 0, 1)
        img[rows] = img[rows] * (1 - prof) + bright * prof
    if rain:
        for _ in range(int(rng.integers(40, 80))):
            x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
            length, amp = rng.uniform(5, 15), rng.uniform(30, 60)
            for s in np.linspace(0, 1, int(length) * 2):
                px, py = int(x0 + 0.3 * length * s), int(y0 + length * s)
                if 0 <= px < W and 0 <= py < H:
                    img[py, px] += amp
    if night:
        img *= 0.3
        img += 60 * np.exp(-((xx - W / 2) ** 2 / (2 * (W / 3) ** 2) + (yy - H) ** 2 / (2 * (H / 2) ** 2))) * 0.3
    img += rng.standard_normal((H, W)) * (8.0 if rain else 4.0)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), polylines


def generate_synthetic(count: int, scene_mix: dict | None = None, grid: RowAnchorGrid | None = None,
                       seed: int = 0) -> SyntheticDataset:
    """Render ``count`` frames; deterministic per ``(seed, index)``."""
    if count <= 0:
        raise ValidationError(f"count must be positive, got {count}")
    grid = grid or RowAnchorGrid.desk()
    H, W = grid.image_height, grid.image_width
    tag_sets = allocate_scenes(count, scene_mix, seed)
    images = np.empty((count, H, W), np.uint8)
    annotations = []
    for i, tags in enumerate(tag_sets):
        rng = np.random.default_rng([seed, i])
        img, polylines = render_scene(rng, tags, H, W)
        images[i] = img
        rails = [RailPolyline(o, v) for o, v in sorted(polylines.items())]
        annotations.append(RailAnnotation(rails, tags, (H, W)))
    return SyntheticDataset(images, annotations, grid)


def thread_count() -> int:
    return max(1, int(os.environ.get("RAILROW_THREADS", "1")))
