"""Two-class patch datasets (pristine vs manipulated) with source-level splits.

Source images come either from the synthetic texture generator or from a
directory of PGM files. For every source image a set of non-overlapping patch
offsets is drawn; the pristine patch and the manipulated patch are cut at the
same offset, the manipulated one from the manipulated full image.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import imgops

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# per-style texture parameters; the two styles stand in for two camera datasets
STYLES = {
    "A": dict(cells=(64, 32, 16, 8, 4, 2), persistence=0.55, smooth=False,
              gradient=0.6, noise=(0.04, 0.08)),
    "B": dict(cells=(48, 24, 12, 6, 3), persistence=0.75, smooth=True,
              gradient=0.25, noise=(0.045, 0.09)),
}
_STYLE_CODE = {"A": 0, "B": 1}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SourceImage:
    image: np.ndarray
    source_id: int
    origin: str  # "synthetic" | "file"


@dataclass
class Manifest:
    """Dataset recipe; ``splits`` counts patches per class."""

    patch_size: int = 32
    manipulation: dict = field(default_factory=lambda: {"kind": "median", "k": 5})
    splits: dict = field(default_factory=lambda: {"train": 4000, "val": 500, "test": 500})
    seed: int = 0
    style: str = "A"
    per_image_cap: int = 100
    extent: int = 256
    n_images: int | None = None
    corpus_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"assignment", "counts", "degenerate", "identical_pairs"}
        if unknown:
            raise DatasetError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    def manipulation_tag(self) -> str:
        m = self.manipulation
        if m["kind"] == "median":
            return f"median{m['k']}"
        return f"resize{m['factor']:g}".replace(".", "")


@dataclass
class Split:
    patches: np.ndarray  # (N, P, P) float32
    labels: np.ndarray  # (N,) int64
    source_ids: np.ndarray  # (N,) int64
    patch_idx: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    manifest: Manifest
    splits: dict[str, Split]
    assignment: dict[str, list[int]]
    degenerate: bool = False
    identical_pairs: int = 0

    def manifest_json(self) -> dict:
        d = self.manifest.to_dict()
        d["assignment"] = self.assignment
        d["counts"] = {s: int((sp.labels == 1).sum()) for s, sp in self.splits.items()}
        d["degenerate"] = self.degenerate
        d["identical_pairs"] = self.identical_pairs
        return d

    def manifest_hash(self) -> str:
        blob = json.dumps(self.manifest_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def _image_rng(seed: int, style: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STYLE_CODE[style], index]))


def _upsample(grid: np.ndarray, cell: int, extent: int, smooth: bool) -> np.ndarray:
    pos = (np.arange(extent) + 0.5) / cell
    i0 = np.floor(pos).astype(np.int64)
    t = pos - i0
    if smooth:
        t = t * t * (3 - 2 * t)
    rows = grid[i0] * (1 - t)[:, None] + grid[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def synth_image(seed: int, index: int, extent: int, style: str = "A") -> np.ndarray:
    """One textured image: multi-octave value noise plus a linear ramp and fine grain."""
    p = STYLES[style]
    rng = _image_rng(seed, style, index)
    img = np.zeros((extent, extent))
    amp = 1.0
    for cell in p["cells"]:
        n = extent // cell + 2
        img += amp * _upsample(rng.random((n, n)), cell, extent, p["smooth"])
        amp *= p["persistence"]
    yy, xx = np.mgrid[0:extent, 0:extent] / extent
    angle = rng.uniform(0, 2 * np.pi)
    img += p["gradient"] * rng.uniform(0.5, 1.5) * (np.cos(angle) * xx + np.sin(angle) * yy)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    img = 0.05 + 0.9 * img
    img += rng.normal(0.0, rng.uniform(*p["noise"]), img.shape)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return imgops.quantize8(img)


def synth_corpus(seed: int, n_images: int, extent: int, style: str = "A") -> list[SourceImage]:
    if n_images < 1:
        raise DatasetError("n_images must be >= 1")
    if style not in STYLES:
        raise DatasetError(f"unknown style {style!r}; choose from {sorted(STYLES)}")
    return [SourceImage(synth_image(seed, i, extent, style), i, "synthetic") for i in range(n_images)]


def load_corpus(dir_path) -> list[SourceImage]:
    """PGM files of a directory, ordered by filename; ids are ordinals."""
    root = Path(dir_path)
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() == ".pgm")
    if not files:
        log.warning("no PGM files in %s; corpus is empty", root)
        return []
    images, bad = [], []
    for f in files:
        try:
            images.append(imgops.load_pgm(f))
        except (OSError, imgops.PGMError) as exc:
            bad.append(f"{f.name}: {exc}")
    if bad:
        raise DatasetError("unreadable corpus files:\n  " + "\n  ".join(bad))
    return [SourceImage(img, i, "file") for i, img in enumerate(images)]


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def manipulate(img: np.ndarray, manipulation: dict) -> np.ndarray:
    kind = manipulation.get("kind")
    if kind == "median":
        return imgops.median_filter(img, int(manipulation["k"]))
    if kind == "resize":
        return imgops.quantize8(imgops.downsample(img, float(manipulation["factor"])))
    raise DatasetError(f"unknown manipulation {manipulation!r}")


def patch_offsets(shape: tuple[int, int], patch: int, cap: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random non-overlapping offsets: a jittered tiling, subsampled to ``cap`` tiles."""
    h, w = shape
    ny, nx = h // patch, w // patch
    if ny == 0 or nx == 0:
        return []
    oy = int(rng.integers(0, h - ny * patch + 1))
    ox = int(rng.integers(0, w - nx * patch + 1))
    tiles = [(oy + r * patch, ox + q * patch) for r in range(ny) for q in range(nx)]
    order = rng.permutation(len(tiles))[:cap]
    return [tiles[i] for i in order]


def _source_patches(src: SourceImage, m: Manifest):
    rng = np.random.default_rng(np.random.SeedSequence([m.seed, 7919, src.source_id]))
    manip = manipulate(src.image, m.manipulation)
    # offsets must fit both images (the resized one is smaller)
    shape = (min(src.image.shape[0], manip.shape[0]), min(src.image.shape[1], manip.shape[1]))
    offs = patch_offsets(shape, m.patch_size, m.per_image_cap, rng)
    p = m.patch_size
    orig = [src.image[y:y + p, x:x + p] for y, x in offs]
    mani = [manip[y:y + p, x:x + p] for y, x in offs]
    return orig, mani


def _empty_split(p: int) -> Split:
    return Split(np.zeros((0, p, p), np.float32), np.zeros(0, np.int64),
                 np.zeros(0, np.int64), np.zeros(0, np.int64))


def build_dataset(corpus: list[SourceImage], manifest: Manifest) -> Dataset:
    """Fill train/val/test (in that order) from a seeded permutation of the sources."""
    m = manifest
    ids = [s.source_id for s in corpus]
    if len(set(ids)) != len(ids):
        raise DatasetError("source ids are not unique")
    by_id = {s.source_id: s for s in corpus}
    order = np.random.default_rng(np.random.SeedSequence([m.seed, 104729])).permutation(sorted(ids))

    collected = {s: [] for s in SPLITS}
    assignment = {s: [] for s in SPLITS}
    identical = 0
    cursor = 0
    for split in SPLITS:
        need = int(m.splits.get(split, 0))
        while need > 0:
            if cursor >= len(order):
                have = {s: sum(len(c[1]) for c in collected[s]) for s in SPLITS}
                raise DatasetError(
                    f"corpus of {len(corpus)} images exhausted while filling '{split}': "
                    f"required per class {dict(m.splits)}, collected {have}"
                )
            sid = int(order[cursor])
            cursor += 1
            orig, mani = _source_patches(by_id[sid], m)
            if not orig:
                continue
            orig, mani = orig[:need], mani[:need]
            need -= len(orig)
            identical += sum(bool(np.array_equal(a, b)) for a, b in zip(orig, mani))
            collected[split].append((sid, orig, mani))
            assignment[split].append(sid)

    splits = {}
    p = m.patch_size
    for split in SPLITS:
        if not collected[split]:
            splits[split] = _empty_split(p)
            continue
        pats, labs, sids, pidx = [], [], [], []
        for label in (0, 1):
            for sid, orig, mani in collected[split]:
                src = orig if label == 0 else mani
                pats.extend(src)
                labs.extend([label] * len(src))
                sids.extend([sid] * len(src))
                pidx.extend(range(len(src)))
        splits[split] = Split(np.stack(pats).astype(np.float32), np.asarray(labs, np.int64),
                              np.asarray(sids, np.int64), np.asarray(pidx, np.int64))
    total = sum(int((sp.labels == 1).sum()) for sp in splits.values())
    degenerate = total > 0 and identical == total
    if degenerate:
        log.warning("manipulation %s left every patch unchanged", m.manipulation)
    return Dataset(m, splits, assignment, degenerate, identical)


def required_images(manifest: Manifest) -> int:
    """Source images needed when every image yields the full tile count."""
    m = manifest
    ext = m.extent
    if m.manipulation.get("kind") == "resize":
        ext = int(math.floor(ext * float(m.manipulation["factor"]) + 0.5))
    per = min(m.per_image_cap, (ext // m.patch_size) ** 2)
    if per == 0:
        raise DatasetError(f"extent {m.extent} cannot hold a {m.patch_size}px patch")
    return sum(math.ceil(int(m.splits.get(s, 0)) / per) for s in SPLITS)


def generate(manifest: Manifest) -> Dataset:
    if manifest.corpus_dir:
        corpus = load_corpus(manifest.corpus_dir)
    else:
        n = manifest.n_images or required_images(manifest)
        corpus = synth_corpus(manifest.seed, n, manifest.extent, manifest.style)
    return build_dataset(corpus, manifest)


# ---------------------------------------------------------------------------
# On-disk layout: <root>/<split>/<label>/<source_id>_<patch_idx>.pgm + manifest.json
# ---------------------------------------------------------------------------

def write_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    for split, sp in ds.splits.items():
        for label in (0, 1):
            (root / split / str(label)).mkdir(parents=True, exist_ok=True)
        for patch, label, sid, idx in zip(sp.patches, sp.labels, sp.source_ids, sp.patch_idx):
            imgops.save_pgm(patch, root / split / str(label) / f"{sid}_{idx}.pgm")
    with open(root / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(ds.manifest_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(root) -> Dataset:
    root = Path(root)
    try:
        with open(root / "manifest.json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    manifest = Manifest.from_dict(meta)
    splits = {}
    for split in SPLITS:
        pats, labs, sids, pidx = [], [], [], []
        for label in (0, 1):
            d = root / split / str(label)
            if not d.is_dir():
                continue
            entries = []
            for f in d.iterdir():
                if f.suffix != ".pgm":
                    continue
                sid, idx = f.stem.split("_")
                entries.append((int(sid), int(idx), f))
            # same ordering as build_dataset: source assignment order, then patch index
            rank = {s: i for i, s in enumerate(meta["assignment"][split])}
            entries.sort(key=lambda e: (rank[e[0]], e[1]))
            for sid, idx, f in entries:
                pats.append(imgops.load_pgm(f))
                labs.append(label)
                sids.append(sid)
                pidx.append(idx)
        if pats:
            splits[split] = Split(np.stack(pats), np.asarray(labs, np.int64),
                                  np.asarray(sids, np.int64), np.asarray(pidx, np.int64))
        else:
            splits[split] = _empty_split(manifest.patch_size)
    return Dataset(manifest, splits, {k: list(v) for k, v in meta["assignment"].items()},
                   bool(meta.get("degenerate", False)), int(meta.get("identical_pairs", 0)))


def dataset_digest(root) -> str:
    """SHA-256 over every file of a dataset directory (relative path + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode("utf-8") + b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def check_disjoint(ds: Dataset) -> None:
    seen: dict[int, str] = {}
    for split, sp in ds.splits.items():
        for sid in np.unique(sp.source_ids):
            other = seen.setdefault(int(sid), split)
            if other != split:
                raise DatasetError(f"source {sid} appears in both '{other}' and '{split}'")
