"""Manifests, per-writer splits, image loading and dataset adapters."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DomainError

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    writer: str
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({"path": self.path, "writer": self.writer, "split": self.split})


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def read_manifest(path) -> List[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                entries.append(ManifestEntry(str(d["path"]), str(d["writer"]), str(d.get("split", "train"))))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DomainError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
            if entries[-1].split not in SPLITS:
                raise DomainError(f"{path}:{lineno}: unknown split {entries[-1].split!r}")
    return entries


def label_table(entries: Iterable[ManifestEntry]) -> List[str]:
    """Writer labels in sorted order; position is the class index."""
    return sorted({e.writer for e in entries})


def split_counts(n: int) -> Tuple[int, int, int]:
    """4:1:1 counts with each split holding at least one item."""
    if n < 3:
        raise DomainError(f"need at least 3 items to split, got {n}")
    n_train = (4 * n + 3) // 6          # round-half-up of 4n/6
    n_val = max(1, (n + 3) // 6)        # round-half-up of n/6
    n_test = n - n_train - n_val
    if n_test < 1:
        n_train -= 1 - n_test
        n_test = 1
    return n_train, n_val, n_test


def split_per_writer(entries: Sequence[ManifestEntry], seed: int = 0) -> List[ManifestEntry]:
    """Reassign splits 4:1:1 within every writer, shuffled by ``seed``.

    Output is ordered by writer label, then train/val/test, then path.
    """
    by_writer: Dict[str, List[ManifestEntry]] = defaultdict(list)
    for e in entries:
        by_writer[e.writer].append(e)
    out = []
    for i, writer in enumerate(sorted(by_writer)):
        items = sorted(by_writer[writer], key=lambda e: e.path)
        if len(items) < 3:
            raise DomainError(f"writer {writer!r} has {len(items)} items; at least 3 are needed")
        order = np.random.default_rng([seed, i]).permutation(len(items))
        counts = split_counts(len(items))
        start = 0
        for split, count in zip(SPLITS, counts):
            chosen = sorted((items[j] for j in order[start:start + count]), key=lambda e: e.path)
            out.extend(ManifestEntry(e.path, e.writer, split) for e in chosen)
            start += count
    return out


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PGM as an 8-bit gray ``(height, width)`` array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                arr = np.clip(np.round(arr * 255.0 / max(arr.max(), 1)), 0, 255)
                return arr.astype(np.uint8)
            if im.mode != "L":
                im = im.convert("RGB").convert("L")  # ITU-R 601 luma
            return np.array(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"image not found: {path}") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


@dataclass
class Sample:
    image: np.ndarray
    label: int
    path: str = ""


def load_dataset(manifest_path, split: str, labels: Sequence[str] = None) -> Tuple[List[Sample], List[str]]:
    """Load one split of a manifest. Paths resolve relative to the manifest."""
    entries = read_manifest(manifest_path)
    labels = list(labels) if labels is not None else label_table(entries)
    index = {w: i for i, w in enumerate(labels)}
    root = Path(manifest_path).parent
    samples = []
    for e in entries:
        if e.split != split:
            continue
        if e.writer not in index:
            raise DomainError(f"writer {e.writer!r} is not in the label table")
        p = Path(e.path)
        samples.append(Sample(load_image(p if p.is_absolute() else root / p), index[e.writer], e.path))
    return samples, labels


# -- directory adapters --------------------------------------------------------

def _images_under(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_writer_dirs(root) -> List[ManifestEntry]:
    """``<root>/<writer>/**/<image>``: one subdirectory per writer."""
    root = Path(root)
    entries = []
    for wdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img in _images_under(wdir):
            entries.append(ManifestEntry(img.relative_to(root).as_posix(), wdir.name))
    return entries


def scan_iam(root) -> List[ManifestEntry]:
    """IAM sentence images with writer ids from ``forms.txt``.

    Expects ``<root>/forms.txt`` and ``<root>/sentences/**/<form>-sNN-NN.png``;
    the form id is the first two dash-separated fields of the file name.
    """
    root = Path(root)
    writers = {}
    with open(root / "forms.txt", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            fields = line.split()
            writers[fields[0]] = fields[1]
    entries = []
    for img in _images_under(root / "sentences"):
        form = "-".join(img.stem.split("-")[:2])
        if form in writers:
            entries.append(ManifestEntry(img.relative_to(root).as_posix(), writers[form]))
    return entries


ADAPTERS = {"writer-dirs": scan_writer_dirs, "hwdb": scan_writer_dirs, "iam": scan_iam}
