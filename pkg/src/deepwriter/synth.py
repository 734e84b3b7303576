"""Procedural pseudo-handwriting corpus.

Every writer gets a fixed style (stroke thickness, slant, curvature jitter,
glyph spacing, baseline wobble) plus a personal variant of every glyph of
the script. Each sample draws fresh random content, so text varies per
sample while style stays with the writer.

Rasterisation is integer-only: coordinates are fixed point (``FP``
sub-units per supersampled pixel) and anti-aliasing comes from counting
covered supersamples, so a given seed produces the same bytes everywhere.
Randomness comes solely from ``numpy.random.Generator.integers``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .data import ManifestEntry, split_per_writer, write_manifest
from .errors import DomainError

SS = 4            # supersamples per output pixel, per axis
FP = 16           # fixed-point sub-units per supersample
PX = SS * FP      # fixed-point units per output pixel
Q = 1000          # style parameters are integers in [0, Q]
CURVE_STEPS = 24

# name -> (low, high, unit); value = low + q * (high - low) / Q
STYLE_RANGES = {
    "thickness": (1.0, 3.6, "px"),
    "slant": (-0.45, 0.45, "rad"),
    "jitter": (0.0, 1.0, ""),
    "spacing": (0.5, 5.5, "px"),
    "wobble": (0.0, 3.0, "px"),
}
STYLE_FIELDS = tuple(STYLE_RANGES)
MIN_SEPARATION = Q // 10   # 10% of range
MIN_SEPARATED_FIELDS = 2

SCRIPTS = ("latin", "hanzi")
_ALPHABET_SEEDS = {"latin": 0x1A71, "hanzi": 0x4A21}
_ALPHABET_SIZES = {"latin": 26, "hanzi": 48}


def _scale(q: int, lo_fp: int, hi_fp: int) -> int:
    return lo_fp + (q * (hi_fp - lo_fp)) // Q


@dataclass(frozen=True)
class WriterStyle:
    """Integer-coded style; each field lies in ``[0, Q]``."""

    thickness: int
    slant: int
    jitter: int
    spacing: int
    wobble: int

    def vector(self) -> Tuple[int, ...]:
        return tuple(getattr(self, f) for f in STYLE_FIELDS)

    def value(self, name: str) -> float:
        lo, hi, _ = STYLE_RANGES[name]
        return lo + getattr(self, name) * (hi - lo) / Q

    def values(self) -> Dict[str, float]:
        return {f: self.value(f) for f in STYLE_FIELDS}

    def separated_from(self, other: "WriterStyle") -> bool:
        diffs = sum(abs(a - b) >= MIN_SEPARATION for a, b in zip(self.vector(), other.vector()))
        return diffs >= MIN_SEPARATED_FIELDS

    # fixed-point renderings of the parameters
    @property
    def radius_fp(self) -> int:
        # radius = thickness / 2
        return _scale(self.thickness, PX // 2, 36 * PX // 20)

    @property
    def shear_milli(self) -> int:
        return _scale(self.slant, -450, 450)

    @property
    def jitter_fp(self) -> int:
        return _scale(self.jitter, 0, 2 * PX)

    @property
    def spacing_fp(self) -> int:
        return _scale(self.spacing, PX // 2, 11 * PX // 2)

    @property
    def wobble_fp(self) -> int:
        return _scale(self.wobble, 0, 3 * PX)


def writer_styles(num_writers: int, corpus_seed: int, max_tries: int = 10_000) -> List[WriterStyle]:
    """Rejection-sample mutually separated styles, in writer order."""
    styles: List[WriterStyle] = []
    for w in range(num_writers):
        rng = np.random.default_rng([corpus_seed, 1, w])
        for _ in range(max_tries):
            cand = WriterStyle(*(int(v) for v in rng.integers(0, Q + 1, size=len(STYLE_FIELDS))))
            if all(cand.separated_from(s) for s in styles):
                styles.append(cand)
                break
        else:
            raise DomainError(f"could not find a separated style for writer {w}")
    return styles


# -- glyphs --------------------------------------------------------------------
# A glyph is (advance width, strokes); a stroke is three control points in
# fixed point relative to (cursor x, baseline y), y pointing down.

Stroke = Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]
Glyph = Tuple[int, List[Stroke]]


def _latin_glyph(rng) -> Glyph:
    width = int(rng.integers(7, 13)) * PX
    xh = 13 * PX
    strokes = []
    for _ in range(int(rng.integers(1, 4))):
        top = -xh - (int(rng.integers(0, 7)) * PX if rng.integers(0, 4) == 0 else 0)
        bottom = int(rng.integers(0, 6)) * PX if rng.integers(0, 5) == 0 else 0
        p0 = (int(rng.integers(0, width + 1)), int(rng.integers(top, bottom + 1)))
        p2 = (int(rng.integers(0, width + 1)), int(rng.integers(top, bottom + 1)))
        # Push the control point off the chord so strokes curve.
        p1 = (int(rng.integers(-width // 2, width + width // 2 + 1)),
              int(rng.integers(top - 4 * PX, bottom + 4 * PX + 1)))
        strokes.append((p0, p1, p2))
    return width, strokes


def _hanzi_glyph(rng) -> Glyph:
    side = 26 * PX
    strokes = []
    for _ in range(int(rng.integers(3, 8))):
        kind = int(rng.integers(0, 4))
        a = int(rng.integers(0, side + 1))
        b0, b1 = sorted(int(v) for v in rng.integers(0, side + 1, size=2))
        b1 = max(b1, b0 + 6 * PX)
        if kind == 0:      # horizontal
            p0, p2 = (b0, a - side), (b1, a - side)
        elif kind == 1:    # vertical
            p0, p2 = (a, b0 - side), (a, b1 - side)
        elif kind == 2:    # falling diagonal
            p0, p2 = (b0, b0 - side), (b1, b1 - side)
        else:              # rising diagonal
            p0, p2 = (b0, -b0), (b1, -b1)
        bend = int(rng.integers(-2 * PX, 2 * PX + 1))
        p1 = ((p0[0] + p2[0]) // 2 + bend, (p0[1] + p2[1]) // 2 - bend)
        strokes.append((p0, p1, p2))
    return side, strokes


def alphabet(script: str) -> List[Glyph]:
    if script not in SCRIPTS:
        raise DomainError(f"unknown script {script!r}; choose from {SCRIPTS}")
    rng = np.random.default_rng(_ALPHABET_SEEDS[script])
    make = _latin_glyph if script == "latin" else _hanzi_glyph
    return [make(rng) for _ in range(_ALPHABET_SIZES[script])]


def personal_alphabet(glyphs: Sequence[Glyph], corpus_seed: int, writer: int) -> List[Glyph]:
    """The writer's habitual variant of every glyph (fixed per writer)."""
    rng = np.random.default_rng([corpus_seed, 2, writer])
    amp = 2 * PX
    out = []
    for width, strokes in glyphs:
        mine = []
        for stroke in strokes:
            d = rng.integers(-amp, amp + 1, size=6)
            mine.append(tuple((x + int(d[2 * k]), y + int(d[2 * k + 1]))
                              for k, (x, y) in enumerate(stroke)))
        out.append((width, mine))
    return out


# -- rasterisation -------------------------------------------------------------

def _curve_points(stroke: Stroke) -> np.ndarray:
    (x0, y0), (x1, y1), (x2, y2) = stroke
    t = np.arange(CURVE_STEPS + 1, dtype=np.int64)
    u = CURVE_STEPS - t
    den = CURVE_STEPS * CURVE_STEPS
    xs = (u * u * x0 + 2 * u * t * x1 + t * t * x2) // den
    ys = (u * u * y0 + 2 * u * t * y1 + t * t * y2) // den
    return np.stack([xs, ys], axis=1)


def _stamp(mask: np.ndarray, pts: np.ndarray, radius: int) -> None:
    """Set every supersample whose centre lies within ``radius`` of a curve point."""
    h, w = mask.shape
    x_lo = max(0, int((pts[:, 0].min() - radius) // FP))
    x_hi = min(w, int((pts[:, 0].max() + radius) // FP) + 1)
    y_lo = max(0, int((pts[:, 1].min() - radius) // FP))
    y_hi = min(h, int((pts[:, 1].max() + radius) // FP) + 1)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    cx = np.arange(x_lo, x_hi, dtype=np.int64) * FP + FP // 2
    cy = np.arange(y_lo, y_hi, dtype=np.int64) * FP + FP // 2
    dx = cx[None, None, :] - pts[:, 0, None, None]
    dy = cy[None, :, None] - pts[:, 1, None, None]
    hit = ((dx * dx + dy * dy) <= radius * radius).any(axis=0)
    mask[y_lo:y_hi, x_lo:x_hi] |= hit


def _triangle(x: int, period: int, amp: int) -> int:
    """Integer triangle wave in ``[-amp, amp]``."""
    if amp == 0:
        return 0
    ph = x % period
    half = period // 2
    v = ph if ph < half else period - ph
    return (4 * amp * v) // period - amp


def render_sample(style: WriterStyle, glyphs: Sequence[Glyph], rng: np.random.Generator,
                  layout: str = "line", height: int = 40) -> np.ndarray:
    """Render one sample as a ``uint8`` gray image (white paper, dark ink)."""
    if layout == "line":
        count = int(rng.integers(16, 25))
    elif layout == "char":
        count = 1
    else:
        raise DomainError(f"unknown layout {layout!r}")
    content = [int(v) for v in rng.integers(0, len(glyphs), size=count)]
    margin = 3 * PX
    baseline = (height * PX * 3) // 4 if layout == "line" else height * PX - (height * PX - 26 * PX) // 2
    period = 40 * PX
    phase = int(rng.integers(0, period))
    shear = style.shear_milli
    jit = style.jitter_fp

    placed = []
    cursor = margin + abs(shear) * height * PX // 1000 // 2
    if layout == "char":
        cursor = (height * PX - glyphs[content[0]][0]) // 2
    for g in content:
        width, strokes = glyphs[g]
        base = baseline + _triangle(cursor + phase, period, style.wobble_fp)
        for stroke in strokes:
            pts = []
            for k, (x, y) in enumerate(stroke):
                if jit:
                    amp = jit if k == 1 else jit // 2
                    x += int(rng.integers(-amp, amp + 1))
                    y += int(rng.integers(-amp, amp + 1))
                # Shear about the baseline: points above it lean by the slant.
                x = cursor + x + (-y * shear) // 1000
                pts.append((x, base + y))
            placed.append(tuple(pts))
        gap = style.spacing_fp
        if layout == "line" and rng.integers(0, 5) == 0:
            gap += 4 * PX  # word break
        cursor += width + gap

    if layout == "line":
        width_px = max(height, -(-(cursor + margin + abs(shear) * height * PX // 1000 // 2) // PX))
    else:
        width_px = height
    mask = np.zeros((height * SS, width_px * SS), dtype=bool)
    radius = style.radius_fp
    for stroke in placed:
        _stamp(mask, _curve_points(stroke), radius)

    coverage = mask.reshape(height, SS, width_px, SS).sum(axis=(1, 3), dtype=np.int64)
    ink = 230
    noise = rng.integers(0, 12, size=coverage.shape)
    gray = 255 - (coverage * ink) // (SS * SS) - noise
    return np.clip(gray, 0, 255).astype(np.uint8)


# -- corpus --------------------------------------------------------------------

DEFAULT_LAYOUT = {"latin": "line", "hanzi": "char"}


def writer_label(i: int) -> str:
    return f"w{i:03d}"


def synthesize(num_writers: int, samples_per_writer: int, corpus_seed: int = 0,
               script: str = "latin", layout: str = None, height: int = 40
               ) -> Tuple[Dict[str, List[np.ndarray]], List[WriterStyle]]:
    """In-memory corpus: ``{writer label: [images]}`` and the writers' styles."""
    if num_writers < 2:
        raise DomainError("need at least 2 writers")
    if samples_per_writer < 3:
        raise DomainError("need at least 3 samples per writer")
    if script not in SCRIPTS:
        raise DomainError(f"unknown script {script!r}; choose from {SCRIPTS}")
    layout = layout or DEFAULT_LAYOUT[script]
    styles = writer_styles(num_writers, corpus_seed)
    base = alphabet(script)
    corpus = {}
    for w, style in enumerate(styles):
        glyphs = personal_alphabet(base, corpus_seed, w)
        corpus[writer_label(w)] = [
            render_sample(style, glyphs, np.random.default_rng([corpus_seed, 3, w, s]), layout, height)
            for s in range(samples_per_writer)
        ]
    return corpus, styles


def generate_synthetic_corpus(out_dir, num_writers: int, samples_per_writer: int,
                              corpus_seed: int = 0, script: str = "latin",
                              layout: str = None, height: int = 40) -> List[ManifestEntry]:
    """Write PGM images plus ``manifest.jsonl`` (4:1:1 split) under ``out_dir``."""
    out_dir = Path(out_dir)
    corpus, styles = synthesize(num_writers, samples_per_writer, corpus_seed, script, layout, height)
    entries = []
    for writer, images in corpus.items():
        (out_dir / writer).mkdir(parents=True, exist_ok=True)
        for s, img in enumerate(images):
            rel = f"{writer}/{writer}_{s:04d}.pgm"
            Image.fromarray(img).save(out_dir / rel, format="PPM")
            entries.append(ManifestEntry(rel, writer))
    entries = split_per_writer(entries, corpus_seed)
    write_manifest(entries, out_dir / "manifest.jsonl")
    return entries
