"""Generator for ELPV-layout demo/test data.

The real EL image corpus is distributed separately; this module writes a
directory with the same labels-file layout and the same per-(type, label)
sample counts, populated with procedurally drawn cells. Damaged cells get
dark crack strokes, polycrystalline cells get a blocky grain texture, so
the classes stay learnable by a small CNN while staying deterministic per
seed and cheap to store as PNG.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import IMAGE_SIDE, RAW_LABEL_PROBS

# Per-(module type, raw label) sample counts of the public 2,624-image set.
PUBLIC_COUNTS = {
    ("mono", "P00"): 588, ("mono", "P03"): 117,
    ("mono", "P06"): 56, ("mono", "P10"): 313,
    ("poly", "P00"): 920, ("poly", "P03"): 178,
    ("poly", "P06"): 50, ("poly", "P10"): 402,
}

# Stroke count range and darkness per label; heavier damage draws more and
# darker cracks.
_CRACKS = {
    "P00": (0, 0, 0),
    "P03": (1, 1, 60),
    "P06": (1, 2, 90),
    "P10": (2, 4, 130),
}


def _cell_image(rng: np.random.Generator, module_type: str, raw_label: str) -> Image.Image:
    base = int(rng.integers(150, 200))
    img = Image.new("L", (IMAGE_SIDE, IMAGE_SIDE), color=base)
    draw = ImageDraw.Draw(img)

    if module_type == "poly":
        # Coarse grain patches; blocky regions keep the PNGs small.
        for _ in range(int(rng.integers(12, 24))):
            x0, y0 = rng.integers(0, IMAGE_SIDE, 2)
            w, h = rng.integers(30, 120, 2)
            shade = int(np.clip(base + rng.integers(-35, 35), 60, 235))
            draw.rectangle([int(x0), int(y0), int(x0 + w), int(y0 + h)], fill=shade)

    # Busbar stripes common to every cell.
    for frac in (0.33, 0.66):
        x = int(IMAGE_SIDE * frac)
        draw.rectangle([x - 3, 0, x + 3, IMAGE_SIDE], fill=max(40, base - 60))

    lo, hi, darkness = _CRACKS[raw_label]
    for _ in range(int(rng.integers(lo, hi + 1)) if hi else 0):
        x0, y0 = rng.integers(10, IMAGE_SIDE - 10, 2)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.integers(80, 260)
        x1 = int(np.clip(x0 + length * np.cos(angle), 0, IMAGE_SIDE - 1))
        y1 = int(np.clip(y0 + length * np.sin(angle), 0, IMAGE_SIDE - 1))
        width = int(rng.integers(3, 9))
        draw.line([int(x0), int(y0), x1, y1], fill=max(10, base - darkness), width=width)
        if raw_label == "P10" and rng.random() < 0.5:
            # Electrically dead region: a dark blob off one crack end.
            r = int(rng.integers(20, 60))
            draw.ellipse([x1 - r, y1 - r, x1 + r, y1 + r], fill=20)
    return img


def generate_elpv_fixture(root, counts: dict | None = None, seed: int = 0) -> Path:
    """Write an ELPV-layout tree (labels.csv plus images/) and return its root."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    counts = PUBLIC_COUNTS if counts is None else counts
    rng = np.random.default_rng(seed)

    lines = []
    index = 0
    for (module_type, raw_label), n in sorted(counts.items()):
        prob = RAW_LABEL_PROBS[raw_label]
        for _ in range(n):
            rel = f"images/cell{index:04d}.png"
            _cell_image(rng, module_type, raw_label).save(root / rel)
            lines.append(f"{rel} {prob:.10f} {module_type}")
            index += 1
    (root / "labels.csv").write_text("\n".join(lines) + "\n", "utf-8")
    return root
