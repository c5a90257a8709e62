"""Regenerate the bundled per-script fonts by subsetting DejaVu Sans.

Run from the repository root:

    python tools/make_fonts.py /usr/share/fonts/truetype/dejavu/DejaVuSans.ttf
"""

import sys
from pathlib import Path

from fontTools import subset

OUT = Path(__file__).resolve().parents[1] / "src" / "pixelrep" / "fonts"

# codepoint ranges per output face; .notdef is always retained
RANGES = {
    "latin": [(0x20, 0x7F), (0xA0, 0x250), (0x300, 0x370), (0x1E00, 0x1F00), (0x2010, 0x2030)],
    "cyrillic": [(0x400, 0x530)],
    "greek": [(0x370, 0x400), (0x1F00, 0x2000)],
    "hebrew": [(0x590, 0x600)],
}


def main(src):
    OUT.mkdir(parents=True, exist_ok=True)
    for name, ranges in RANGES.items():
        unicodes = [cp for lo, hi in ranges for cp in range(lo, hi)]
        opts = subset.Options()
        opts.notdef_outline = True
        opts.layout_features = []
        opts.hinting = True
        opts.name_IDs = ["*"]
        font = subset.load_font(src, opts)
        sub = subset.Subsetter(opts)
        sub.populate(unicodes=unicodes)
        sub.subset(font)
        dest = OUT / f"{name}.ttf"
        subset.save_font(font, str(dest), opts)
        print(dest, len(font.getBestCmap()))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf")
