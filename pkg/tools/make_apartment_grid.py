"""Regenerate src/slim/data/apartment_grid.txt (10 m x 11 m, 0.1 m cells)."""

from pathlib import Path

import numpy as np

RES = 0.1
NX, NY = 100, 110


def build() -> np.ndarray:
    occ = np.zeros((NY, NX), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    occ[:, 50] = True          # x = 5.0 m
    occ[55, :] = True          # y = 5.5 m

    def door_v(y0, y1):
        occ[int(y0 / RES):int(y1 / RES), 50] = False

    def door_h(x0, x1):
        occ[55, int(x0 / RES):int(x1 / RES)] = False

    door_v(6.5, 7.5)   # kitchen <-> living room
    door_h(3.5, 4.5)   # office <-> kitchen
    door_h(5.5, 6.5)   # bedroom <-> living room
    door_v(3.5, 4.5)   # office <-> bedroom
    return occ


def main():
    occ = build()
    rows = ["".join("#" if c else "." for c in row) for row in occ[::-1]]
    out = Path(__file__).resolve().parents[1] / "src" / "slim" / "data" / "apartment_grid.txt"
    out.write_text(f"resolution {RES:g}\n" + "\n".join(rows) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
