"""Regenerate the bundled world files (deterministic)."""
import math
from pathlib import Path

import numpy as np

from echoscape.sim import Reflector, ReflectorMap, save_world

OUT = Path(__file__).resolve().parents[1] / "src" / "echoscape" / "worlds"


def arena(seed=7):
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = -1.0, -4.0, 11.0, 4.0
    refl = []
    # corridor of posts
    for x in np.arange(2.0, 8.5 + 1e-9, 0.5):
        for y in (-0.8, 0.8):
            refl.append(Reflector(round(float(x), 3), y, 0.05, 1.0))
    # perimeter walls as dense weak scatterers
    step = 0.3
    for x in np.arange(xmin, xmax + 1e-9, step):
        refl.append(Reflector(round(float(x), 3), ymin, 0.0, 0.3))
        refl.append(Reflector(round(float(x), 3), ymax, 0.0, 0.3))
    for y in np.arange(ymin + step, ymax - 1e-9, step):
        refl.append(Reflector(xmin, round(float(y), 3), 0.0, 0.3))
        refl.append(Reflector(xmax, round(float(y), 3), 0.0, 0.3))
    # clutter away from the corridor, spawn area and waypoint
    placed = 0
    while placed < 36:
        x = float(rng.uniform(xmin + 0.4, xmax - 0.4))
        y = float(rng.uniform(ymin + 0.4, ymax - 0.4))
        if abs(y) < 2.0 and -0.8 < x < 10.6:
            continue
        if any(math.hypot(x - r.x, y - r.y) < 0.6 for r in refl if r.radius > 0):
            continue
        refl.append(Reflector(round(x, 3), round(y, 3), round(float(rng.uniform(0.03, 0.15)), 3),
                              round(float(rng.uniform(0.3, 1.0)), 3)))
        placed += 1
    return ReflectorMap(
        reflectors=refl,
        bounds=(xmin, ymin, xmax, ymax),
        spawn_boxes=[(-0.3, 0.1, 0.7, 0.6, -0.4, 0.4), (-0.3, -0.6, 0.7, -0.1, -0.4, 0.4)],
        waypoint=(9.6, 0.0, 0.4),
        corridor={"start": [2.0, 0.0], "end": [8.5, 0.0], "half_width": 0.8},
        name="arena",
    )


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    save_world(arena(), OUT / "arena.json")
    print("wrote", OUT / "arena.json")
