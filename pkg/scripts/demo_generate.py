"""Write a synthetic multi-layer demo project and run ``gsavatar generate`` on it.

    python scripts/demo_generate.py /tmp/demo --layers 3
"""

import argparse
import sys
from pathlib import Path

from gsavatar.cli import main
from gsavatar.synthetic import write_demo_project


def run():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root", type=Path)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--iterations", type=int, default=40, help="coarse and fine iterations each")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    cfg = write_demo_project(a.root, n_layers=a.layers, resolution=(a.resolution, a.resolution),
                             coarse_iterations=a.iterations, fine_iterations=a.iterations,
                             seed=a.seed)
    code = main(["-v", "generate", "--config", str(cfg)])
    if code == 0:
        asset = a.root / "out" / "avatar.gsav"
        main(["inspect", str(asset)])
    return code


if __name__ == "__main__":
    sys.exit(run())
