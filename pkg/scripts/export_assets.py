#!/usr/bin/env python3
"""
Asset exporter for flowmc
Writes the shipped procedural targets as 16-bit PGM files into assets/
"""

import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from flowmc.bench import PROCEDURAL_TARGETS, SHIPPED_TARGETS
from flowmc.formats import write_pgm


def export_assets(resolution: int = 64, assets_dir: Path = None):
    """Write every shipped target at the given resolution"""
    assets_dir = assets_dir or Path(__file__).parent.parent / "assets"
    assets_dir.mkdir(exist_ok=True)

    for name in SHIPPED_TARGETS:
        path = assets_dir / f"{name}.pgm"
        try:
            write_pgm(path, PROCEDURAL_TARGETS[name](resolution))
            print(f"[Assets] ✓ {path.name} ({resolution}x{resolution})")
        except Exception as e:
            print(f"[Assets] ✗ {path.name} failed: {str(e)}")
            sys.exit(1)

    print("[Assets] All targets exported!")


if __name__ == "__main__":
    export_assets(int(sys.argv[1]) if len(sys.argv) > 1 else 64)
