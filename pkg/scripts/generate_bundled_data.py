#!/usr/bin/env python3
"""Regenerate the bundled correspondence file from the example pair.

The file under src/rtwbc/data/ is a frozen calibration between the
example person skeleton and the default robot, kept in the package so
the CLI and the docs have a concrete correspondence file to point at.
Rerun this script if the default model or the example pose changes;
tests compare the bundled file against a fresh calibration.
"""

from pathlib import Path

from rtwbc.model import load_default_model
from rtwbc.retarget import save_correspondence
from rtwbc.sim import make_correspondence


def main() -> None:
    out = Path(__file__).resolve().parents[1] / "src/rtwbc/data/correspondence.toml"
    cfg = make_correspondence(load_default_model())
    save_correspondence(cfg, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
