"""Paths to the data files bundled with the package."""

from pathlib import Path

_ROOT = Path(__file__).resolve().parent / "data"


def data_path(*parts) -> Path:
    p = _ROOT.joinpath(*parts)
    if not p.exists():
        raise FileNotFoundError(f"bundled data file missing: {p}")
    return p
