"""Access to the example models and datasets shipped with the package."""

from importlib import resources
from pathlib import Path

_MODELS = {
    "pd": "political_democracy.lav",
    "hs": "holzinger_swineford.lav",
    "growth": "growth_milcs.lav",
}
_DATA = {
    "pd": "political_democracy.csv",
    "hs": "holzinger_swineford.csv",
    "growth": "growth_milcs.csv",
}


def _asset(filename: str) -> Path:
    path = Path(str(resources.files("semburn").joinpath("assets", filename)))
    if not path.exists():
        raise FileNotFoundError(f"bundled asset missing: {filename}")
    return path


def bundled_model(name: str) -> Path:
    """Path to a bundled model file ('pd', 'hs', or 'growth')."""
    if name not in _MODELS:
        raise KeyError(f"no bundled model {name!r}; choose from {sorted(_MODELS)}")
    return _asset(_MODELS[name])


def bundled_data(name: str) -> Path:
    """Path to the synthetic dataset matching a bundled model."""
    if name not in _DATA:
        raise KeyError(f"no bundled dataset {name!r}; choose from {sorted(_DATA)}")
    return _asset(_DATA[name])
