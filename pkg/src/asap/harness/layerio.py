"""JSON persistence for compiled layers.

Floats are written with Python's shortest round-trip repr, so a saved layer
reloads bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..calibration import CompiledLayer


def save_layer(layer: CompiledLayer, path) -> None:
    Path(path).write_text(json.dumps(layer.to_dict(), indent=1))


def load_layer(path) -> CompiledLayer:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return CompiledLayer.from_dict(doc)
