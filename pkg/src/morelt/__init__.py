"""Model rebalancing for long-tailed recognition on small numpy MLPs.

Each weight matrix is split into a full-rank general part and a low-rank
tail part; a prior-weighted penalty keeps the tail part quiet on frequent
classes, and the two parts are fused into one matrix for inference.
"""

import json
from pathlib import Path

__version__ = "0.1.0"

SCHEMA_DIR = Path(__file__).parent / "schemas"


def load_schema(name):
    """JSON schema shipped with the package, e.g. ``load_schema("checkpoint")``."""
    with open(SCHEMA_DIR / f"{name}.schema.json", encoding="utf-8") as f:
        return json.load(f)
