"""Small shared helpers for deterministic file output."""

import json
import os

import numpy as np

# 17 significant digits round-trip IEEE doubles exactly.
FLOAT_FMT = "%.17g"


def fmt_float(x):
    return FLOAT_FMT % float(x)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


class _JsonEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating,)):
            return float(obj)
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.bool_,)):
            return bool(obj)
        return super().default(obj)


def write_json(path, obj):
    """Write JSON with sorted keys and no environment-dependent content."""
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, cls=_JsonEncoder)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
