"""Deterministic CSV/JSON writers; every file carries the config hash and version."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    if isinstance(v, float) or hasattr(v, "dtype"):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f"{f:.17g}"
    return str(v)


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, numpy scalars plain Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    if isinstance(obj, complex):
        return [_clean(obj.real), _clean(obj.imag)]
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return float(f"{obj:.17g}")
    return obj


class ReportWriter:
    def __init__(self, out_dir, config: dict):
        self.out_dir = Path(out_dir)
        self.hash = config_hash(config)
        self.written: list = []

    @property
    def header(self) -> str:
        return f"magdirac {__version__} config_sha256={self.hash}"

    def _path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.written.append(p.name)
        return p

    def csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
        p = self._path(name)
        with open(p, "w", newline="\n", encoding="ascii") as fh:
            fh.write(f"# {self.header}\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        return p

    def json(self, name: str, payload: dict) -> Path:
        p = self._path(name)
        doc = {"config_sha256": self.hash, "version": __version__, **_clean(payload)}
        with open(p, "w", newline="\n", encoding="ascii") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return p
