"""Writers for summary trace and class-probability files read by the wqe core."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SCHEMA_VERSION = 1
ARCHITECTURES = ("decoder_only", "encoder_decoder")

_STEP_KEYS = (
    "surprisal",
    "entropy",
    "mcd_avg",
    "mcd_var",
    "ll_surprisal",
    "ll_kl",
    "pred_depth",
    "attn_entropy_avg",
    "attn_entropy_max",
    "blood",
)


@dataclass
class ModelMeta:
    num_layers: int
    num_heads: int
    vocab_size: int
    architecture: str = "decoder_only"

    def to_json(self) -> dict:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "architecture": self.architecture,
        }


@dataclass
class Token:
    text: str
    start: int = 0
    end: int = 0
    special: bool = False

    def to_json(self) -> dict:
        if self.special:
            return {"text": self.text, "special": True}
        return {"text": self.text, "special": False, "start": self.start, "end": self.end}


@dataclass
class SummaryTrace:
    segment_id: str
    model_meta: ModelMeta
    tokens: list[Token]
    # One dict per non-special token; keys from _STEP_KEYS, absent = unavailable.
    steps: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        steps = []
        for s in self.steps:
            unknown = set(s) - set(_STEP_KEYS)
            if unknown:
                raise ValueError(f"{self.segment_id}: unknown step keys {sorted(unknown)}")
            steps.append({k: s[k] for k in _STEP_KEYS if s.get(k) is not None})
        return {
            "segment_id": self.segment_id,
            "model_meta": self.model_meta.to_json(),
            "tokens": [t.to_json() for t in self.tokens],
            "steps": steps,
        }


@dataclass
class ClassProbs:
    segment_id: str
    tokens: list[Token]  # scorer tokens, none special
    probs: list[Sequence[float]]  # rows of (ok, minor, major, critical)

    def to_json(self) -> dict:
        if len(self.probs) != len(self.tokens):
            raise ValueError(f"{self.segment_id}: {len(self.probs)} rows for {len(self.tokens)} tokens")
        rows = []
        for row in self.probs:
            row = [float(x) for x in row]
            if len(row) != 4 or not math.isclose(sum(row), 1.0, abs_tol=1e-3):
                raise ValueError(f"{self.segment_id}: class-probability rows need 4 values summing to 1")
            rows.append(row)
        return {
            "segment_id": self.segment_id,
            "tokens": [{"text": t.text, "start": t.start, "end": t.end} for t in self.tokens],
            "probs": rows,
        }


def _atomic_write(path: Path, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _dump(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def write_summary_traces(path: Path, traces: Sequence[SummaryTrace]) -> None:
    header = {"schema_version": SCHEMA_VERSION, "kind": "summary", "num_segments": len(traces)}
    _atomic_write(path, [_dump(header)] + [_dump(t.to_json()) for t in traces])


def write_class_probs(path: Path, records: Sequence[ClassProbs]) -> None:
    _atomic_write(path, [_dump(r.to_json()) for r in records])


def read_summary_traces(path: Path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    header = lines[0]
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {header.get('schema_version')}")
    return header, lines[1:]

