"""Scenario serialization: JSON Lines corpora and a length-prefixed binary container.

Binary layout (little-endian)::

    b"MPSC" | u32 version | u64 payload length | payload (UTF-8 JSON)

The JSON payload is the same record written to a corpus line.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path as FsPath
from typing import Iterable, Iterator

import numpy as np

from .types import AgentTrack, Centerline, MapPolyline, RegionPolygon, Scenario

MAGIC = b"MPSC"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class ScenarioFormatError(ValueError):
    """Raised for malformed, truncated, or incompatible scenario data."""


def _track_to_dict(t: AgentTrack) -> dict:
    return {
        "position": t.position.tolist(),
        "heading": t.heading.tolist(),
        "velocity": t.velocity.tolist(),
        "valid": t.valid.astype(int).tolist(),
        "size": list(t.size),
        "category": int(t.category),
    }


def _track_from_dict(d: dict) -> AgentTrack:
    return AgentTrack(
        np.array(d["position"], dtype=np.float64).reshape(-1, 2),
        np.array(d["heading"], dtype=np.float64),
        np.array(d["velocity"], dtype=np.float64).reshape(-1, 2),
        np.array(d["valid"], dtype=bool),
        tuple(d["size"]),
        d["category"],
    )


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "seed": int(s.seed),
        "topology": s.topology,
        "history_steps": s.history_steps,
        "future_steps": s.future_steps,
        "dt": s.dt,
        "av": _track_to_dict(s.av),
        "agents": [_track_to_dict(a) for a in s.agents],
        "map": [{"points": p.points.tolist(), "kind": int(p.kind)} for p in s.map_polylines],
        "centerlines": [c.points.tolist() for c in s.centerlines],
        "goal": s.goal.tolist(),
        "drivable_region": [
            {"exterior": r.exterior.tolist(), "holes": [h.tolist() for h in r.holes]} for r in s.drivable_region
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    version = d.get("version") if isinstance(d, dict) else None
    if version != SCHEMA_VERSION:
        raise ScenarioFormatError(f"unsupported scenario schema version {version!r} (expected {SCHEMA_VERSION})")
    try:
        return Scenario(
            av=_track_from_dict(d["av"]),
            agents=[_track_from_dict(a) for a in d["agents"]],
            map_polylines=[MapPolyline(np.array(p["points"], dtype=np.float64), p["kind"]) for p in d["map"]],
            centerlines=[Centerline(np.array(c, dtype=np.float64)) for c in d["centerlines"]],
            goal=np.array(d["goal"], dtype=np.float64),
            drivable_region=[
                RegionPolygon(np.array(r["exterior"], dtype=np.float64), [np.array(h, dtype=np.float64) for h in r["holes"]])
                for r in d["drivable_region"]
            ],
            seed=int(d["seed"]),
            topology=d["topology"],
            history_steps=int(d["history_steps"]),
            future_steps=int(d["future_steps"]),
            dt=float(d["dt"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"malformed scenario record: {exc}") from exc


def serialize_scenario(s: Scenario) -> bytes:
    payload = json.dumps(scenario_to_dict(s), separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, SCHEMA_VERSION, len(payload)) + payload


def load_scenario(data: bytes) -> Scenario:
    if len(data) < _HEADER.size:
        raise ScenarioFormatError(f"truncated header: {len(data)} bytes")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ScenarioFormatError(f"bad magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise ScenarioFormatError(f"unsupported container version {version} (expected {SCHEMA_VERSION})")
    body = data[_HEADER.size:]
    if length != len(body):
        raise ScenarioFormatError(f"length prefix {length} does not match payload size {len(body)}")
    try:
        record = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ScenarioFormatError(f"payload is not valid JSON: {exc}") from exc
    return scenario_from_dict(record)


def write_corpus(path, scenarios: Iterable[Scenario]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_dict(s), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_corpus(path) -> Iterator[Scenario]:
    path = FsPath(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScenarioFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                yield scenario_from_dict(record)
            except ScenarioFormatError as exc:
                raise ScenarioFormatError(f"{path}:{lineno}: {exc}") from exc


def read_corpus(path) -> list[Scenario]:
    return list(iter_corpus(path))
