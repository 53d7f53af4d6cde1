"""Synthetic radar-like sequences, event filtering and the on-disk event store.

Store layout::

    <root>/manifest.json
    <root>/events/<id>.bin     little-endian float32, frame-major [L, H, W, C]
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import ConfigError, EventSample, RadarSequence

SPLITS = ("train", "val", "test")


class StoreIntegrityError(RuntimeError):
    """Manifest and payload files disagree."""


class InsufficientEventsError(RuntimeError):
    pass


@dataclass
class SyntheticConfig:
    H: int = 32
    W: int = 32
    n_cells: tuple[int, int] = (2, 4)
    velocity: tuple[float, float] = (0.75, 0.5)
    jitter: float = 0.25
    growth_decay: float = 0.03
    birth_rate: float = 0.05
    death_rate: float = 0.02
    cell_sigma: tuple[float, float] = (2.0, 4.0)
    amplitude: tuple[float, float] = (0.5, 1.0)
    length: int = 25

    def __post_init__(self):
        self.n_cells = tuple(int(v) for v in self.n_cells)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.cell_sigma = tuple(float(v) for v in self.cell_sigma)
        self.amplitude = tuple(float(v) for v in self.amplitude)

    def validate(self) -> list[str]:
        errs = []
        if self.H < 16 or self.W < 16:
            errs.append("H and W must be >= 16")
        for name in ("birth_rate", "death_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0,1]")
        if min(self.cell_sigma) <= 0:
            errs.append("cell_sigma must be > 0")
        if self.n_cells[0] < 0 or self.n_cells[1] < self.n_cells[0]:
            errs.append("n_cells must be a non-negative (min, max) range")
        if self.jitter < 0 or self.growth_decay < 0:
            errs.append("jitter and growth_decay must be >= 0")
        if self.length < 1:
            errs.append("length must be >= 1")
        return errs

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {unknown}")
        cfg = cls(**doc)
        errs = cfg.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        return cfg


def _new_cell(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    # row, col, v_row, v_col, amplitude, sigma
    v = np.asarray(cfg.velocity) + cfg.jitter * rng.standard_normal(2)
    return np.array([
        rng.uniform(0, cfg.H), rng.uniform(0, cfg.W), v[0], v[1],
        rng.uniform(*cfg.amplitude), rng.uniform(*cfg.cell_sigma),
    ])


def render_cells(cells: Iterable[np.ndarray], H: int, W: int) -> np.ndarray:
    """Sum of periodic Gaussian cells on an H x W torus."""
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    out = np.zeros((H, W))
    for r, c, _, _, amp, sig in cells:
        dr = (rows - r + H / 2) % H - H / 2
        dc = (cols - c + W / 2) % W - W / 2
        out += amp * np.exp(-(dr ** 2 + dc ** 2) / (2 * sig ** 2))
    return out


def generate_sequence(cfg: SyntheticConfig, rng: np.random.Generator) -> RadarSequence:
    """Advected Gaussian cells with intensity random walks and birth/death."""
    n0 = int(rng.integers(cfg.n_cells[0], cfg.n_cells[1] + 1))
    cells = [_new_cell(cfg, rng) for _ in range(n0)]
    frames = np.empty((cfg.length, cfg.H, cfg.W, 1))
    for i in range(cfg.length):
        frames[i, :, :, 0] = render_cells(cells, cfg.H, cfg.W)
        survivors = []
        for cell in cells:
            if cfg.death_rate > 0 and rng.random() < cfg.death_rate:
                continue
            cell = cell.copy()
            cell[0] = (cell[0] + cell[2]) % cfg.H
            cell[1] = (cell[1] + cell[3]) % cfg.W
            if cfg.growth_decay > 0:
                cell[4] = max(cell[4] + cfg.growth_decay * rng.standard_normal(), 0.0)
            survivors.append(cell)
        cells = survivors
        if cfg.birth_rate > 0 and rng.random() < cfg.birth_rate:
            cells.append(_new_cell(cfg, rng))
    return RadarSequence(np.clip(frames, 0.0, 1.0).astype(np.float32), (0.0, 1.0))


def filter_events(s: RadarSequence, T_pixel: float, L_in: int = 5, L_out: int = 20,
                  start: int = 10, accept_factor: float = 0.5, extended: bool = False,
                  id_prefix: str = "") -> list[EventSample]:
    """Cut a continuous sequence into events whose mean intensity is high enough.

    A frame i with mean > T_pixel triggers the window s[i - L_in : i + L_out];
    it is kept when the sum of its frame means reaches
    (L_in + L_out) * T_pixel / 2, after which the scan jumps L_out frames.
    ``start`` and ``accept_factor`` may only differ from 10 and 1/2 with
    ``extended=True``.
    """
    if not extended and (start != 10 or accept_factor != 0.5):
        raise ValueError("start and accept_factor are fixed unless extended=True")
    frames = s.frames
    n = len(frames)
    if n <= L_in + L_out:
        raise ValueError(f"sequence of length {n} too short for L_in + L_out = {L_in + L_out}")
    means = frames.reshape(n, -1).mean(axis=1)
    events = []
    i = start
    while i + L_out < n:
        if means[i] > T_pixel and i - L_in >= 0:
            event_pixel = means[i - L_in:i + L_out].sum()
            if event_pixel >= (L_in + L_out) * T_pixel * accept_factor:
                x = RadarSequence(frames[i - L_in:i], s.data_range)
                y = RadarSequence(frames[i:i + L_out], s.data_range)
                events.append(EventSample(x, y, f"{id_prefix}{i - L_in}"))
                i += L_out
                continue
        i += 1
    return events


class EventStore:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def payload_path(self, event_id: str) -> Path:
        return self.root / "events" / f"{event_id}.bin"

    def read_manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise StoreIntegrityError(f"no manifest at {self.manifest_path}")
        return json.loads(self.manifest_path.read_text())

    def ids(self, split: str | None = None) -> list[str]:
        return [e["id"] for e in self.read_manifest()["events"] if split is None or e["split"] == split]


def _write_manifest(store: EventStore, doc: dict):
    store.root.mkdir(parents=True, exist_ok=True)
    tmp = store.manifest_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, store.manifest_path)


def save_events(store: EventStore, events: Iterable[EventSample], split: str = "train",
                meta: Mapping | None = None) -> EventStore:
    """Append events to the store under ``split``."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    (store.root / "events").mkdir(parents=True, exist_ok=True)
    doc = store.read_manifest() if store.manifest_path.exists() else {"events": []}
    if meta:
        doc.update(meta)
    seen = {e["id"] for e in doc["events"]}
    for ev in events:
        eid = str(ev.id)
        if eid in seen:
            raise ValueError(f"duplicate event id {eid!r}")
        seen.add(eid)
        full = np.concatenate([ev.x.frames, ev.y.frames]).astype("<f4")
        L, H, W, C = full.shape
        store.payload_path(eid).write_bytes(full.tobytes(order="C"))
        doc["events"].append({
            "id": eid, "split": split, "L": L, "H": H, "W": W, "C": C, "L_in": len(ev.x),
            "data_range": list(ev.x.data_range),
        })
    _write_manifest(store, doc)
    return store


def read_payload(store: EventStore, entry: Mapping) -> np.ndarray:
    path = store.payload_path(entry["id"])
    if not path.exists():
        raise StoreIntegrityError(f"missing payload for event {entry['id']!r}")
    raw = path.read_bytes()
    shape = (entry["L"], entry["H"], entry["W"], entry["C"])
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise StoreIntegrityError(
            f"payload {path.name} holds {len(raw)} bytes, manifest implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_events(store: EventStore, split: str) -> list[EventSample]:
    out = []
    for entry in store.read_manifest()["events"]:
        if entry["split"] != split:
            continue
        full = read_payload(store, entry)
        k = entry["L_in"]
        dr = tuple(entry["data_range"])
        out.append(EventSample(RadarSequence(full[:k], dr), RadarSequence(full[k:], dr), entry["id"]))
    return out


def make_benchmark(cfg: SyntheticConfig, counts: Mapping[str, int], root, seed: int = 0,
                   T_pixel: float = 0.05, L_in: int = 5, L_out: int = 8,
                   max_sequences: int | None = None) -> EventStore:
    """Generate sequences, filter them into events and write a store.

    Each split draws from its own child seed of ``seed``.  Raises
    InsufficientEventsError when a split cannot be filled within
    ``max_sequences`` raw sequences.
    """
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    store = EventStore(root)
    if store.manifest_path.exists():
        raise FileExistsError(f"store already exists at {store.root}")
    _write_manifest(store, {"events": [], "L_in": L_in, "L_out": L_out, "seed": seed,
                            "T_pixel": T_pixel, "synthetic": asdict(cfg)})
    (store.root / "events").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    for split, child in zip(SPLITS, children):
        want = int(counts.get(split, 0))
        rng = np.random.default_rng(child)
        got: list[EventSample] = []
        limit = max_sequences if max_sequences is not None else max(50, 20 * want)
        n_seq = 0
        while len(got) < want:
            if n_seq >= limit:
                raise InsufficientEventsError(
                    f"split {split!r}: only {len(got)} of {want} events after {n_seq} sequences")
            seq = generate_sequence(cfg, rng)
            for ev in filter_events(seq, T_pixel, L_in, L_out, id_prefix=f"{split}-{n_seq:05d}-"):
                if len(got) < want:
                    got.append(ev)
            n_seq += 1
        save_events(store, got, split)
    return store
