"""Fingerprint dictionaries over a (T1, T2) grid and pattern matching.

Atoms are simulated with unit M0 and stored row-wise as flattened 2N real
vectors ``[x_1, y_1, x_2, y_2, ...]``. Matching picks the atom with the
largest normalized correlation <d, s>/||d|| and fits M0 by least squares,
which is the maximum-likelihood estimate on the grid under white Gaussian
noise.

File format (all integers little-endian)::

    magic     8 bytes   b"MRFDICT\\0"
    version   uint32
    n         uint32    schedule length (trajectories have 2n values)
    count     uint64    number of atoms
    meta_len  uint32    length of the UTF-8 JSON metadata that follows
    meta      meta_len bytes (grid spec, schedule, ensemble size)
    atoms     count x 2 float64 (T1, T2)
    trajs     count x 2n float64

A JSON sidecar ``<path>.json`` repeats the metadata for human inspection.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bloch import AcqSchedule, IsochromatEnsemble, simulate_many

log = logging.getLogger(__name__)

MAGIC = b"MRFDICT\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQI")
NORM_FLOOR = 1e-12
# scores this close to the best one count as ties; identical atoms need not
# produce bit-identical BLAS dot products
TIE_RTOL = 1e-12


class DegenerateAtom(ValueError):
    """An atom simulated to (numerically) zero signal."""


class DictionaryFormatError(ValueError):
    """A dictionary file is malformed or of an unsupported version."""


@dataclass(frozen=True)
class GridSpec:
    """Piecewise-uniform 1-D grids as ``(start, end, step)`` segments in ms.

    The first segment starts at ``start``. Every later segment continues the
    arithmetic sequence anchored at the previous segment's last value, so
    ``(20, 1500, 10), (1501, 3000, 30)`` gives ..., 1490, 1500, 1530, 1560, ...
    """

    t1_segments: tuple = ((20.0, 1500.0, 10.0), (1501.0, 3000.0, 30.0))
    t2_segments: tuple = ((30.0, 200.0, 1.0), (201.0, 500.0, 5.0))

    def __post_init__(self):
        for name in ("t1_segments", "t2_segments"):
            segs = tuple(tuple(float(v) for v in s) for s in getattr(self, name))
            object.__setattr__(self, name, segs)
            if not segs:
                raise ValueError(f"{name} is empty")
            prev_end = -math.inf
            for s in segs:
                if len(s) != 3:
                    raise ValueError(f"{name}: segments are (start, end, step)")
                start, end, step = s
                if not step > 0:
                    raise ValueError(f"{name}: step must be > 0")
                if end < start:
                    raise ValueError(f"{name}: end before start in {s}")
                if start <= prev_end:
                    raise ValueError(f"{name}: segments overlap or are out of order")
                prev_end = end

    def to_dict(self) -> dict:
        return {k: [list(s) for s in v] for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(map(tuple, d["t1_segments"])), tuple(map(tuple, d["t2_segments"])))


def segment_values(segments) -> np.ndarray:
    """Enumerate a 1-D piecewise grid (see :class:`GridSpec`)."""
    parts = []
    anchor = None
    for start, end, step in segments:
        base = start if anchor is None else anchor
        # small slack so that e.g. 0.1-ms steps do not lose their endpoint
        k0 = math.ceil((start - base) / step - 1e-9)
        k1 = math.floor((end - base) / step + 1e-9)
        if k1 >= k0:
            vals = base + step * np.arange(k0, k1 + 1)
            parts.append(vals)
            anchor = float(vals[-1])
        elif anchor is None:
            anchor = start
    if not parts:
        raise ValueError("grid is empty")
    return np.concatenate(parts)


def build_grid(spec: GridSpec) -> np.ndarray:
    """Cartesian product of the T1 and T2 grids, shape (K, 2), T1-major."""
    t1 = segment_values(spec.t1_segments)
    t2 = segment_values(spec.t2_segments)
    g1, g2 = np.meshgrid(t1, t2, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


@dataclass(frozen=True)
class Estimate:
    t1: float
    t2: float
    m0: float
    score: float
    index: int = -1


def _readonly(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Immutable set of unit-M0 fingerprints and their (T1, T2) labels."""

    atoms: np.ndarray
    trajectories: np.ndarray
    norms: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "atoms", _readonly(self.atoms))
        object.__setattr__(self, "trajectories", _readonly(self.trajectories))
        object.__setattr__(self, "norms", _readonly(self.norms))
        k = self.atoms.shape[0]
        if self.atoms.shape != (k, 2) or self.trajectories.shape[0] != k or self.norms.shape != (k,):
            raise ValueError("inconsistent dictionary shapes")

    def __len__(self) -> int:
        return self.atoms.shape[0]

    @property
    def signal_length(self) -> int:
        return self.trajectories.shape[1]

    def scores(self, signals) -> np.ndarray:
        """Normalized correlations, shape (K,) or (K, B) for a batch."""
        s = np.asarray(signals, dtype=float)
        if s.ndim == 1:
            return self.trajectories @ s / self.norms
        return (self.trajectories @ s.T) / self.norms[:, None]


def generate(
    schedule: AcqSchedule,
    grid,
    ensemble: IsochromatEnsemble,
    grid_spec: GridSpec | None = None,
) -> Dictionary:
    """Simulate every (T1, T2) in ``grid`` with M0 = 1."""
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    if grid.shape[0] == 0:
        raise ValueError("grid is empty")
    t0 = time.perf_counter()
    sig = simulate_many(schedule, grid[:, 0], grid[:, 1], 1.0, ensemble)
    traj = sig.reshape(grid.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", traj, traj))
    bad = np.flatnonzero(~(norms >= NORM_FLOOR))
    if bad.size:
        t1, t2 = grid[bad[0]]
        raise DegenerateAtom(f"{bad.size} atoms have zero signal, first at T1={t1}, T2={t2}")
    dt = time.perf_counter() - t0
    log.info("generated %d atoms in %.1f s (%.0f atoms/s)", len(grid), dt, len(grid) / max(dt, 1e-9))
    meta = {
        "grid_spec": grid_spec.to_dict() if grid_spec is not None else None,
        "nv": ensemble.nv,
        "schedule": {
            "alpha": schedule.alpha.tolist(),
            "phi": schedule.phi.tolist(),
            "te": schedule.te.tolist(),
            "tr": schedule.tr.tolist(),
        },
    }
    return Dictionary(grid, traj, norms, meta)


def _winners(scores: np.ndarray) -> np.ndarray:
    """Lowest index among the (numerically) best scores, per column."""
    best = scores.max(axis=0)
    return np.argmax(scores >= best - TIE_RTOL * np.abs(best), axis=0)


def _flat(signal) -> np.ndarray:
    return np.asarray(signal, dtype=float).reshape(-1)


def match(signal, dictionary: Dictionary) -> Estimate:
    """Maximum normalized correlation with least-squares M0 (clamped at 0).

    Ties (scores within ``TIE_RTOL`` of the best) resolve to the lowest
    atom index.
    """
    s = _flat(signal)
    if s.size != dictionary.signal_length:
        raise ValueError(f"signal has {s.size} values, dictionary atoms have {dictionary.signal_length}")
    scores = dictionary.scores(s)
    k = int(_winners(scores))
    d = dictionary.trajectories[k]
    m0 = max(0.0, float(np.dot(d, s) / np.dot(d, d)))
    t1, t2 = dictionary.atoms[k]
    return Estimate(float(t1), float(t2), m0, float(scores[k]), k)


def match_batch(signals, dictionary: Dictionary, chunk: int = 256) -> np.ndarray:
    """Match many signals; returns a (B, 4) array of (t1, t2, m0, score)."""
    s = np.asarray(signals, dtype=float)
    s = s.reshape(s.shape[0], -1)
    if s.shape[1] != dictionary.signal_length:
        raise ValueError("signal length does not match the dictionary")
    out = np.empty((s.shape[0], 4))
    d = dictionary.trajectories
    for lo in range(0, s.shape[0], chunk):
        blk = s[lo : lo + chunk]
        scores = dictionary.scores(blk)
        k = _winners(scores)
        ip = np.einsum("ij,ij->i", d[k], blk)
        dd = np.einsum("ij,ij->i", d[k], d[k])
        out[lo : lo + chunk, 0:2] = dictionary.atoms[k]
        out[lo : lo + chunk, 2] = np.maximum(0.0, ip / dd)
        out[lo : lo + chunk, 3] = scores[k, np.arange(k.size)]
    return out


def save(dictionary: Dictionary, path) -> None:
    """Write the binary container plus a ``.json`` sidecar."""
    path = Path(path)
    k, length = dictionary.trajectories.shape
    meta = json.dumps(dictionary.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, length // 2, k, len(meta)))
        fh.write(meta)
        fh.write(dictionary.atoms.astype("<f8").tobytes())
        fh.write(dictionary.trajectories.astype("<f8").tobytes())
    sidecar = dict(dictionary.meta, format_version=FORMAT_VERSION, n=length // 2, count=k)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load(path) -> Dictionary:
    """Read a container written by :func:`save`; norms are recomputed."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DictionaryFormatError("truncated header")
        magic, version, n, k, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DictionaryFormatError("not a dictionary file")
        if version != FORMAT_VERSION:
            raise DictionaryFormatError(f"unsupported version {version}")
        meta = json.loads(fh.read(mlen).decode("utf-8"))
        atoms = np.frombuffer(fh.read(16 * k), dtype="<f8")
        traj = np.frombuffer(fh.read(16 * n * k), dtype="<f8")
        if atoms.size != 2 * k or traj.size != 2 * n * k or fh.read(1):
            raise DictionaryFormatError("payload size does not match header")
    atoms = atoms.astype(np.float64).reshape(k, 2)
    traj = traj.astype(np.float64).reshape(k, 2 * n)
    norms = np.sqrt(np.einsum("ij,ij->i", traj, traj))
    return Dictionary(atoms, traj, norms, meta)
