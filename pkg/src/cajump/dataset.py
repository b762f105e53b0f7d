"""Labelled snapshot datasets: generation, the ``CADS`` container, splitting, export.

Container layout (all integers little-endian)::

    b"CADS"  u16 version  u32 sample_count
    per sample: u16 height  u16 width  u8 label  u16 iterations
                height rows of ceil(width / 8) bytes, cells packed MSB-first

Class ``k`` is the jump parameter ``sigma = k + 1``.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
import math
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from cajump import __version__, pgm
from cajump.ca import SimConfig, simulate
from cajump.rng import make_rng, mix_seed

log = logging.getLogger(__name__)

MAGIC = b"CADS"
VERSION = 1
NUM_CLASSES = 10
_HEADER = struct.Struct("<4sHI")
_SAMPLE = struct.Struct("<HHBH")


class DatasetFormatError(Exception):
    code = 10


class BadMagicError(DatasetFormatError):
    code = 11


class UnsupportedVersionError(DatasetFormatError):
    code = 12


class TruncatedError(DatasetFormatError):
    code = 13

    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class CorruptSampleError(DatasetFormatError):
    code = 14


class EmptySpecError(ValueError):
    pass


def sigma_to_class(sigma: float) -> int:
    k = int(round(sigma)) - 1
    if k != sigma - 1 or not 0 <= k < NUM_CLASSES:
        raise ValueError(f"jump parameter {sigma} has no class; expected an integer in 1..{NUM_CLASSES}")
    return k


def class_to_sigma(label: int) -> float:
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"class index {label} out of range 0..{NUM_CLASSES - 1}")
    return float(label + 1)


@dataclass(eq=False)
class Sample:
    grid: np.ndarray
    label: int
    iterations: int
    porosity: float | None = None
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.label == other.label
            and self.iterations == other.iterations
            and self.grid.shape == other.grid.shape
            and np.array_equal(self.grid, other.grid)
        )


@dataclass
class DatasetFile:
    samples: list[Sample] = field(default_factory=list)
    spec: "DatasetSpec | None" = None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, DatasetFile):
            return NotImplemented
        return self.samples == other.samples

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "DatasetFile":
        return DatasetFile([self.samples[i] for i in indices], self.spec)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, len(self.samples))]
        for s in self.samples:
            h, w = s.grid.shape
            parts.append(_SAMPLE.pack(h, w, s.label, s.iterations))
            parts.append(np.packbits(s.grid.astype(np.uint8), axis=1).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DatasetFile":
        if len(data) < _HEADER.size:
            if not MAGIC.startswith(data[:4]):
                raise BadMagicError(f"bad magic {data[:4]!r}")
            raise TruncatedError("file shorter than its header")
        magic, version, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported format version {version}")
        pos = _HEADER.size
        samples = []
        for i in range(count):
            if pos + _SAMPLE.size > len(data):
                raise TruncatedError(f"truncated in header of sample {i}", index=i)
            h, w, label, iters = _SAMPLE.unpack_from(data, pos)
            pos += _SAMPLE.size
            if h < 1 or w < 1:
                raise CorruptSampleError(f"sample {i} has empty shape {h}x{w}")
            if label >= NUM_CLASSES:
                raise CorruptSampleError(f"sample {i} has label {label} outside 0..{NUM_CLASSES - 1}")
            stride = (w + 7) // 8
            nbytes = h * stride
            if pos + nbytes > len(data):
                raise TruncatedError(f"truncated in cell data of sample {i}", index=i)
            packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos).reshape(h, stride)
            grid = np.unpackbits(packed, axis=1, count=w)
            pos += nbytes
            samples.append(Sample(grid, int(label), int(iters)))
        if pos != len(data):
            raise CorruptSampleError(f"{len(data) - pos} trailing bytes after sample {count - 1}")
        return cls(samples)


@dataclass(frozen=True)
class DatasetSpec:
    porosity: float = 0.7
    domain_sizes: tuple[int, ...] = (25, 50, 100, 150)
    iteration_counts: tuple[int, ...] = (50,)
    sigma_classes: tuple[float, ...] = tuple(float(s) for s in range(1, 11))
    samples_per_class: int = 1000
    base_seed: int = 0

    def __post_init__(self):
        for name in ("domain_sizes", "iteration_counts", "sigma_classes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for s in self.sigma_classes:
            sigma_to_class(s)

    def keys(self) -> Iterator[tuple[int, int, float, int]]:
        """(n, iterations, sigma, index) in file order."""
        return itertools.product(
            self.domain_sizes, self.iteration_counts, self.sigma_classes, range(self.samples_per_class)
        )

    def __len__(self):
        return (
            len(self.domain_sizes) * len(self.iteration_counts) * len(self.sigma_classes) * self.samples_per_class
        )

    def sample_seed(self, n: int, iterations: int, sigma: float, index: int) -> int:
        return mix_seed(self.base_seed, n, iterations, sigma_to_class(sigma), index)

    def sim_config(self, n: int, iterations: int, sigma: float, index: int) -> SimConfig:
        return SimConfig(n, self.porosity, sigma, iterations, self.sample_seed(n, iterations, sigma, index))

    def to_manifest(self) -> str:
        lines = {
            "tool": f"cajump {__version__}",
            "porosity": repr(self.porosity),
            "domain_sizes": ",".join(map(str, self.domain_sizes)),
            "iteration_counts": ",".join(map(str, self.iteration_counts)),
            "sigma_classes": ",".join(repr(s) for s in self.sigma_classes),
            "samples_per_class": str(self.samples_per_class),
            "base_seed": str(self.base_seed),
            "samples": str(len(self)),
        }
        return "".join(f"{k}={v}\n" for k, v in lines.items())

    @classmethod
    def from_manifest(cls, text: str) -> "DatasetSpec":
        kv = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"manifest line without '=': {raw!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()

        def ints(key, default):
            return tuple(int(x) for x in kv[key].split(",")) if key in kv else default

        base = cls()
        return cls(
            porosity=float(kv.get("porosity", base.porosity)),
            domain_sizes=ints("domain_sizes", base.domain_sizes),
            iteration_counts=ints("iteration_counts", base.iteration_counts),
            sigma_classes=tuple(float(x) for x in kv["sigma_classes"].split(","))
            if "sigma_classes" in kv
            else base.sigma_classes,
            samples_per_class=int(kv.get("samples_per_class", base.samples_per_class)),
            base_seed=int(kv.get("base_seed", base.base_seed)),
        )


def paper_group(group: int, scale: float = 1.0, base_seed: int = 0) -> DatasetSpec:
    """Presets for the two experiment groups (porosity 0.7, 10 classes).

    ``scale`` multiplies the 1000 samples per class (floored, at least 10).
    """
    per_class = max(10, math.floor(1000 * scale)) if scale != 1.0 else 1000
    if group == 1:
        return DatasetSpec(0.7, (25, 50, 100, 150), (50,), samples_per_class=per_class, base_seed=base_seed)
    if group == 2:
        return DatasetSpec(0.7, (150,), (0, 5, 25, 50), samples_per_class=per_class, base_seed=base_seed)
    raise ValueError(f"unknown group {group}; expected 1 or 2")


def _simulate_one(spec: DatasetSpec, key) -> Sample:
    n, iters, sigma, index = key
    cfg = spec.sim_config(n, iters, sigma, index)
    lat = simulate(cfg)
    return Sample(np.array(lat.cells), sigma_to_class(sigma), iters, spec.porosity, cfg.seed)


def generate(spec: DatasetSpec, workers: int | None = None) -> DatasetFile:
    if not spec.sigma_classes or spec.samples_per_class < 1 or not spec.domain_sizes or not spec.iteration_counts:
        raise EmptySpecError("dataset spec yields no samples")
    workers = workers or int(os.environ.get("CAJUMP_THREADS", "1"))
    keys = list(spec.keys())
    log.info("generating %d samples with %d worker(s)", len(keys), workers)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(lambda k: _simulate_one(spec, k), keys, chunksize=64))
    else:
        samples = [_simulate_one(spec, k) for k in keys]
    return DatasetFile(samples, spec)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write(file: DatasetFile, path) -> None:
    path = Path(path)
    path.write_bytes(file.to_bytes())
    if file.spec is not None:
        manifest_path(path).write_text(file.spec.to_manifest())


def read(path) -> DatasetFile:
    """Read a container; seeds and porosity are restored from a sidecar manifest if present."""
    path = Path(path)
    ds = DatasetFile.from_bytes(path.read_bytes())
    mpath = manifest_path(path)
    if mpath.exists():
        spec = DatasetSpec.from_manifest(mpath.read_text())
        if len(spec) == len(ds):
            ds.spec = spec
            for s, (n, iters, sigma, idx) in zip(ds.samples, spec.keys()):
                s.porosity = spec.porosity
                s.seed = spec.sample_seed(n, iters, sigma, idx)
    return ds


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _allocate(m: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``m`` items; ties favour earlier parts."""
    raw = [f * m for f in fractions]
    counts = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: m - sum(counts)]:
        counts[i] += 1
    return counts


def split(file: DatasetFile, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified (class, resolution, iterations) split into train/val/test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    strata: dict[tuple, list[int]] = {}
    for i, s in enumerate(file.samples):
        strata.setdefault((s.label, s.n, s.iterations), []).append(i)
    nonzero = sum(f > 0 for f in fractions)
    parts: list[list[int]] = [[], [], []]
    rng = make_rng(seed)
    for key in sorted(strata):
        idx = strata[key]
        if len(idx) < nonzero:
            warnings.warn(f"stratum {key} has {len(idx)} samples; assigning all to train", stacklevel=2)
            parts[0].extend(idx)
            continue
        perm = [idx[j] for j in rng.permutation(len(idx))]
        a, b, _ = _allocate(len(idx), fractions)
        parts[0].extend(perm[:a])
        parts[1].extend(perm[a : a + b])
        parts[2].extend(perm[a + b :])
    return tuple(file.subset(sorted(p)) for p in parts)


def image_name(index: int, sample: Sample) -> str:
    return f"{index}_c{sample.label}_n{sample.n}_t{sample.iterations}.pgm"


def export_images(file: DatasetFile, directory) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(file.samples):
        pgm.write_pgm(s.grid, directory / image_name(i, s))
    return len(file.samples)
