"""Containers and on-disk format for paired slide / transcriptomics cohorts.

A dataset is a directory holding one binary file per sample plus a
``manifest.json`` with the keys ``version``, ``n_samples``, ``n_classes``,
``d_p``, ``k_genes``, ``gene_ids`` and ``sample_ids``. Sample order is the
order of ``sample_ids``.

Each ``sample_<id>.bin`` is little-endian:

    magic      4 bytes  b"MIRD"
    version    u32
    n_raw      u32      number of raw patches
    d_p        u32      patch feature dimension
    k          u32      number of genes
    features   n_raw * d_p * f32, row-major
    coords     n_raw * 2 * i32, (grid_row, grid_col) pairs
    expression k * f32
    subtype    i32
    time       f64      survival time
    event      u8       1 = observed, 0 = censored

Floats are stored exactly as held in memory (float32), so a write/read
round trip is bitwise lossless.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MIRD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIII")
_FOOTER = struct.Struct("<idB")

_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class DataError(Exception):
    """Base class for dataset problems."""


class ValidationError(DataError):
    """Content violates a dataset invariant."""


class FormatError(ValidationError):
    """A file on disk does not match the expected binary layout."""


@dataclass
class PatchFeatureBag:
    """Pre-extracted patch features of one slide with their grid coordinates."""

    slide_id: str
    features: np.ndarray  # (n_raw, d_p) float32
    coords: np.ndarray  # (n_raw, 2) int32, (grid_row, grid_col)


@dataclass
class TranscriptomicsProfile:
    """One sample's expression vector over a fixed gene panel."""

    sample_id: str
    values: np.ndarray  # (k,) float32
    gene_ids: list[str]


@dataclass
class SurvivalLabel:
    time: float
    event: bool


@dataclass
class PairedSample:
    bag: PatchFeatureBag
    rna: TranscriptomicsProfile
    subtype: int
    survival: SurvivalLabel


@dataclass
class Dataset:
    samples: list[PairedSample]
    n_classes: int
    d_p: int
    k_genes: int
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.bag.slide_id for s in self.samples]

    def subtypes(self) -> np.ndarray:
        return np.array([s.subtype for s in self.samples], dtype=np.int64)

    def survival_times(self) -> np.ndarray:
        return np.array([s.survival.time for s in self.samples], dtype=np.float64)

    def survival_events(self) -> np.ndarray:
        return np.array([s.survival.event for s in self.samples], dtype=bool)


def _as_f32(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")
    return arr


def validate_sample(sample: PairedSample, n_classes: int) -> None:
    bag, rna = sample.bag, sample.rna
    if not _ID_PATTERN.match(bag.slide_id):
        raise ValidationError(f"slide_id {bag.slide_id!r} is not filesystem-safe")
    if bag.slide_id != rna.sample_id:
        raise ValidationError(
            f"pairing mismatch: slide_id {bag.slide_id!r} vs rna sample_id {rna.sample_id!r}"
        )
    feats = np.asarray(bag.features)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValidationError(f"sample {bag.slide_id!r}: patch bag must be a non-empty matrix")
    if not np.all(np.isfinite(feats)):
        raise ValidationError(f"sample {bag.slide_id!r}: patch features contain non-finite values")
    coords = np.asarray(bag.coords)
    if coords.shape != (feats.shape[0], 2):
        raise ValidationError(f"sample {bag.slide_id!r}: coords shape {coords.shape} does not match patches")
    if len(np.unique(coords, axis=0)) != len(coords):
        raise ValidationError(f"sample {bag.slide_id!r}: duplicate patch coordinates")
    values = np.asarray(rna.values)
    if values.ndim != 1:
        raise ValidationError(f"sample {bag.slide_id!r}: expression must be a vector")
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"sample {bag.slide_id!r}: expression contains non-finite values")
    if len(rna.gene_ids) != values.shape[0]:
        raise ValidationError(f"sample {bag.slide_id!r}: gene panel size does not match expression length")
    if not 0 <= sample.subtype < n_classes:
        raise ValidationError(
            f"sample {bag.slide_id!r}: subtype {sample.subtype} outside [0, {n_classes})"
        )
    if not np.isfinite(sample.survival.time) or sample.survival.time <= 0:
        raise ValidationError(f"sample {bag.slide_id!r}: survival time must be positive and finite")


def validate_dataset(ds: Dataset) -> None:
    """Check every dataset invariant; raises ValidationError naming the offender."""
    if not ds.samples:
        raise ValidationError("dataset has no samples")
    if ds.n_classes < 2:
        raise ValidationError("n_classes must be at least 2")
    seen: set[str] = set()
    panel = ds.samples[0].rna.gene_ids
    if len(set(panel)) != len(panel):
        raise ValidationError("gene panel contains duplicate ids")
    for sample in ds.samples:
        validate_sample(sample, ds.n_classes)
        sid = sample.bag.slide_id
        if sid in seen:
            raise ValidationError(f"duplicate slide_id {sid!r}")
        seen.add(sid)
        if sample.bag.features.shape[1] != ds.d_p:
            raise ValidationError(
                f"sample {sid!r}: d_p {sample.bag.features.shape[1]} does not match dataset d_p {ds.d_p}"
            )
        if sample.rna.values.shape[0] != ds.k_genes:
            raise ValidationError(
                f"sample {sid!r}: {sample.rna.values.shape[0]} genes does not match dataset k_genes {ds.k_genes}"
            )
        if sample.rna.gene_ids != panel:
            raise ValidationError(f"sample {sid!r}: gene panel differs from the dataset panel")


def write_sample(sample: PairedSample, path: Path) -> None:
    bag, rna = sample.bag, sample.rna
    feats = _as_f32(bag.features, f"sample {bag.slide_id!r} features")
    coords = np.ascontiguousarray(bag.coords, dtype=np.int32)
    values = _as_f32(rna.values, f"sample {bag.slide_id!r} expression")
    n_raw, d_p = feats.shape
    blob = b"".join(
        (
            _HEADER.pack(MAGIC, FORMAT_VERSION, n_raw, d_p, values.shape[0]),
            feats.tobytes(),
            coords.tobytes(),
            values.tobytes(),
            _FOOTER.pack(sample.subtype, float(sample.survival.time), int(sample.survival.event)),
        )
    )
    path.write_bytes(blob)


def read_sample(path: Path, gene_ids: list[str]) -> PairedSample:
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path.name}: corrupt header (file too short)")
    magic, version, n_raw, d_p, k = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path.name}: unsupported format version {version}")
    need = _HEADER.size + n_raw * d_p * 4 + n_raw * 2 * 4 + k * 4 + _FOOTER.size
    if len(blob) != need:
        raise FormatError(f"{path.name}: expected {need} bytes, found {len(blob)}")
    off = _HEADER.size
    feats = np.frombuffer(blob, np.dtype("<f4"), n_raw * d_p, off).reshape(n_raw, d_p).copy()
    off += n_raw * d_p * 4
    coords = np.frombuffer(blob, np.dtype("<i4"), n_raw * 2, off).reshape(n_raw, 2).copy()
    off += n_raw * 2 * 4
    values = np.frombuffer(blob, np.dtype("<f4"), k, off).copy()
    off += k * 4
    subtype, time, event = _FOOTER.unpack_from(blob, off)
    sid = path.stem.removeprefix("sample_")
    return PairedSample(
        bag=PatchFeatureBag(sid, feats, coords),
        rna=TranscriptomicsProfile(sid, values, list(gene_ids)),
        subtype=subtype,
        survival=SurvivalLabel(time=time, event=bool(event)),
    )


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the dataset directory; re-reading yields a bitwise-equal dataset."""
    validate_dataset(ds)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for sample in ds.samples:
        write_sample(sample, out / f"sample_{sample.bag.slide_id}.bin")
    manifest = dict(ds.manifest)
    manifest.update(
        version=FORMAT_VERSION,
        n_samples=len(ds.samples),
        n_classes=ds.n_classes,
        d_p=ds.d_p,
        k_genes=ds.k_genes,
        gene_ids=ds.samples[0].rna.gene_ids,
        sample_ids=ds.sample_ids,
    )
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"{root}: missing manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for key in ("version", "n_samples", "n_classes", "d_p", "k_genes", "gene_ids", "sample_ids"):
        if key not in manifest:
            raise ValidationError(f"manifest.json: missing key {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise FormatError(f"manifest.json: unsupported version {manifest['version']}")
    gene_ids = list(manifest["gene_ids"])
    samples = []
    for sid in manifest["sample_ids"]:
        fpath = root / f"sample_{sid}.bin"
        if not fpath.is_file():
            raise ValidationError(f"manifest lists {sid!r} but {fpath.name} is missing")
        sample = read_sample(fpath, gene_ids)
        if sample.bag.features.shape[1] != manifest["d_p"]:
            raise FormatError(
                f"{fpath.name}: d_p {sample.bag.features.shape[1]} does not match manifest d_p {manifest['d_p']}"
            )
        if sample.rna.values.shape[0] != manifest["k_genes"]:
            raise FormatError(
                f"{fpath.name}: k {sample.rna.values.shape[0]} does not match manifest k_genes {manifest['k_genes']}"
            )
        samples.append(sample)
    if len(samples) != manifest["n_samples"]:
        raise ValidationError("manifest n_samples does not match sample_ids")
    ds = Dataset(
        samples=samples,
        n_classes=manifest["n_classes"],
        d_p=manifest["d_p"],
        k_genes=manifest["k_genes"],
        manifest=manifest,
    )
    validate_dataset(ds)
    return ds


def sample_bag(bag: PatchFeatureBag, n_fixed: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw a fixed-size patch subset: without replacement when the bag is large
    enough, with replacement otherwise. Pure function of (bag, n_fixed, seed)."""
    if n_fixed < 1:
        raise ValidationError(f"n_fixed must be >= 1, got {n_fixed}")
    n_raw = bag.features.shape[0]
    if n_raw < 1:
        raise ValidationError(f"sample {bag.slide_id!r}: empty patch bag")
    rng = np.random.default_rng(seed)
    replace = n_raw < n_fixed
    idx = rng.choice(n_raw, size=n_fixed, replace=replace)
    return bag.features[idx].copy(), bag.coords[idx].copy()


def samples_equal(a: PairedSample, b: PairedSample) -> bool:
    return (
        a.bag.slide_id == b.bag.slide_id
        and a.bag.features.tobytes() == b.bag.features.tobytes()
        and a.bag.coords.tobytes() == b.bag.coords.tobytes()
        and a.rna.values.tobytes() == b.rna.values.tobytes()
        and a.rna.gene_ids == b.rna.gene_ids
        and a.subtype == b.subtype
        and a.survival.time == b.survival.time
        and a.survival.event == b.survival.event
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    return (
        len(a) == len(b)
        and a.n_classes == b.n_classes
        and a.d_p == b.d_p
        and a.k_genes == b.k_genes
        and all(samples_equal(x, y) for x, y in zip(a.samples, b.samples))
    )
