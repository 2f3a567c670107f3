"""Binary iris templates: masking, linearisation, rotation and matching.

Templates and noise masks are ``rows x cols`` uint8 arrays holding 0/1.  A
mask bit of 1 marks the corresponding template bit as corrupt.  Feature
vectors are the column-major flattening of a masked template, so a cyclic
shift by ``rows`` bits equals rotating the iris by one angular column.
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .config import DEFAULT_COLS, DEFAULT_MAX_SHIFTS, DEFAULT_ROWS, ConfigError

IrisTemplate = np.ndarray
NoiseMask = np.ndarray
FeatureVector = np.ndarray
Scan = tuple[np.ndarray, np.ndarray]

MATRIX_MAGIC = "IRIS1"


class MaskingMode(str, enum.Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"


class PairingError(ValueError):
    """Template/mask operands have incompatible shapes."""


class UnusableSampleError(ValueError):
    """A comparison has no mutually valid bits left."""


@dataclass(frozen=True)
class MaskedTemplate:
    bits: np.ndarray
    mode: MaskingMode


def as_bits(x, ndim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(x)
    if ndim is not None and arr.ndim != ndim:
        raise PairingError(f"expected a {ndim}-d bit array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("bit arrays may only contain 0 and 1")
        arr = arr.astype(np.uint8)
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise PairingError(f"shape mismatch: {a.shape} vs {b.shape}")


def apply_mask_type1(template: IrisTemplate, mask: NoiseMask) -> MaskedTemplate:
    """Zero every template bit flagged corrupt by the sample's own mask."""
    t, m = as_bits(template, 2), as_bits(mask, 2)
    _check_pair(t, m)
    return MaskedTemplate(t & (1 - m), MaskingMode.TYPE1)


def compute_global_mask(masks: Sequence[NoiseMask]) -> NoiseMask:
    """Positionwise AND of a collection of masks."""
    if len(masks) == 0:
        raise ValueError("cannot build a global mask from zero masks")
    first = as_bits(masks[0], 2)
    out = first.copy()
    for m in masks[1:]:
        m = as_bits(m, 2)
        _check_pair(first, m)
        out &= m
    return out


def apply_mask_type2(template: IrisTemplate, global_mask: NoiseMask) -> MaskedTemplate:
    t, g = as_bits(template, 2), as_bits(global_mask, 2)
    _check_pair(t, g)
    return MaskedTemplate(t & (1 - g), MaskingMode.TYPE2)


def linearize(mt: MaskedTemplate | np.ndarray) -> FeatureVector:
    """Concatenate columns left to right, each read top to bottom."""
    bits = mt.bits if isinstance(mt, MaskedTemplate) else as_bits(mt, 2)
    return np.ascontiguousarray(bits.T).reshape(-1)


def delinearize(fv: FeatureVector, rows: int = DEFAULT_ROWS) -> np.ndarray:
    fv = as_bits(fv, 1)
    if fv.size % rows:
        raise PairingError(f"vector length {fv.size} is not a multiple of {rows}")
    return np.ascontiguousarray(fv.reshape(-1, rows).T)


def rotate(fv: FeatureVector, steps: int, rows: int = DEFAULT_ROWS) -> FeatureVector:
    """Cyclically shift ``fv`` by ``steps`` template columns (``steps * rows`` bits)."""
    return np.roll(as_bits(fv, 1), steps * rows)


def hamming_fraction(a: np.ndarray, b: np.ndarray) -> float:
    a, b = as_bits(a), as_bits(b)
    _check_pair(a, b)
    if a.size == 0:
        raise ValueError("empty vectors have no distance")
    return float(np.count_nonzero(a ^ b)) / a.size


def masked_hamming(t1: IrisTemplate, m1: NoiseMask, t2: IrisTemplate, m2: NoiseMask) -> float:
    """Fractional Hamming distance over the bits left valid by the combined mask.

    The combined mask is ``m1 & m2``; both templates are masked with its
    complement and the XOR popcount is divided by the number of positions
    where the combined mask is 0.
    """
    t1, m1, t2, m2 = (as_bits(x, 2) for x in (t1, m1, t2, m2))
    for other in (m1, t2, m2):
        _check_pair(t1, other)
    c_mask = m1 & m2
    valid = c_mask == 0
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise UnusableSampleError("combined mask leaves no valid bits")
    keep = 1 - c_mask
    diff = (t1 & keep) ^ (t2 & keep)
    return float(np.count_nonzero(diff)) / n_valid


def min_shift_distance(
    fv1: FeatureVector, fv2: FeatureVector, max_shifts: int = DEFAULT_MAX_SHIFTS, rows: int = DEFAULT_ROWS
) -> float:
    """Best fractional Hamming distance over rotations of ``fv2`` in ``[-max_shifts, max_shifts]``."""
    a, b = as_bits(fv1, 1), as_bits(fv2, 1)
    _check_pair(a, b)
    if max_shifts < 0:
        raise ValueError("max_shifts must be non-negative")
    # stack all rotations and score them at once
    shifted = np.stack([np.roll(b, s * rows) for s in range(-max_shifts, max_shifts + 1)])
    diffs = np.count_nonzero(shifted ^ a, axis=1)
    return float(diffs.min()) / a.size


def extract_feature_vector(
    template: IrisTemplate,
    mask: NoiseMask,
    mode: MaskingMode | str = MaskingMode.TYPE1,
    global_mask: Optional[NoiseMask] = None,
) -> FeatureVector:
    mode = MaskingMode(mode)
    if mode is MaskingMode.TYPE1:
        mt = apply_mask_type1(template, mask)
    else:
        if global_mask is None:
            raise ConfigError("type2 masking requires a global mask")
        mt = apply_mask_type2(template, global_mask)
    return linearize(mt)


# --------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticDataset:
    subjects: int
    samples_per_subject: int
    templates: dict[int, list[Scan]]
    seed: Optional[int] = None
    p_intra: Optional[float] = None
    mask_density: Optional[float] = None
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS
    extras: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
        for subject in sorted(self.templates):
            for sample, (t, m) in enumerate(self.templates[subject]):
                yield subject, sample, t, m

    def scan(self, subject: int, sample: int) -> Scan:
        return self.templates[subject][sample]

    def masks(self) -> list[np.ndarray]:
        return [m for _, _, _, m in self]

    def same_as(self, other: "SyntheticDataset") -> bool:
        if (self.subjects, self.samples_per_subject, self.rows, self.cols) != (
            other.subjects,
            other.samples_per_subject,
            other.rows,
            other.cols,
        ):
            return False
        for (s1, k1, t1, m1), (s2, k2, t2, m2) in zip(self, other):
            if (s1, k1) != (s2, k2) or not np.array_equal(t1, t2) or not np.array_equal(m1, m2):
                return False
        return True


def _band_mask(rows: int, cols: int, n_masked: int, row0: int, col0: int) -> np.ndarray:
    # fill whole rows from row0 downwards (cyclically); the last partial row
    # is a contiguous arc starting at col0
    mask = np.zeros((rows, cols), dtype=np.uint8)
    full, rest = divmod(n_masked, cols)
    for i in range(full):
        mask[(row0 + i) % rows, :] = 1
    if rest:
        cols_idx = (col0 + np.arange(rest)) % cols
        mask[(row0 + full) % rows, cols_idx] = 1
    return mask


def synth_generate(
    subjects: int,
    samples_per_subject: int,
    p_intra: float,
    mask_density: float,
    seed: int,
    rows: int = DEFAULT_ROWS,
    cols: int = DEFAULT_COLS,
    max_rotation: int = 0,
) -> SyntheticDataset:
    """Generate a seeded stand-in for an iris database.

    Each subject gets a uniform base template and a subject-stable band of
    occluded rows (about ``mask_density`` of all bits).  Every sample flips
    base bits independently with probability ``p_intra``; the occlusion arc
    jitters by a couple of columns between samples.  With ``max_rotation``
    > 0, each sample is also rotated by a uniform number of columns in
    ``[-max_rotation, max_rotation]``.
    """
    if subjects < 1 or samples_per_subject < 1:
        raise ConfigError("subjects and samples_per_subject must be >= 1")
    if not 0.0 <= p_intra < 0.5:
        raise ConfigError("p_intra must lie in [0, 0.5)")
    if not 0.0 <= mask_density < 1.0:
        raise ConfigError("mask_density must lie in [0, 1)")
    if rows < 1 or cols < 1:
        raise ConfigError("template dimensions must be >= 1")

    n_masked = int(round(mask_density * rows * cols))
    templates: dict[int, list[Scan]] = {}
    for subject, child in enumerate(np.random.SeedSequence(seed).spawn(subjects)):
        rng = np.random.default_rng(child)
        base = rng.integers(0, 2, size=(rows, cols), dtype=np.uint8)
        row0 = int(rng.integers(rows))
        col0 = int(rng.integers(cols))
        samples: list[Scan] = []
        for _ in range(samples_per_subject):
            flips = (rng.random((rows, cols)) < p_intra).astype(np.uint8)
            jitter = int(rng.integers(-2, 3))
            t = base ^ flips
            m = _band_mask(rows, cols, n_masked, row0, col0 + jitter)
            if max_rotation:
                shift = int(rng.integers(-max_rotation, max_rotation + 1))
                t, m = np.roll(t, shift, axis=1), np.roll(m, shift, axis=1)
            samples.append((t, m))
        templates[subject] = samples
    return SyntheticDataset(
        subjects=subjects,
        samples_per_subject=samples_per_subject,
        templates=templates,
        seed=seed,
        p_intra=p_intra,
        mask_density=mask_density,
        rows=rows,
        cols=cols,
        extras={"max_rotation": max_rotation} if max_rotation else {},
    )


# --------------------------------------------------------------------------
# File formats


def encode_matrix(bits: np.ndarray) -> str:
    """Two-line record: ``IRIS1 rows cols`` and base64 of row-major packed bits."""
    bits = as_bits(bits, 2)
    rows, cols = bits.shape
    payload = base64.b64encode(np.packbits(bits.reshape(-1)).tobytes()).decode("ascii")
    return f"{MATRIX_MAGIC} {rows} {cols}\n{payload}"


def decode_matrix(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if len(lines) != 2:
        raise ValueError("matrix record must have a header line and a data line")
    parts = lines[0].split()
    if len(parts) != 3 or parts[0] != MATRIX_MAGIC:
        raise ValueError(f"bad matrix header {lines[0]!r}")
    rows, cols = int(parts[1]), int(parts[2])
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be positive")
    raw = np.frombuffer(base64.b64decode(lines[1], validate=True), dtype=np.uint8)
    if raw.size != (rows * cols + 7) // 8:
        raise ValueError("matrix payload length does not match header")
    return np.unpackbits(raw, count=rows * cols).reshape(rows, cols)


def write_scan(path: str | Path, template: np.ndarray, mask: np.ndarray) -> None:
    _check_pair(as_bits(template, 2), as_bits(mask, 2))
    Path(path).write_text(encode_matrix(template) + "\n" + encode_matrix(mask) + "\n", encoding="utf-8")


def read_scan(path: str | Path) -> Scan:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 4:
        raise ValueError(f"{path}: a scan file holds exactly two matrix records")
    t = decode_matrix("\n".join(lines[:2]))
    m = decode_matrix("\n".join(lines[2:]))
    _check_pair(t, m)
    return t, m


def save_dataset(ds: SyntheticDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for subject, sample, t, m in ds:
            rec = {"subject": subject, "sample": sample, "template": encode_matrix(t), "mask": encode_matrix(m)}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> SyntheticDataset:
    templates: dict[int, list[Scan]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples = templates.setdefault(int(rec["subject"]), [])
            if int(rec["sample"]) != len(samples):
                raise ValueError("dataset samples must be stored in order")
            samples.append((decode_matrix(rec["template"]), decode_matrix(rec["mask"])))
    if not templates:
        raise ValueError(f"{path}: empty dataset")
    counts = {len(v) for v in templates.values()}
    if len(counts) != 1:
        raise ValueError("every subject needs the same number of samples")
    rows, cols = next(iter(templates.values()))[0][0].shape
    return SyntheticDataset(
        subjects=len(templates),
        samples_per_subject=counts.pop(),
        templates=templates,
        rows=rows,
        cols=cols,
    )
