"""Ternary random-projection sign hashing and its empirical security probes.

A :class:`ProjectionSet` holds ``m`` vectors with entries in {-1, 0, 1}.
The hash of a binary vector ``x`` has bit ``i`` equal to 1 when the integer
inner product ``<x, r_i>`` is non-negative and 0 when it is negative.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

PROJECTION_MAGIC = "S3H1"
MAX_ORACLE_BITS = 20

# trit <-> 2-bit code used by the serialisation format
_TRIT_TO_CODE = {0: 0, 1: 1, -1: 2}


class PreimageRefused(ValueError):
    """Exhaustive enumeration was requested for an input space that is too large."""


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    n: int
    m: int
    seed: int
    vectors: np.ndarray  # (m, n) int8

    def __post_init__(self) -> None:
        if self.vectors.shape != (self.m, self.n):
            raise ValueError(f"expected ({self.m}, {self.n}) projection matrix, got {self.vectors.shape}")
        self.vectors.setflags(write=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProjectionSet):
            return NotImplemented
        return (self.n, self.m, self.seed) == (other.n, other.m, other.seed) and np.array_equal(
            self.vectors, other.vectors
        )

    __hash__ = None  # type: ignore[assignment]

    def to_text(self) -> str:
        codes = np.vectorize(_TRIT_TO_CODE.__getitem__, otypes=[np.uint8])(self.vectors.reshape(-1))
        pad = (-codes.size) % 4
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)]).reshape(-1, 4)
        packed = (codes[:, 0] << 6) | (codes[:, 1] << 4) | (codes[:, 2] << 2) | codes[:, 3]
        body = base64.b64encode(packed.astype(np.uint8).tobytes()).decode("ascii")
        return f"{PROJECTION_MAGIC} {self.n} {self.m} {self.seed}\n{body}\n"

    @classmethod
    def from_text(cls, text: str) -> "ProjectionSet":
        lines = text.strip().splitlines()
        header = lines[0].split()
        if len(lines) != 2 or len(header) != 4 or header[0] != PROJECTION_MAGIC:
            raise ValueError("not a serialised projection set")
        n, m, seed = int(header[1]), int(header[2]), int(header[3])
        packed = np.frombuffer(base64.b64decode(lines[1], validate=True), dtype=np.uint8)
        if packed.size != (n * m + 3) // 4:
            raise ValueError("projection payload length does not match header")
        codes = np.stack([(packed >> s) & 3 for s in (6, 4, 2, 0)], axis=1).reshape(-1)[: n * m]
        if (codes == 3).any():
            raise ValueError("invalid trit code in projection payload")
        trits = np.where(codes == 2, -1, codes).astype(np.int8)
        return cls(n=n, m=m, seed=seed, vectors=trits.reshape(m, n))


def sample_projections(n: int, m: int, seed: int) -> ProjectionSet:
    if n < 1 or m < 1:
        raise ValueError("projection sizes must be >= 1")
    rng = np.random.default_rng(seed)
    vectors = rng.integers(-1, 2, size=(m, n), dtype=np.int8)
    return ProjectionSet(n=n, m=m, seed=seed, vectors=vectors)


def sgn(z: int) -> int:
    return 0 if z < 0 else 1


def _as_binary(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    return arr


def inner_products(R: ProjectionSet, xs: np.ndarray) -> np.ndarray:
    """Exact integer inner products of each row of ``xs`` with every projection."""
    xs = _as_binary(xs)
    if xs.shape[-1] != R.n:
        raise ValueError(f"input length {xs.shape[-1]} does not match projection length {R.n}")
    # float32 sums of integers stay exact while |partial sum| < 2**24
    if R.n < 2**24:
        return (xs.astype(np.float32) @ R.vectors.T.astype(np.float32)).astype(np.int64)
    return xs.astype(np.int64) @ R.vectors.T.astype(np.int64)


def s3hash(R: ProjectionSet, x) -> np.ndarray:
    x = _as_binary(x)
    if x.ndim != 1:
        raise ValueError("s3hash takes a single vector; use s3hash_many for batches")
    if x.size != R.n:
        raise ValueError(f"input length {x.size} does not match projection length {R.n}")
    dots = R.vectors.astype(np.int64) @ x.astype(np.int64)
    return (dots >= 0).astype(np.uint8)


def s3hash_many(R: ProjectionSet, xs: np.ndarray, chunk: int = 1024) -> np.ndarray:
    xs = _as_binary(xs)
    out = np.empty((xs.shape[0], R.m), dtype=np.uint8)
    for start in range(0, xs.shape[0], chunk):
        out[start : start + chunk] = inner_products(R, xs[start : start + chunk]) >= 0
    return out


def hash_hamming(h1, h2) -> float:
    a, b = np.asarray(h1), np.asarray(h2)
    if a.shape != b.shape:
        raise ValueError("hash vectors differ in length")
    return float(np.count_nonzero(a != b)) / a.size


def hash_to_hex(h) -> str:
    return np.packbits(np.asarray(h, dtype=np.uint8)).tobytes().hex()


def hash_from_hex(text: str, m: int) -> np.ndarray:
    raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
    if raw.size != (m + 7) // 8:
        raise ValueError("hex digest length does not match hash length")
    return np.unpackbits(raw, count=m)


def angle(x1, x2) -> float:
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    dot, na2, nb2 = float(a @ b), float(a @ a), float(b @ b)
    if na2 == 0 or nb2 == 0:
        raise ValueError("angle undefined for the zero vector")
    if dot > 0 and dot * dot == na2 * nb2:
        return 0.0  # parallel; acos would return rounding noise
    cos = dot / math.sqrt(na2 * nb2)
    return math.acos(min(1.0, max(-1.0, cos)))


def collision_prob(x1, x2) -> float:
    """Per-bit agreement probability ``1 - theta/pi`` for the pair."""
    return 1.0 - angle(x1, x2) / math.pi


# --------------------------------------------------------------------------
# Security probes


def _all_binary(n: int) -> np.ndarray:
    # row k is the binary expansion of k, most significant bit first, so the
    # rows are in lexicographic order
    idx = np.arange(2**n, dtype=np.uint32)
    shifts = np.arange(n - 1, -1, -1, dtype=np.uint32)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8)


def preimage_oracle(R: ProjectionSet, h) -> np.ndarray:
    """Every ``x`` in {0,1}^n hashing to ``h``, as rows in lexicographic order."""
    if R.n > MAX_ORACLE_BITS:
        raise PreimageRefused(f"refusing to enumerate 2^{R.n} inputs (limit 2^{MAX_ORACLE_BITS})")
    target = np.asarray(h, dtype=np.uint8)
    if target.shape != (R.m,):
        raise ValueError("hash length does not match projection set")
    xs = _all_binary(R.n)
    hits = np.all(s3hash_many(R, xs, chunk=1 << 16) == target, axis=1)
    return xs[hits]


def preimage_census(n: int, m: int, trials: int, seed: int) -> list[int]:
    """Preimage-set sizes for ``trials`` random (projection set, input) draws."""
    rng = np.random.default_rng(seed)
    xs = _all_binary(n)
    counts = []
    for _ in range(trials):
        R = sample_projections(n, m, int(rng.integers(2**63)))
        x = rng.integers(0, 2, size=n, dtype=np.uint8)
        hashes = s3hash_many(R, xs, chunk=1 << 16)
        counts.append(int(np.count_nonzero(np.all(hashes == s3hash(R, x), axis=1))))
    return counts


def _influence(R: ProjectionSet) -> np.ndarray:
    """Normal approximation of how strongly each input bit moves each hash bit.

    Entry ``[j, i]`` estimates ``|Pr[h_j = 1 | x_i = 1] - Pr[h_j = 1 | x_i = 0]|``
    for uniform ``x``.  Computed from the public projections only.
    """
    v = R.vectors.astype(np.float64)
    plus = (v > 0).sum(axis=1, keepdims=True)
    minus = (v < 0).sum(axis=1, keepdims=True)
    # the remaining n-1 coordinates: drop coordinate i's own contribution
    mu = (plus - minus - v) / 2.0
    var = (plus + minus - np.abs(v)) / 4.0
    sd = np.sqrt(np.maximum(var, 0.25))
    # x_i flips the hash only when the rest of the sum sits at -1 (r=+1) or 0 (r=-1)
    crit = np.where(v > 0, -1.0, 0.0)
    dens = np.exp(-0.5 * ((crit - mu) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    return np.where(v == 0, 0.0, dens)


@dataclass
class AdvantageReport:
    advantages: np.ndarray  # (n,) empirical |Pr[x_i=0 & A=1] - Pr[x_i=1 & A=1]|
    predictor_bits: np.ndarray  # (n,) hash bit used to guess each input bit
    predicted: np.ndarray  # (n,) advantage the normal approximation expects
    trials: int
    degenerate: bool

    @property
    def max_advantage(self) -> float:
        return float(self.advantages.max())


def bit_balance_advantage(R: ProjectionSet, trials: int, seed: int, chunk: int = 500) -> AdvantageReport:
    """Estimate, per input bit, the advantage of the best single-hash-bit guesser.

    The adversary knows ``R`` and, for each input index ``i``, commits to the
    hash bit with the largest expected influence of ``x_i``.  Its advantage is
    then measured on fresh uniform inputs, so the estimate is not inflated by
    picking the luckiest of many noisy predictors.  This covers only the
    single-output-bit adversary class.
    """
    if trials < 1000:
        raise ValueError("bit_balance_advantage needs at least 1000 trials")
    influence = _influence(R)
    choice = influence.argmax(axis=0)
    predicted = influence[choice, np.arange(R.n)] / 2.0
    degenerate = not R.vectors.any()

    rng = np.random.default_rng(seed)
    guess_sum = np.zeros(R.n, dtype=np.int64)
    sign_sum = np.zeros(R.n, dtype=np.int64)
    cross_sum = np.zeros(R.n, dtype=np.int64)
    done = 0
    while done < trials:
        k = min(chunk, trials - done)
        xs = rng.integers(0, 2, size=(k, R.n), dtype=np.uint8)
        hs = s3hash_many(R, xs)
        guess = hs[:, choice].astype(np.int64)  # (k, n): predictor output per index
        sign = 1 - 2 * xs.astype(np.int64)  # +1 for x_i = 0, -1 for x_i = 1
        guess_sum += guess.sum(axis=0)
        sign_sum += sign.sum(axis=0)
        cross_sum += (guess * sign).sum(axis=0)
        done += k
    # Pr[x_i=0 & A=1] - Pr[x_i=1 & A=1] = E[A * sign] = Cov(A, sign) because
    # E[sign] = 0 for uniform inputs; the covariance form has half the variance
    adv = np.abs(cross_sum / trials - (guess_sum / trials) * (sign_sum / trials))
    return AdvantageReport(adv, choice, predicted, trials, degenerate)


def binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    return np.nan_to_num(h, nan=0.0)


def entropy_estimate(samples: Sequence[np.ndarray] | np.ndarray) -> float:
    """Sum of per-coordinate marginal entropies in bits.

    An upper bound on the joint entropy: correlations between coordinates
    are ignored.
    """
    xs = np.asarray(samples)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("entropy_estimate needs a non-empty list of equal-length vectors")
    freq = xs.mean(axis=0)
    return float(binary_entropy(freq).sum())


@dataclass(frozen=True)
class SecurityParams:
    security_lambda: int
    m: int
    entropy_estimate: float

    @property
    def input_hiding_regime(self) -> bool:
        return self.entropy_estimate >= self.m + self.security_lambda

    def redundancy(self, n: int) -> float:
        return n - self.entropy_estimate


def sample_at_angle(n: int, theta: float, rng: np.random.Generator, weight: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Two binary vectors of equal weight whose angle is as close to ``theta`` as the lattice allows.

    Both vectors have ``w`` ones and share ``k`` of them, so
    ``cos(theta) = k / w`` exactly for the returned pair.
    """
    w = weight if weight is not None else n // 2
    k = int(round(w * math.cos(theta)))
    if w < 1 or 2 * w - k > n:
        raise ValueError("cannot realise this angle with the requested weight")
    perm = rng.permutation(n)
    x1 = np.zeros(n, dtype=np.uint8)
    x2 = np.zeros(n, dtype=np.uint8)
    shared, only1, only2 = perm[:k], perm[k:w], perm[w : 2 * w - k]
    x1[shared] = x2[shared] = 1
    x1[only1] = 1
    x2[only2] = 1
    return x1, x2


@dataclass
class LocalityRow:
    theta: float
    expected_agreement: float
    measured_agreement: float
    pairs: int

    @property
    def error(self) -> float:
        return abs(self.measured_agreement - self.expected_agreement)


def eval_locality(
    angles: Sequence[float],
    pairs: int = 10_000,
    n: int = 1024,
    m: int = 64,
    seed: int = 0,
    pairs_per_projection: int = 1000,
) -> list[LocalityRow]:
    """Measure mean per-bit hash agreement for vector pairs at fixed angles.

    A fresh projection set is drawn every ``pairs_per_projection`` pairs so
    the estimate averages over the hash family, not one draw of it.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for theta in angles:
        agree = 0
        exact_angles = []
        done = 0
        while done < pairs:
            k = min(pairs_per_projection, pairs - done)
            R = sample_projections(n, m, int(rng.integers(2**63)))
            batch = [sample_at_angle(n, theta, rng) for _ in range(k)]
            x1 = np.stack([b[0] for b in batch])
            x2 = np.stack([b[1] for b in batch])
            exact_angles.append(angle(x1[0], x2[0]))
            agree += int(np.count_nonzero(s3hash_many(R, x1) == s3hash_many(R, x2)))
            done += k
        realised = float(np.mean(exact_angles))
        rows.append(LocalityRow(theta, 1.0 - realised / math.pi, agree / (pairs * m), pairs))
    return rows
