"""Action chunk tokenizer: quantile normalization, DCT, quantization, BPE.

A chunk of C control steps by D action dimensions becomes a short stream
of discrete ids: each dimension's time series is normalized to [-1, 1]
using corpus quantiles, transformed with an orthonormal DCT-II, quantized
to integers, flattened frequency-major (all dimensions' coefficient k
before coefficient k+1), and compressed with byte-pair encoding. Only the
quantization step loses information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BPE_FILE_VERSION = 1

DEFAULT_SCALE = 10.0
DEFAULT_QUANTILES = (0.01, 0.99)
# Quantized coefficients live in [-R, R]; symbols in [0, 2R].
DEFAULT_MAX_MAGNITUDE = 64

# Relative spread below which a dimension counts as constant.
_CONST_EPS = 1e-12


@dataclass(frozen=True)
class ActionChunk:
    """C control steps by D action dimensions of real-valued commands."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"chunk must be a [C x D] matrix with C,D >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("chunk contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def chunk_len(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]


def _chunk_values(chunk) -> np.ndarray:
    if isinstance(chunk, ActionChunk):
        return chunk.values
    return ActionChunk(np.asarray(chunk)).values


@dataclass(frozen=True)
class NormStats:
    """Per-dimension quantile range mapped to [-1, 1].

    Dimensions whose quantile spread collapses are flagged constant and
    normalize to exactly 0; denormalization returns their midpoint.
    """

    q_low: np.ndarray
    q_high: np.ndarray
    constant: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q_low", np.asarray(self.q_low, dtype=np.float64))
        object.__setattr__(self, "q_high", np.asarray(self.q_high, dtype=np.float64))
        object.__setattr__(self, "constant", np.asarray(self.constant, dtype=bool))
        if not (self.q_low.shape == self.q_high.shape == self.constant.shape):
            raise ValueError("q_low, q_high, constant must have equal shapes")
        bad = ~self.constant & (self.q_low >= self.q_high)
        if np.any(bad):
            raise ValueError("q_low must be < q_high for non-constant dimensions")

    @property
    def n_dims(self) -> int:
        return self.q_low.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.q_low + self.q_high)

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.q_high - self.q_low)


def fit_norm(corpus, q: tuple[float, float] = DEFAULT_QUANTILES) -> NormStats:
    """Fit per-dimension quantile stats over every value in the corpus."""
    if len(corpus) == 0:
        raise ValueError("cannot fit normalization stats on an empty corpus")
    q_low_frac, q_high_frac = q
    if not 0.0 <= q_low_frac < q_high_frac <= 1.0:
        raise ValueError(f"need 0 <= q_low < q_high <= 1, got {q}")
    stacked = np.concatenate([_chunk_values(c) for c in corpus], axis=0)
    q_low = np.quantile(stacked, q_low_frac, axis=0)
    q_high = np.quantile(stacked, q_high_frac, axis=0)
    spread = q_high - q_low
    scale_ref = np.maximum(1.0, np.maximum(np.abs(q_low), np.abs(q_high)))
    constant = spread <= _CONST_EPS * scale_ref
    return NormStats(q_low=q_low, q_high=q_high, constant=constant)


def normalize(chunk, stats: NormStats) -> np.ndarray:
    """Map each dimension's quantile range onto [-1, 1]; constant dims to 0."""
    values = _chunk_values(chunk)
    if values.shape[1] != stats.n_dims:
        raise ValueError(f"chunk has {values.shape[1]} dims, stats expect {stats.n_dims}")
    half = np.where(stats.constant, 1.0, stats.half_range)
    out = (values - stats.midpoint) / half
    return np.where(stats.constant, 0.0, out)


def denormalize(normed: np.ndarray, stats: NormStats) -> np.ndarray:
    normed = np.asarray(normed, dtype=np.float64)
    if normed.shape[1] != stats.n_dims:
        raise ValueError(f"input has {normed.shape[1]} dims, stats expect {stats.n_dims}")
    half = np.where(stats.constant, 0.0, stats.half_range)
    return stats.midpoint + normed * half


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix G with G[k, i] = s_k cos(pi (i + 1/2) k / n)."""
    if n < 1:
        raise ValueError(f"DCT length must be >= 1, got {n}")
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    g = np.cos(np.pi * (i + 0.5) * k / n)
    scale = np.full((n, 1), math.sqrt(2.0 / n))
    scale[0, 0] = math.sqrt(1.0 / n)
    g = g * scale
    g.flags.writeable = False
    return g


def dct(series: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of a length-N vector (or of each column of a matrix)."""
    series = np.asarray(series, dtype=np.float64)
    return dct_matrix(series.shape[0]) @ series


def idct(coeffs: np.ndarray) -> np.ndarray:
    """Exact inverse of dct (the matrix is orthonormal, so inverse = transpose)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return dct_matrix(coeffs.shape[0]).T @ coeffs


def quantize(coeff, scale: float):
    """Round coeff * scale half away from zero, so quantize(-x) == -quantize(x).

    numpy's round() is half-to-even and would map 2.5 -> 2; this maps it to 3.
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    coeff = np.asarray(coeff, dtype=np.float64)
    if not np.all(np.isfinite(coeff)):
        raise ValueError("cannot quantize non-finite values")
    q = np.sign(coeff) * np.floor(np.abs(coeff) * scale + 0.5)
    q = q.astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(q, scale: float):
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    out = np.asarray(q, dtype=np.float64) / scale
    return float(out) if out.ndim == 0 else out


def flatten(quantized: np.ndarray) -> np.ndarray:
    """Flatten a [D x N] coefficient matrix frequency-major.

    stream[k * D + d] = quantized[d, k]: every dimension's coefficient k is
    emitted before any dimension's coefficient k+1.
    """
    quantized = np.asarray(quantized)
    if quantized.ndim != 2:
        raise ValueError(f"expected a [D x N] matrix, got shape {quantized.shape}")
    return np.ascontiguousarray(quantized.T).reshape(-1)


def unflatten(stream: np.ndarray, n_dims: int, alphabet_size: int | None = None) -> np.ndarray:
    """Inverse of flatten. Validates symbols when alphabet_size is given."""
    stream = np.asarray(stream)
    if n_dims < 1 or stream.size % n_dims != 0:
        raise ValueError(f"stream length {stream.size} is not a multiple of D={n_dims}")
    if alphabet_size is not None and stream.size > 0:
        if stream.min() < 0 or stream.max() >= alphabet_size:
            raise ValueError(
                f"symbol out of alphabet [0, {alphabet_size}): "
                f"range [{stream.min()}, {stream.max()}]"
            )
    return stream.reshape(-1, n_dims).T


@dataclass(frozen=True)
class BpeModel:
    """Ordered pair merges over a base symbol alphabet.

    merges[i] = (left, right, new_id) with new_id = base_alphabet + i; each
    merge may reference only previously defined symbols.
    """

    base_alphabet: int
    target_vocab: int
    merges: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if self.base_alphabet < 1:
            raise ValueError("base alphabet must be >= 1")
        if self.target_vocab < self.base_alphabet:
            raise ValueError("target vocab smaller than base alphabet")
        for i, (left, right, new_id) in enumerate(self.merges):
            defined = self.base_alphabet + i
            if new_id != defined:
                raise ValueError(f"merge {i} assigns id {new_id}, expected {defined}")
            if not (0 <= left < defined and 0 <= right < defined):
                raise ValueError(f"merge {i} references undefined symbols ({left}, {right})")
        if self.vocab_size > self.target_vocab:
            raise ValueError("more merges than target vocab allows")

    @property
    def vocab_size(self) -> int:
        return self.base_alphabet + len(self.merges)


def _merge_pass(stream: list[int], left: int, right: int, new_id: int) -> list[int]:
    # Left-to-right, non-overlapping replacement of (left, right) by new_id.
    out: list[int] = []
    i = 0
    n = len(stream)
    while i < n:
        if i + 1 < n and stream[i] == left and stream[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(stream[i])
            i += 1
    return out


def _count_pairs(corpus: list[list[int]]) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for stream in corpus:
        for a, b in zip(stream, stream[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    return counts


def bpe_train(corpus, target_vocab: int, base_alphabet: int) -> BpeModel:
    """Merge the most frequent adjacent pair until target_vocab or no pair repeats.

    Ties between equally frequent pairs go to the lexicographically smallest
    pair, so training is fully deterministic.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train BPE on an empty corpus")
    if target_vocab < base_alphabet:
        raise ValueError(
            f"target vocab {target_vocab} must be at least the base alphabet "
            f"{base_alphabet}"
        )
    streams = [list(map(int, s)) for s in corpus]
    for stream in streams:
        if stream and (min(stream) < 0 or max(stream) >= base_alphabet):
            raise ValueError("corpus symbol outside the base alphabet")
    merges: list[tuple[int, int, int]] = []
    while base_alphabet + len(merges) < target_vocab:
        counts = _count_pairs(streams)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best_pair = min(pair for pair, c in counts.items() if c == best_count)
        new_id = base_alphabet + len(merges)
        merges.append((best_pair[0], best_pair[1], new_id))
        streams = [_merge_pass(s, best_pair[0], best_pair[1], new_id) for s in streams]
    return BpeModel(base_alphabet=base_alphabet, target_vocab=target_vocab, merges=tuple(merges))


def bpe_encode(stream, model: BpeModel) -> list[int]:
    """Apply the learned merges to a base-symbol stream, in training order."""
    out = list(map(int, stream))
    if out and (min(out) < 0 or max(out) >= model.base_alphabet):
        raise ValueError("stream symbol outside the base alphabet")
    for left, right, new_id in model.merges:
        out = _merge_pass(out, left, right, new_id)
    return out


def bpe_decode(ids, model: BpeModel) -> list[int]:
    """Expand BPE ids back to base symbols; exact inverse of bpe_encode."""
    table = {new_id: (left, right) for left, right, new_id in model.merges}
    out: list[int] = []
    stack = list(reversed([int(i) for i in ids]))
    while stack:
        sym = stack.pop()
        if 0 <= sym < model.base_alphabet:
            out.append(sym)
        elif sym in table:
            left, right = table[sym]
            stack.append(right)
            stack.append(left)
        else:
            raise ValueError(f"unknown BPE symbol {sym}")
    return out


def dump_bpe(model: BpeModel) -> str:
    lines = [
        f"version={BPE_FILE_VERSION}",
        f"base_alphabet={model.base_alphabet}",
        f"target_vocab={model.target_vocab}",
    ]
    lines += [f"{left} {right} {new_id}" for left, right, new_id in model.merges]
    return "\n".join(lines) + "\n"


def parse_bpe(text: str) -> BpeModel:
    header: dict[str, int] = {}
    merges: list[tuple[int, int, int]] = []
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("version="):
        raise ValueError("BPE file must start with a version line")
    for ln in lines:
        if "=" in ln:
            key, _, value = ln.partition("=")
            header[key] = int(value)
        else:
            parts = ln.split()
            if len(parts) != 3:
                raise ValueError(f"malformed merge line: {ln!r}")
            merges.append((int(parts[0]), int(parts[1]), int(parts[2])))
    if header.get("version") != BPE_FILE_VERSION:
        raise ValueError(f"unsupported BPE file version {header.get('version')}")
    return BpeModel(
        base_alphabet=header["base_alphabet"],
        target_vocab=header["target_vocab"],
        merges=tuple(merges),
    )


def save_bpe(model: BpeModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_bpe(model))


def load_bpe(path) -> BpeModel:
    with open(path) as fh:
        return parse_bpe(fh.read())


def dump_norm_stats(stats: NormStats) -> str:
    lines = [
        f"{float(stats.q_low[d])!r} {float(stats.q_high[d])!r} {int(stats.constant[d])}"
        for d in range(stats.n_dims)
    ]
    return "\n".join(lines) + "\n"


def parse_norm_stats(text: str) -> NormStats:
    q_low, q_high, constant = [], [], []
    for ln in text.splitlines():
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"malformed stats line: {ln!r}")
        q_low.append(float(parts[0]))
        q_high.append(float(parts[1]))
        constant.append(bool(int(parts[2])))
    if not q_low:
        raise ValueError("empty stats file")
    return NormStats(np.array(q_low), np.array(q_high), np.array(constant))


def save_norm_stats(stats: NormStats, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_norm_stats(stats))


def load_norm_stats(path) -> NormStats:
    with open(path) as fh:
        return parse_norm_stats(fh.read())


@dataclass(frozen=True)
class ActionTokenizer:
    """End-to-end chunk <-> discrete-id codec.

    Pure and immutable: encode/decode never mutate state. Saturation (a
    quantized coefficient clamped into [-R, R]) is reported through
    encode_verbose rather than tracked on the instance.
    """

    stats: NormStats
    bpe: BpeModel
    scale: float = DEFAULT_SCALE
    max_magnitude: int = DEFAULT_MAX_MAGNITUDE

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.max_magnitude < 1:
            raise ValueError("max_magnitude must be >= 1")
        expected = 2 * self.max_magnitude + 1
        if self.bpe.base_alphabet != expected:
            raise ValueError(
                f"BPE base alphabet {self.bpe.base_alphabet} does not match "
                f"symbol range [0, 2R] with R={self.max_magnitude} ({expected} symbols)"
            )

    @property
    def alphabet_size(self) -> int:
        return 2 * self.max_magnitude + 1

    @property
    def vocab_size(self) -> int:
        return self.bpe.vocab_size

    def symbol_stream(self, chunk) -> tuple[np.ndarray, int]:
        """Chunk -> base-symbol stream plus the count of saturated coefficients."""
        values = _chunk_values(chunk)
        normed = normalize(values, self.stats)
        coeffs = dct(normed)  # (N, D): row k holds coefficient k of every dim
        q = quantize(coeffs, self.scale)
        clamped = np.clip(q, -self.max_magnitude, self.max_magnitude)
        n_saturated = int(np.count_nonzero(clamped != q))
        symbols = flatten((clamped + self.max_magnitude).T)
        return symbols, n_saturated

    def encode_verbose(self, chunk) -> tuple[list[int], int]:
        symbols, n_saturated = self.symbol_stream(chunk)
        return bpe_encode(symbols, self.bpe), n_saturated

    def encode(self, chunk) -> list[int]:
        """Chunk -> action-token ids, local to the action vocabulary."""
        return self.encode_verbose(chunk)[0]

    def decode(self, ids, chunk_len: int) -> ActionChunk:
        """Exact inverse of encode up to the quantization error bound."""
        symbols = np.array(bpe_decode(ids, self.bpe), dtype=np.int64)
        expected = chunk_len * self.stats.n_dims
        if symbols.size != expected:
            raise ValueError(
                f"decoded stream has {symbols.size} symbols, expected {expected} "
                f"(C={chunk_len}, D={self.stats.n_dims})"
            )
        mat = unflatten(symbols, self.stats.n_dims, alphabet_size=self.alphabet_size)
        q = mat.T - self.max_magnitude  # (N, D) signed coefficients
        coeffs = dequantize(q, self.scale)
        normed = idct(coeffs)
        return ActionChunk(denormalize(normed, self.stats))
