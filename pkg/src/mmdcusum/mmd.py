"""MMD estimators between an incoming block and a frozen reference set.

The biased estimator is the MMD between the two empirical measures.  The
unbiased estimator of the squared MMD drops the diagonal of both
within-sample Gram sums; it is returned signed and without a square root,
because it can be negative and taking a root would reintroduce bias.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

from .errors import InputError
from .kernels import FAMILIES, ArrayLike, Kernel, as_samples, gram_sum, row_sums

MAGIC = b"MMDREF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<6sHIQBdd")


@dataclass(frozen=True)
class ReferenceSet:
    """Frozen pre-change samples with the cached self Gram term.

    ``self_term`` is ``(1/h^2) * sum_{n,m} k(X'_n, X'_m)``, computed once so
    that each block costs O(r^2 + r h) kernel evaluations.
    """

    samples: np.ndarray
    kernel: Kernel
    self_term: float
    gram_total: float = field(repr=False)

    @property
    def h(self) -> int:
        return int(self.samples.shape[0])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    @cached_property
    def unbiased_self_term(self) -> float:
        """Diagonal-free average ``sum_{n != m} k / (h (h - 1))``."""
        h = self.h
        diag = math.fsum(self.kernel.paired(self.samples, self.samples))
        return (self.gram_total - diag) / (h * (h - 1))


def reference_build(kernel: Kernel, samples: ArrayLike) -> ReferenceSet:
    arr = as_samples(samples, "reference samples")
    if arr.shape[0] < 2:
        raise InputError("reference needs at least two samples")
    if not np.all(np.isfinite(arr)):
        raise InputError("reference samples contain NaN or Inf")
    arr = arr.copy()
    arr.setflags(write=False)
    total = gram_sum(kernel, arr, arr)
    h = arr.shape[0]
    return ReferenceSet(samples=arr, kernel=kernel, self_term=total / (h * h), gram_total=total)


def _check_block(block: ArrayLike, ref: ReferenceSet) -> np.ndarray:
    arr = as_samples(block, "block")
    if arr.shape[1] != ref.dim:
        raise InputError(f"block dimension {arr.shape[1]} does not match reference dimension {ref.dim}")
    return arr


def biased_mmd(block: ArrayLike, ref: ReferenceSet) -> float:
    """MMD between the empirical measures of ``block`` and the reference."""
    arr = _check_block(block, ref)
    r, h = arr.shape[0], ref.h
    within = gram_sum(ref.kernel, arr, arr) / (r * r)
    cross = 2.0 * math.fsum(row_sums(ref.kernel, arr, ref.samples)) / (r * h)
    return math.sqrt(max(0.0, within + ref.self_term - cross))


def unbiased_sq_mmd(kernel: Kernel, X: ArrayLike, Y: ArrayLike) -> float:
    """Unbiased, signed estimate of the squared MMD between the laws of X and Y."""
    Xa = as_samples(X, "X")
    Ya = as_samples(Y, "Y")
    if Xa.shape[1] != Ya.shape[1]:
        raise InputError(f"dimension mismatch: {Xa.shape[1]} vs {Ya.shape[1]}")
    m, n = Xa.shape[0], Ya.shape[0]
    if m < 2 or n < 2:
        raise InputError("unbiased estimator needs at least two samples on each side")
    xx = gram_sum(kernel, Xa, Xa) - math.fsum(kernel.paired(Xa, Xa))
    yy = gram_sum(kernel, Ya, Ya) - math.fsum(kernel.paired(Ya, Ya))
    xy = gram_sum(kernel, Xa, Ya)
    return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2.0 * xy / (m * n)


def unbiased_sq_mmd_ref(block: ArrayLike, ref: ReferenceSet) -> float:
    """:func:`unbiased_sq_mmd` against a reference, reusing its cached Gram total."""
    arr = _check_block(block, ref)
    r, h = arr.shape[0], ref.h
    if r < 2:
        raise InputError("unbiased estimator needs blocks of at least two samples")
    kern = ref.kernel
    xx = gram_sum(kern, arr, arr) - math.fsum(kern.paired(arr, arr))
    xy = math.fsum(row_sums(kern, arr, ref.samples))
    return xx / (r * (r - 1)) + ref.unbiased_self_term - 2.0 * xy / (r * h)


def save_reference(path: Union[str, Path], ref: ReferenceSet) -> None:
    """Write the versioned little-endian binary reference file."""
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, ref.dim, ref.h, FAMILIES.index(ref.kernel.family),
        ref.kernel.sigma, ref.self_term,
    )
    body = np.ascontiguousarray(ref.samples, dtype="<f8").tobytes()
    trailer = struct.pack("<d", ref.gram_total)
    Path(path).write_bytes(header + body + trailer)


def load_reference(path: Union[str, Path]) -> ReferenceSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:6] != MAGIC:
        raise InputError(f"{path}: not a reference file")
    magic, version, dim, h, family_code, sigma, self_term = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported reference format version {version}")
    if family_code >= len(FAMILIES):
        raise InputError(f"{path}: unknown kernel family code {family_code}")
    n_body = 8 * dim * h
    expected = _HEADER.size + n_body + 8
    if len(data) != expected:
        raise InputError(f"{path}: truncated or oversized file ({len(data)} bytes, expected {expected})")
    samples = np.frombuffer(data, dtype="<f8", count=dim * h, offset=_HEADER.size)
    samples = samples.astype(np.float64).reshape(h, dim)
    samples.setflags(write=False)
    (gram_total,) = struct.unpack_from("<d", data, _HEADER.size + n_body)
    kernel = Kernel(FAMILIES[family_code], sigma)
    return ReferenceSet(samples=samples, kernel=kernel, self_term=self_term, gram_total=gram_total)


BIASED = "biased-mmd"
UNBIASED = "unbiased-sq-mmd"
STATISTIC_KINDS = (BIASED, UNBIASED)
ROW_CHUNK = 64


def block_statistics(samples: ArrayLike, ref: ReferenceSet, r: int, kind: str = BIASED) -> np.ndarray:
    """Per-block statistics for consecutive non-overlapping blocks of ``r`` rows.

    Bit-identical to calling :func:`biased_mmd` / :func:`unbiased_sq_mmd_ref`
    block by block; the cross sums are just computed for all rows at once.
    Trailing rows that do not fill a block are ignored.
    """
    if kind not in STATISTIC_KINDS:
        raise InputError(f"unknown statistic kind {kind!r}")
    arr = _check_block(samples, ref)
    n_blocks = arr.shape[0] // r
    if n_blocks == 0:
        return np.zeros(0)
    arr = arr[: n_blocks * r]
    kern, h = ref.kernel, ref.h
    # Row sums do not depend on how rows are batched; small batches keep tiles in cache.
    cross_rows = np.concatenate([
        row_sums(kern, arr[i:i + ROW_CHUNK], ref.samples)
        for i in range(0, arr.shape[0], ROW_CHUNK)
    ])
    out = np.empty(n_blocks)
    if kind == UNBIASED:
        if r < 2:
            raise InputError("unbiased estimator needs blocks of at least two samples")
        ref_term = ref.unbiased_self_term
    for t in range(n_blocks):
        block = arr[t * r:(t + 1) * r]
        xy = math.fsum(cross_rows[t * r:(t + 1) * r])
        if kind == BIASED:
            within = gram_sum(kern, block, block) / (r * r)
            out[t] = math.sqrt(max(0.0, within + ref.self_term - 2.0 * xy / (r * h)))
        else:
            xx = gram_sum(kern, block, block) - math.fsum(kern.paired(block, block))
            out[t] = xx / (r * (r - 1)) + ref_term - 2.0 * xy / (r * h)
    return out
