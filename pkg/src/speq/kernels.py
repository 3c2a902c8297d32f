"""Dual-path reference GEMM over packed weight tensors.

``gemm_full`` reconstructs exact FP16 weights from both bit streams;
``gemm_draft`` touches only the 4-bit stream plus the group scales. Both
accumulate in float32 in a fixed order (ascending k within a group, then
ascending group), multiply by 1/tensor_scale once per output element, and
are bit-reproducible across runs, thread counts, and backends.

FP16 x FP16 products are computed in float32, which is exact: two 11-bit
significands need at most 22 bits and the exponent range fits comfortably.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _accel
from .quantize import FormatMismatchError, PackedTensor, QuantFormat

__all__ = [
    "GemmMode",
    "GemmSpec",
    "TrafficCounter",
    "exact_fp16_product",
    "gemm_full",
    "gemm_draft",
]


class GemmMode(enum.Enum):
    DRAFT = "draft"
    FULL = "full"


@dataclass(frozen=True)
class GemmSpec:
    """Shape and mode of one GEMM; accumulation order is fixed by contract."""

    m: int
    n: int
    k: int
    mode: GemmMode

    @property
    def macs(self) -> int:
        return self.m * self.n * self.k


@dataclass
class TrafficCounter:
    """Byte/bit traffic accumulated over GEMM calls.

    Weights are counted in logical stream bits (4 per weight in draft mode,
    16 in full mode) so the draft:full ratio is exactly 1:4 for every
    shape; on-disk byte padding is a container artifact, not dataflow.
    """

    weight_bits: int = 0
    scale_bytes: int = 0
    activation_bytes: int = 0

    @property
    def weight_bytes(self) -> float:
        return self.weight_bits / 8

    def add(self, weight_bits: int, scale_bytes: int, activation_bytes: int) -> None:
        self.weight_bits += weight_bits
        self.scale_bytes += scale_bytes
        self.activation_bytes += activation_bytes


def exact_fp16_product(a: np.float16, w: np.float16) -> np.float32:
    """Exact product of two finite FP16 values as a float32."""
    a = np.float16(a)
    w = np.float16(w)
    if not (np.isfinite(a) and np.isfinite(w)):
        raise ValueError("non-finite operand")
    return np.float32(a) * np.float32(w)


def reference_gemm(a: np.ndarray, w: np.ndarray, group_size: int = 128) -> np.ndarray:
    """GEMM over plain FP16 weights with the same accumulation contract.

    Matches ``gemm_full`` bit for bit when the packed tensor stores ``w``
    exactly and its tensor scale is 1.
    """
    a = np.asarray(a, dtype=np.float16)
    w = np.asarray(w, dtype=np.float16)
    return _accel.gemm_full_f32(a.astype(np.float32), w.astype(np.float32), group_size)


def _check_activations(a: np.ndarray, p: PackedTensor, validate: bool = True) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != np.float16:
        raise ValueError(f"activations must be float16, got {a.dtype}")
    if a.ndim != 2:
        raise ValueError(f"activations must be 2-D, got shape {a.shape}")
    if a.shape[1] != p.rows:
        raise ValueError(f"dimension mismatch: A is {a.shape}, W is {p.rows}x{p.cols}")
    if validate and not np.all(np.isfinite(a)):
        raise ValueError("activations contain NaN or Inf")
    return a


def gemm_full(
    a: np.ndarray,
    p: PackedTensor,
    traffic: TrafficCounter | None = None,
    validate: bool = True,
) -> np.ndarray:
    """Full-precision GEMM: A (M,K) fp16 x exact FP16 weights (K,N) -> f32."""
    a = _check_activations(a, p, validate)
    if p.fmt is not QuantFormat.E3M0_REMAP:
        raise FormatMismatchError(f"{p.fmt.value} is not bit-sharing")
    out = _accel.gemm_full_f32(a.astype(np.float32), p.full_values_f32(), p.group_size)
    out *= p.inv_tensor_scale
    if traffic is not None:
        traffic.add(
            weight_bits=p.wq_bits + p.wr_bits,
            scale_bytes=4,
            activation_bytes=2 * a.size,
        )
    return out


def gemm_draft(
    a: np.ndarray,
    p: PackedTensor,
    traffic: TrafficCounter | None = None,
    validate: bool = True,
) -> np.ndarray:
    """Draft GEMM from the 4-bit stream and scales only; never reads wr."""
    a = _check_activations(a, p, validate)
    if p.fmt is not QuantFormat.E3M0_REMAP:
        raise FormatMismatchError(f"{p.fmt.value} is not bit-sharing")
    qv = p.draft_values()
    out = _accel.gemm_draft_f32(a.astype(np.float32), qv, p.group_scales, p.group_size)
    out *= p.inv_tensor_scale
    if traffic is not None:
        traffic.add(
            weight_bits=p.wq_bits,
            scale_bytes=4 * p.group_scales.size + 4,
            activation_bytes=2 * a.size,
        )
    return out
