"""Functional and cycle model of the reconfigurable PE array.

The array runs in two modes with the same 31-bit PE input width:

* full mode — one FP16 activation x one 15-bit weight (sign, 4-bit
  exponent after the always-zero top bit is dropped, 10-bit mantissa).
  The 11-bit weight significand is split into a high-6/low-5 pair, each
  multiplied by the activation significand in its own Wallace tree, and
  the partial products are summed; that split product is exact, so full
  mode reproduces ``kernels.gemm_full`` bit for bit.
* quantize mode — one FP16 activation x three 5-bit draft weights
  (sign + 4-bit exponent each). The first exponent add uses the PE's
  exponent adder; the other two reuse the Wallace-tree adders with the
  multiplier masked, giving three partial sums per cycle and 3x the MAC
  throughput at the same PE count.

Cycle counts are ``ceil(macs / (PEs * throughput)) + fill``; the
pre-ceiling MAC-cycle figure is kept as an exact rational so the 3x
throughput ratio between modes is exact for every shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _accel, bsfp
from .kernels import GemmMode, GemmSpec, _check_activations
from .quantize import PackedTensor, QuantFormat

__all__ = [
    "PeConfig",
    "PeOperandsQuant",
    "CycleReport",
    "ACTIVATION_BITS",
    "FULL_WEIGHT_BITS",
    "QUANT_WEIGHT_BITS",
    "pe_input_bits",
    "pe_full_mac",
    "pe_quant_mac3",
    "decompose_fp16",
    "estimate",
    "simulate_gemm",
]

ACTIVATION_BITS = 16
FULL_WEIGHT_BITS = 1 + 4 + 10  # sign, exponent (top bit dropped), mantissa
QUANT_WEIGHT_BITS = 3 * (1 + 4)  # three (sign, exp4) draft weights


def pe_input_bits(mode: GemmMode) -> int:
    """Total PE operand width; both modes are 31 bits."""
    weight = QUANT_WEIGHT_BITS if mode is GemmMode.DRAFT else FULL_WEIGHT_BITS
    return ACTIVATION_BITS + weight


@dataclass(frozen=True)
class PeConfig:
    tiles: int = 8
    pes_per_tile: int = 128
    array: tuple[int, int] = (32, 32)
    frequency_hz: float = 500e6
    fill_cycles: int = 32  # pipeline fill/drain, one array edge by default

    def __post_init__(self) -> None:
        if self.tiles * self.pes_per_tile != self.array[0] * self.array[1]:
            raise ValueError("tiles * pes_per_tile must equal the array size")

    @property
    def total_pes(self) -> int:
        return self.tiles * self.pes_per_tile


@dataclass(frozen=True)
class PeOperandsQuant:
    """Quantize-mode PE inputs: one activation, three (sign, exp4) weights."""

    activation: np.float16
    weights: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


@dataclass
class CycleReport:
    mode: GemmMode
    m: int
    n: int
    k: int
    macs: int
    pe_count: int
    macs_per_pe_per_cycle: int
    mac_cycles: Fraction
    fill_cycles: int
    cycles: int
    weight_bits: int
    scale_bytes: int
    activation_bytes: int
    frequency_hz: float

    @property
    def weight_bytes(self) -> float:
        return self.weight_bits / 8

    @property
    def time_s(self) -> float:
        return self.cycles / self.frequency_hz


def decompose_fp16(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split FP16 values into (sign, significand, adjusted exponent).

    value = (-1)^sign * sig * 2^(e - 25), with sig in [1024, 2047] for
    normals and the subnormal/zero row folded in via e = max(exp5, 1).
    """
    bits = np.asarray(a, dtype=np.float16).view(np.uint16)
    sign = (bits >> 15).astype(np.uint8)
    exp5 = ((bits >> 10) & np.uint16(0x1F)).astype(np.int32)
    man = (bits & np.uint16(0x3FF)).astype(np.int32)
    normal = exp5 > 0
    sig = np.where(normal, man + 1024, man).astype(np.int32)
    e = np.maximum(exp5, 1)
    return sign, sig, e


def pe_full_mac(a: np.float16, w: np.float16) -> np.float32:
    """Full-mode MAC operand product via the split-significand datapath."""
    a = np.float16(a)
    w = np.float16(w)
    if not (np.isfinite(a) and np.isfinite(w)):
        raise ValueError("non-finite operand")
    if ((w.view(np.uint16) >> 10) & 0x1F) > 15:
        raise bsfp.ExponentRangeError("weight exponent above 15")
    sa, sig_a, ea = (x.item() for x in decompose_fp16(a))
    sw, sig_w, ew = (x.item() for x in decompose_fp16(w))
    hi, lo = sig_w >> 5, sig_w & 0x1F
    prod = sig_a * hi * 32 + sig_a * lo  # two Wallace trees, summed
    if sa != sw:
        prod = -prod
    return np.float32(math.ldexp(np.float32(prod), ea + ew - 50))


def pe_quant_mac3(ops: PeOperandsQuant) -> tuple[np.float32, np.float32, np.float32]:
    """Quantize-mode PE: three exact activation x (+/- 2^(exp4-15)) addends."""
    a = np.float16(ops.activation)
    if not np.isfinite(a):
        raise ValueError("non-finite activation")
    sa, sig_a, ea = (x.item() for x in decompose_fp16(a))
    out = []
    for sw, exp4 in ops.weights:
        mag = np.float32(sig_a)
        if sa != (sw & 1):
            mag = -mag
        out.append(np.float32(math.ldexp(mag, ea + exp4 - 40)))
    return tuple(out)


def estimate(spec: GemmSpec, cfg: PeConfig | None = None, group_size: int = 128) -> CycleReport:
    """Analytic cycle/traffic report for a GEMM shape, no data required."""
    if cfg is None:
        cfg = PeConfig()
    if min(spec.m, spec.n, spec.k) < 1:
        raise ValueError("dimensions must be positive")
    draft = spec.mode is GemmMode.DRAFT
    throughput = 3 if draft else 1
    mac_cycles = Fraction(spec.macs, cfg.total_pes * throughput)
    n_groups = -(-spec.k // group_size)
    return CycleReport(
        mode=spec.mode,
        m=spec.m,
        n=spec.n,
        k=spec.k,
        macs=spec.macs,
        pe_count=cfg.total_pes,
        macs_per_pe_per_cycle=throughput,
        mac_cycles=mac_cycles,
        fill_cycles=cfg.fill_cycles,
        cycles=cfg.fill_cycles + math.ceil(mac_cycles),
        weight_bits=(4 if draft else 16) * spec.k * spec.n,
        scale_bytes=(4 * n_groups * spec.n + 4) if draft else 4,
        activation_bytes=2 * spec.m * spec.k,
        frequency_hz=cfg.frequency_hz,
    )


def simulate_gemm(
    a: np.ndarray,
    p: PackedTensor,
    mode: GemmMode,
    cfg: PeConfig | None = None,
) -> tuple[np.ndarray, CycleReport]:
    """Run a GEMM through the PE datapath model.

    Outputs are bit-identical to ``kernels.gemm_full`` / ``gemm_draft``:
    each PE-level product is exact, and accumulation follows the same
    fixed order in float32.
    """
    a = _check_activations(a, p)
    if p.fmt is not QuantFormat.E3M0_REMAP:
        raise ValueError(f"PE model requires the bit-sharing format, got {p.fmt.value}")
    sa, sig_a, ea = decompose_fp16(a)
    sig_a = np.ascontiguousarray(sig_a)
    if mode is GemmMode.FULL:
        sw, sig_w, ew = decompose_fp16(p.full_values())
        out = _accel.pe_gemm_full_f32(
            sa, sig_a, ea, sw, np.ascontiguousarray(sig_w), ew, p.group_size
        )
    else:
        sw, exp4 = p.draft_codes()
        out = _accel.pe_gemm_draft_f32(
            sa, sig_a, ea, sw, exp4, p.group_scales, p.group_size
        )
    out *= p.inv_tensor_scale
    spec = GemmSpec(m=a.shape[0], n=p.cols, k=p.rows, mode=mode)
    return out, estimate(spec, cfg, group_size=p.group_size)
