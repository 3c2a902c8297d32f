"""SPEQ: bit-sharing weight quantization with self-speculative decoding.

A packed weight store whose low 4 bits per weight form a standalone draft
model and whose full 16 bits reconstruct the original FP16 tensor exactly,
plus the kernels, decoding controller, PE-array model, and file format
built around it.
"""

from ._accel import active_backend, set_backend
from .bsfp import (
    BsfpWord,
    ExponentRangeError,
    MalformedWordError,
    decode_full_exp,
    decode_q_exp,
    encode_fp16_bits,
    full_value,
    q_magnitude,
    remap_encode,
)
from .container import read_container, write_container
from .kernels import GemmMode, GemmSpec, TrafficCounter, exact_fp16_product, gemm_draft, gemm_full
from .model import (
    ContextOverflowError,
    KvCache,
    ModelConfig,
    ToyModel,
    forward_draft,
    forward_full,
    init_model,
)
from .pe import CycleReport, PeConfig, estimate, pe_full_mac, pe_quant_mac3, simulate_gemm
from .quantize import (
    ExpHistogram,
    FormatMismatchError,
    PackedTensor,
    QuantFormat,
    dequantize_full,
    exponent_histogram,
    fit_group_scale,
    handle_outliers,
    ingest_bf16,
    quantize_tensor,
)
from .specdec import (
    PerfParams,
    SpecDecConfig,
    SpecDecStats,
    expected_accept_length,
    expected_speedup,
    expected_speedup_approx,
    greedy_generate,
    monte_carlo_accept_length,
    speculative_generate,
)

__version__ = "0.1.0"
