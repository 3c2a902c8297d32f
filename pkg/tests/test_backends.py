"""The numba kernels and their numpy twins must agree bit for bit."""

from __future__ import annotations

import numpy as np
import pytest

from speq import _accel
from speq.model import ModelConfig, forward_full, init_model
from speq.specdec import SpecDecConfig, greedy_generate, speculative_generate

pytestmark = pytest.mark.skipif(
    "numba" not in _accel.BACKENDS, reason="numba backend unavailable"
)


@pytest.fixture()
def both_backends():
    prev = _accel.active_backend()
    yield
    _accel.set_backend(prev)


def _with(backend, fn, *args):
    _accel.set_backend(backend)
    return fn(*args)


def test_matmul_twin(both_backends):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 33)).astype(np.float32)
    b = rng.normal(size=(33, 9)).astype(np.float32)
    x = _with("numba", _accel.matmul_f32, a, b)
    y = _with("numpy", _accel.matmul_f32, a, b)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))


def test_gemm_engines_twin(both_backends):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 300)).astype(np.float32)
    w = rng.normal(size=(300, 6)).astype(np.float32)
    q = (2.0 ** rng.integers(-13, -1, (300, 6))).astype(np.float32)
    scales = rng.normal(size=(6, 3)).astype(np.float32)
    x = _with("numba", _accel.gemm_full_f32, a, w, 128)
    y = _with("numpy", _accel.gemm_full_f32, a, w, 128)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))
    x = _with("numba", _accel.gemm_draft_f32, a, q, scales, 128)
    y = _with("numpy", _accel.gemm_draft_f32, a, q, scales, 128)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))


def test_pe_engines_twin(both_backends):
    rng = np.random.default_rng(2)
    m, k, n = 3, 130, 5
    sa = rng.integers(0, 2, (m, k)).astype(np.uint8)
    siga = rng.integers(0, 2048, (m, k)).astype(np.int32)
    ea = rng.integers(1, 31, (m, k)).astype(np.int32)
    sw = rng.integers(0, 2, (k, n)).astype(np.uint8)
    sigw = rng.integers(0, 2048, (k, n)).astype(np.int32)
    ew = rng.integers(1, 16, (k, n)).astype(np.int32)
    e4 = rng.integers(2, 15, (k, n)).astype(np.int32)
    scales = rng.normal(size=(n, 2)).astype(np.float32)
    x = _with("numba", _accel.pe_gemm_full_f32, sa, siga, ea, sw, sigw, ew, 128)
    y = _with("numpy", _accel.pe_gemm_full_f32, sa, siga, ea, sw, sigw, ew, 128)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))
    x = _with("numba", _accel.pe_gemm_draft_f32, sa, siga, ea, sw, e4, scales, 128)
    y = _with("numpy", _accel.pe_gemm_draft_f32, sa, siga, ea, sw, e4, scales, 128)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))


def test_attention_kernels_twin(both_backends):
    rng = np.random.default_rng(3)
    q = rng.normal(size=(5, 64)).astype(np.float32)
    k = rng.normal(size=(17, 64)).astype(np.float32)
    probs = np.abs(rng.normal(size=(4, 5, 17))).astype(np.float32)
    x = _with("numba", _accel.attn_scores_f32, q, k, 4)
    y = _with("numpy", _accel.attn_scores_f32, q, k, 4)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))
    x = _with("numba", _accel.rowsum_f32, probs)
    y = _with("numpy", _accel.rowsum_f32, probs)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))
    x = _with("numba", _accel.attn_ctx_f32, probs, k, 4)
    y = _with("numpy", _accel.attn_ctx_f32, probs, k, 4)
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))


def test_model_logits_twin(both_backends):
    m = init_model(ModelConfig(seed=2))
    tokens = [1, 2, 3, 4]
    a = _with("numba", lambda: forward_full(m, tokens, m.new_cache()))
    b = _with("numpy", lambda: forward_full(m, tokens, m.new_cache()))
    assert np.array_equal(a.view(np.uint32), b.view(np.uint32))


def test_generation_twin(both_backends):
    m = init_model(ModelConfig(seed=2))
    cfg = SpecDecConfig()
    a = _with("numba", lambda: speculative_generate(m, [5, 6], cfg, 24))
    b = _with("numpy", lambda: speculative_generate(m, [5, 6], cfg, 24))
    assert a[0] == b[0]
    assert a[1] == b[1]
    g1 = _with("numba", lambda: greedy_generate(m, [5, 6], 24))
    g2 = _with("numpy", lambda: greedy_generate(m, [5, 6], 24))
    assert g1 == g2 == a[0]
