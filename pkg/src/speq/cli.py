"""Command-line surface tying the modules together.

Exit codes: 0 ok, 1 verification failure (bit-exactness or losslessness
check did not hold), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import sys
import time
import zlib

import numpy as np

from . import bsfp, container, pe, quantize, specdec
from ._accel import active_backend
from .kernels import GemmMode, GemmSpec, TrafficCounter, gemm_draft, gemm_full
from .model import ContextOverflowError, ModelConfig, init_model
from .quantize import QuantFormat
from .report import RunReport

_FORMAT_CHOICES = [f.value for f in QuantFormat]


def _load_tensor(path: str, bf16: bool = False) -> np.ndarray:
    arr = np.load(path)
    if bf16:
        if arr.dtype != np.uint16:
            raise ValueError("--bf16 expects a uint16 array of BF16 bit patterns")
        arr = quantize.ingest_bf16(arr)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D tensor, got shape {arr.shape}")
    return arr.astype(np.float16)


def _new_report(args) -> RunReport:
    rep = RunReport()
    if not args.no_timestamp:
        rep.add("run", timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"))
    rep.add("run", command=args.command, backend=active_backend())
    return rep


def _emit(rep: RunReport) -> None:
    sys.stdout.write(rep.render())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_quantize(args) -> int:
    w = _load_tensor(args.infile, args.bf16)
    fmt = QuantFormat(args.format)
    p = quantize.quantize_tensor(w, args.group_size, fmt)
    container.write_container(args.outfile, p)
    scaled, _ = quantize.handle_outliers(w)
    n = p.rows * p.cols
    scale_bits = 32.0 * (p.group_scales.size + 1)
    rep = _new_report(args)
    rep.add(
        "quantize",
        rows=p.rows,
        cols=p.cols,
        format=fmt.value,
        group_size=p.group_size,
        tensor_scale=p.tensor_scale,
        mse=quantize.reconstruction_mse(p, scaled.astype(np.float64)),
        payload_bits_per_weight=(p.wq_bits + p.wr_bits) / n,
        draft_bits_per_weight=p.wq_bits / n,
        scale_overhead_bits_per_weight=scale_bits / n,
        out=args.outfile,
    )
    _emit(rep)
    return 0


def _cmd_inspect(args) -> int:
    if args.infile.endswith(".speq"):
        p = container.read_container(args.infile)
        w = quantize.dequantize_full(p)
    else:
        w = _load_tensor(args.infile, args.bf16)
    hist = quantize.exponent_histogram(w)
    rep = _new_report(args)
    rep.add("hist", total=hist.total, frac_unused=hist.frac_unused)
    for i in range(32):
        rep.add("hist", **{f"exp{i:02d}": int(hist.counts[i])})
    _emit(rep)
    return 0


def _cmd_roundtrip(args) -> int:
    rep = _new_report(args)
    if args.exhaustive:
        bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
        bits = bits[((bits >> 10) & 0x1F) <= 15]
        wq, wr = bsfp.encode_array(bits)
        back = bsfp.decode_full_array(wq, wr)
        mismatches = int(np.count_nonzero(back != bits))
        rep.add("roundtrip", mode="exhaustive", patterns=len(bits), mismatches=mismatches)
    elif args.infile is None:
        raise ValueError("roundtrip needs a file or --exhaustive")
    elif args.infile.endswith(".speq"):
        with open(args.infile, "rb") as f:
            data = f.read()
        rewritten = container.to_bytes(container.from_bytes(data))
        mismatches = int(rewritten != data)
        rep.add("roundtrip", mode="container", bytes=len(data), mismatches=mismatches)
    else:
        w = _load_tensor(args.infile, args.bf16)
        scaled, _ = quantize.handle_outliers(w)
        p = quantize.quantize_tensor(w, args.group_size, QuantFormat.E3M0_REMAP)
        back = quantize.dequantize_full(p)
        mismatches = int(np.count_nonzero(back.view(np.uint16) != scaled.view(np.uint16)))
        rep.add("roundtrip", mode="tensor", elements=scaled.size, mismatches=mismatches)
    rep.add("roundtrip", ok=mismatches == 0)
    _emit(rep)
    return 0 if mismatches == 0 else 1


def _cmd_gemm(args) -> int:
    a = _load_tensor(args.a)
    if a.shape[1] == 1 and a.shape[0] > 1:
        a = a.T  # a vector activation is one row
    p = container.read_container(args.w)
    traffic = TrafficCounter()
    fn = gemm_draft if args.mode == "draft" else gemm_full
    out = fn(a, p, traffic)
    if args.out:
        np.save(args.out, out)
    rep = _new_report(args)
    rep.add(
        "gemm",
        mode=args.mode,
        m=out.shape[0],
        n=out.shape[1],
        k=p.rows,
        weight_bits=traffic.weight_bits,
        weight_bytes=traffic.weight_bytes,
        scale_bytes=traffic.scale_bytes,
        activation_bytes=traffic.activation_bytes,
        output_crc32=zlib.crc32(out.tobytes()) & 0xFFFFFFFF,
    )
    _emit(rep)
    return 0


def _cmd_specdec(args) -> int:
    cfg = ModelConfig(seed=args.seed)
    sd = specdec.SpecDecConfig(max_draft_len=args.max_draft_len, gamma=args.gamma, seed=args.seed)
    model = init_model(cfg)
    rng = np.random.default_rng(args.seed)
    rep = _new_report(args)
    rounds = proposed = accepted = tokens = 0
    mismatched = 0
    for i in range(args.prompts):
        if args.prompt is not None:
            prompt = list(args.prompt.encode("utf-8"))
        else:
            prompt = rng.integers(0, cfg.vocab, size=args.prompt_len).tolist()
        out, stats = specdec.speculative_generate(model, prompt, sd, args.gen_len)
        ref = specdec.greedy_generate(model, prompt, args.gen_len)
        mismatched += int(out != ref)
        rounds += stats.rounds
        proposed += stats.proposed
        accepted += stats.accepted
        tokens += stats.tokens_generated
    rep.add(
        "specdec",
        prompts=args.prompts,
        gen_len=args.gen_len,
        gamma=args.gamma,
        max_draft_len=args.max_draft_len,
        rounds=rounds,
        proposed=proposed,
        accepted=accepted,
        accept_rate=accepted / proposed if proposed else 0.0,
        mean_draft_len=proposed / rounds if rounds else 0.0,
        mean_accept_len=tokens / rounds if rounds else 0.0,
        lossless=mismatched == 0,
        mismatched_prompts=mismatched,
    )
    _emit(rep)
    return 0 if mismatched == 0 else 1


def _cmd_perf(args) -> int:
    la = specdec.expected_accept_length(args.r, args.max_draft_len)
    perf = specdec.PerfParams(t_draft=args.td_ratio, t_verify=args.tv_ratio, t_ar=1.0)
    rep = _new_report(args)
    rep.add(
        "perf",
        r=args.r,
        max_draft_len=args.max_draft_len,
        td_ratio=args.td_ratio,
        tv_ratio=args.tv_ratio,
        accept_len=la,
        speedup=specdec.expected_speedup(args.r, args.max_draft_len, perf),
        speedup_approx=specdec.expected_speedup_approx(args.r, args.max_draft_len, args.td_ratio),
    )
    if args.mc_rounds:
        mc = specdec.monte_carlo_accept_length(args.r, args.max_draft_len, args.mc_rounds, args.seed)
        rep.add(
            "perf",
            mc_rounds=args.mc_rounds,
            mc_accept_len=mc,
            mc_rel_err=abs(mc - la) / la,
        )
    _emit(rep)
    return 0


def _cmd_simulate(args) -> int:
    cfg = pe.PeConfig(
        tiles=args.tiles,
        pes_per_tile=args.pes_per_tile,
        array=tuple(args.array),
        frequency_hz=args.frequency,
        fill_cycles=args.fill_cycles,
    )
    spec = GemmSpec(m=args.m, n=args.n, k=args.k, mode=GemmMode(args.mode))
    r = pe.estimate(spec, cfg, group_size=args.group_size)
    rep = _new_report(args)
    rep.add(
        "cycles",
        mode=r.mode.value,
        m=r.m,
        n=r.n,
        k=r.k,
        macs=r.macs,
        pe_count=r.pe_count,
        macs_per_pe_per_cycle=r.macs_per_pe_per_cycle,
        mac_cycles=r.mac_cycles,
        fill_cycles=r.fill_cycles,
        cycles=r.cycles,
        weight_bits=r.weight_bits,
        weight_bytes=r.weight_bytes,
        scale_bytes=r.scale_bytes,
        activation_bytes=r.activation_bytes,
        time_s=r.time_s,
    )
    _emit(rep)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="speq", description=__doc__)
    ap.add_argument("--no-timestamp", action="store_true", help="omit run.timestamp line")
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="pack an FP16/BF16 tensor")
    q.add_argument("--in", dest="infile", required=True)
    q.add_argument("--out", dest="outfile", required=True)
    q.add_argument("--format", choices=_FORMAT_CHOICES, default="e3m0-remap")
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--bf16", action="store_true", help="input npy holds BF16 bit patterns")
    q.set_defaults(fn=_cmd_quantize)

    i = sub.add_parser("inspect", help="exponent histogram of a tensor")
    i.add_argument("infile")
    i.add_argument("--bf16", action="store_true")
    i.set_defaults(fn=_cmd_inspect)

    r = sub.add_parser("roundtrip", help="bit-exactness check")
    r.add_argument("infile", nargs="?")
    r.add_argument("--exhaustive", action="store_true", help="sweep all in-range FP16 patterns")
    r.add_argument("--group-size", type=int, default=128)
    r.add_argument("--bf16", action="store_true")
    r.set_defaults(fn=_cmd_roundtrip)

    g = sub.add_parser("gemm", help="run a draft or full GEMM")
    g.add_argument("--mode", choices=["draft", "full"], required=True)
    g.add_argument("--a", required=True, help="activations (.npy)")
    g.add_argument("--w", required=True, help="weights (.speq)")
    g.add_argument("--out", help="save outputs (.npy)")
    g.set_defaults(fn=_cmd_gemm)

    s = sub.add_parser("specdec", help="speculative decode on the toy model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gamma", type=float, default=0.6)
    s.add_argument("--max-draft-len", type=int, default=16)
    s.add_argument("--gen-len", type=int, default=256)
    s.add_argument("--prompts", type=int, default=1)
    s.add_argument("--prompt-len", type=int, default=8)
    s.add_argument("--prompt", help="UTF-8 text used as byte-level tokens")
    s.set_defaults(fn=_cmd_specdec)

    p = sub.add_parser("perf", help="accept-length and speedup model")
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--L", dest="max_draft_len", type=int, required=True)
    p.add_argument("--td-ratio", type=float, default=0.25)
    p.add_argument("--tv-ratio", type=float, default=1.0)
    p.add_argument("--mc-rounds", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_perf)

    m = sub.add_parser("simulate", help="PE-array cycle report for a GEMM shape")
    m.add_argument("--m", type=int, required=True)
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--mode", choices=["draft", "full"], required=True)
    m.add_argument("--group-size", type=int, default=128)
    m.add_argument("--tiles", type=int, default=8)
    m.add_argument("--pes-per-tile", type=int, default=128)
    m.add_argument("--array", type=int, nargs=2, default=[32, 32])
    m.add_argument("--frequency", type=float, default=500e6)
    m.add_argument("--fill-cycles", type=int, default=32)
    m.set_defaults(fn=_cmd_simulate)

    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (OSError, ValueError, ContextOverflowError) as e:
        print(f"speq: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
