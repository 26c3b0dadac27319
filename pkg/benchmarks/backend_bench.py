"""Compare the numba and pure-numpy kernel lanes.

Times the three hot kernels (matmul, row_softmax, attend) in each available
lane, then times a short speculative decode in the lane selected at import
(set REDRAFTER_BACKEND before running to pin it).

Usage: python3 benchmarks/backend_bench.py [--repeats N]
"""

import argparse
import time

import numpy as np

from redrafter import DecodeConfig, DrafterParams, RnnProposer, speculative_generate
from redrafter import kernels
from redrafter.model import ModelConfig, TinyTransformer


def time_call(fn, repeats):
    fn()  # warm-up (numba compiles here)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1e6  # microseconds


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(64, 64)).astype(np.float32)
    b = rng.normal(size=(64, 64)).astype(np.float32)
    scores = rng.normal(size=(64, 64)).astype(np.float32)
    q = rng.normal(size=(16, 64)).astype(np.float32)
    kv = rng.normal(size=(48, 64)).astype(np.float32)
    bias = np.zeros((16, 48), dtype=np.float32)
    scale = np.float32(0.125)

    print(f"{'kernel':<14}" + "".join(f"{lane:>14}" for lane in kernels.available_lanes()))
    cases = [
        ("matmul 64x64", lambda fns: fns[0](a, b)),
        ("softmax 64x64", lambda fns: fns[1](scores)),
        ("attend 16/48", lambda fns: fns[2](q, kv, kv, bias, 4, scale)),
    ]
    for label, call in cases:
        cells = []
        for lane in kernels.available_lanes():
            fns = kernels.get_lane(lane)
            cells.append(f"{time_call(lambda: call(fns), repeats):>11.1f} us")
        print(f"{label:<14}" + "".join(f"{c:>14}" for c in cells))


def bench_decode(repeats):
    config = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=4,
                         d_ff=64, max_seq_len=128)
    base = TinyTransformer.random(config, seed=1)
    params = DrafterParams.random(np.random.default_rng(2), 32, 64)
    proposer = RnnProposer(params, base.token_embeddings)
    cfg = DecodeConfig(beam_width=4, beam_length=4, max_new_tokens=24)
    prompt = list(np.random.default_rng(3).integers(0, 64, size=8))

    def run():
        speculative_generate(base, proposer, prompt, cfg)

    us = time_call(run, repeats)
    print(f"\nspeculative decode (24 tokens, width 4, lane {kernels.BACKEND}): "
          f"{us / 1e3:.1f} ms")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()
    print(f"lanes available: {', '.join(kernels.available_lanes())} "
          f"(active: {kernels.BACKEND})\n")
    bench_kernels(args.repeats)
    bench_decode(max(1, args.repeats // 10))


if __name__ == "__main__":
    main()
