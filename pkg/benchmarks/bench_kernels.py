"""Compare the numpy and numba kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Kernels are timed in-process from both kernel tables.  The end-to-end
numbers (forward and forward+backward on a QA sequence) come from child
processes started with STABLE_GATE_NUMBA=0 / 1, since the backend is bound
at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from stable_gate import _kernels

E2E = r"""
import json, timeit
from stable_gate import _kernels
from stable_gate.model import ModelConfig, Vocabulary, init_params, forward_logprobs, loss_and_grads, qa_sequence
v = Vocabulary.default()
p = init_params(ModelConfig(v.size, context_len=64), seed=0)
s = qa_sequence("kavo color? ", "red", v)
batch = [qa_sequence("kavo color? ", "red", v), qa_sequence("lime pet? ", "owl", v)]
forward_logprobs(p, s); loss_and_grads(p, batch)
n = {n}
fwd = min(timeit.repeat(lambda: forward_logprobs(p, s), number=n, repeat=3)) / n
bwd = min(timeit.repeat(lambda: loss_and_grads(p, batch), number=n, repeat=3)) / n
print(json.dumps({{"backend": _kernels.BACKEND, "forward_ms": fwd * 1e3, "loss_and_grads_ms": bwd * 1e3}}))
"""


def kernel_inputs(rng, H=2, T=24, dh=16, d=32, V=31):
    q, k, v = (rng.standard_normal((H, T, dh)) for _ in range(3))
    out, probs = _kernels.attention_forward_np(q, k, v)
    x = rng.standard_normal((T, d))
    g, b = rng.standard_normal((1, d)), rng.standard_normal((1, d))
    _, xhat, rstd = _kernels.layernorm_forward_np(x, g, b)
    return {
        "attention_forward": (q, k, v),
        "attention_backward": (q, k, v, probs, rng.standard_normal(out.shape)),
        "layernorm_forward": (x, g, b),
        "layernorm_backward": (rng.standard_normal((T, d)), xhat, rstd, g),
        "log_softmax": (rng.standard_normal((T, V)),),
    }


def bench_kernels(repeat):
    args = kernel_inputs(np.random.default_rng(0))
    rows = []
    for name, a in args.items():
        row = {"kernel": name}
        for label, table in (("numpy", _kernels.NUMPY_KERNELS), ("numba", _kernels.NUMBA_KERNELS)):
            fn = table[name]
            fn(*a)  # compile
            row[label + "_us"] = min(timeit.repeat(lambda: fn(*a), number=repeat, repeat=3)) / repeat * 1e6
        row["speedup"] = row["numpy_us"] / row["numba_us"]
        rows.append(row)
    return rows


def bench_end_to_end(n):
    out = []
    for flag in ("0", "1"):
        env = dict(os.environ, STABLE_GATE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    kern = bench_kernels(args.repeat)
    e2e = bench_end_to_end(max(args.repeat // 4, 10))
    if args.json:
        print(json.dumps({"kernels": kern, "end_to_end": e2e}, indent=1))
        return
    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for r in kern:
        print(f"{r['kernel']:<20}{r['numpy_us']:>12.2f}{r['numba_us']:>12.2f}{r['speedup']:>9.1f}x")
    print()
    for r in e2e:
        print(f"{r['backend']:<8} forward {r['forward_ms']:.3f} ms   loss_and_grads {r['loss_and_grads_ms']:.3f} ms")


if __name__ == "__main__":
    main()
