"""Compare the compiled kernel extension against the numpy fallback.

Times every hot kernel on model-shaped inputs and reports per-call
latency plus speedup. Run from the repository root:

    python benchmarks/bench_kernels.py [--repeats 200]

The full-model comparison (forward + backward through the recognizer)
re-imports the package under UNLEARNLAB_FORCE_NUMPY in a subprocess, so
both backends run the identical code path.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from unlearnlab.kernels import _np as np_backend

try:
    from unlearnlab.kernels import _ck as ck_backend
except ImportError:
    ck_backend = None

# (name, argument builder) on shapes the recognizer actually hits:
# patch activations (B*64 patches x 64 feats) and per-slot softmax rows.
RNG = np.random.default_rng(0)
ACT = RNG.normal(size=(2048, 64))
GRAD = RNG.normal(size=(2048, 64))
ROWS = RNG.normal(size=(256, 33))
ROWS_Y = np_backend.softmax_fwd(ROWS)
ROWS_G = RNG.normal(size=ROWS.shape)
PIX = RNG.random((64, 3072))
PIXG = RNG.normal(size=(64, 3072))

CASES = [
    ("relu_fwd", lambda b: b.relu_fwd(ACT)),
    ("relu_bwd", lambda b: b.relu_bwd(ACT, GRAD)),
    ("tanh_fwd", lambda b: b.tanh_fwd(ACT)),
    ("tanh_bwd", lambda b: b.tanh_bwd(np.tanh(ACT), GRAD)),
    ("sigmoid_fwd", lambda b: b.sigmoid_fwd(ACT)),
    ("sigmoid_bwd", lambda b: b.sigmoid_bwd(1 / (1 + np.exp(-ACT)), GRAD)),
    ("clip_fwd", lambda b: b.clip_fwd(PIX, 0.0, 1.0)),
    ("clip_bwd", lambda b: b.clip_bwd(PIX, PIXG, 0.0, 1.0)),
    ("softmax_fwd", lambda b: b.softmax_fwd(ROWS)),
    ("softmax_bwd", lambda b: b.softmax_bwd(ROWS_Y, ROWS_G)),
]

MODEL_SNIPPET = """
import time
import numpy as np
from unlearnlab import grad as G
from unlearnlab.data import build_vocab, make_roster, render_single
from unlearnlab.kernels import BACKEND
from unlearnlab.model import CAPTION_PROMPT, encode_prompt, forward, init_state
from unlearnlab.nnops import bce_with_logits

roster = make_roster(8, 2, 0)
vocab = build_vocab(roster)
state = init_state(__import__("unlearnlab.model", fromlist=["ModelGeometry"])
                   .ModelGeometry(), vocab, seed=0)
images = np.stack([render_single(roster[k % 8], k).reshape(-1)
                   for k in range(32)])
prompts = np.tile(encode_prompt(CAPTION_PROMPT, vocab), (32, 1))

def step():
    out = forward(state, images, prompts, trainable="base")
    loss = G.mean(bce_with_logits(G.reshape(out.logits,
                                            (out.logits.data.size,)), 0.0))
    G.backward(loss)

step()  # warm up caches
t0 = time.perf_counter()
for _ in range(REPEATS):
    step()
print(f"{BACKEND} {(time.perf_counter() - t0) / REPEATS * 1e3:.3f}")
"""


def bench_kernels(repeats):
    print(f"{'kernel':<14} {'numpy (us)':>12} {'cython (us)':>12} "
          f"{'speedup':>8}")
    for name, fn in CASES:
        t_np = timeit.timeit(lambda: fn(np_backend), number=repeats)
        t_np_us = t_np / repeats * 1e6
        if ck_backend is None:
            print(f"{name:<14} {t_np_us:>12.2f} {'-':>12} {'-':>8}")
            continue
        got_np = fn(np_backend)
        got_ck = fn(ck_backend)
        assert np.allclose(got_np, got_ck, atol=1e-12), name
        t_ck = timeit.timeit(lambda: fn(ck_backend), number=repeats)
        t_ck_us = t_ck / repeats * 1e6
        print(f"{name:<14} {t_np_us:>12.2f} {t_ck_us:>12.2f} "
              f"{t_np / t_ck:>7.2f}x")


def bench_model(repeats):
    print("\nfull forward+backward, batch 32 (ms/step):")
    for force in ("0", "1"):
        env = dict(os.environ, UNLEARNLAB_FORCE_NUMPY=force)
        if force == "0":
            env.pop("UNLEARNLAB_FORCE_NUMPY")
        code = f"REPEATS = {repeats}\n" + MODEL_SNIPPET
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        backend, ms = out.stdout.split()
        print(f"  {backend:<8} {float(ms):.3f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--model-repeats", type=int, default=20)
    args = parser.parse_args()
    if ck_backend is None:
        print("compiled extension unavailable; numpy timings only\n")
    t0 = time.perf_counter()
    bench_kernels(args.repeats)
    bench_model(args.model_repeats)
    print(f"\ntotal {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
