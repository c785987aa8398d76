"""Benchmark the compiled kernel core against the numpy fallback.

Runs each hot kernel on training-shaped inputs and reports per-call times
for both backends, then times one full smoothed-ascent optimizer step
end to end under each backend (the fallback is selected by re-importing
with UNLEARN_LAB_PURE_PYTHON=1 in a subprocess).

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def timeit(fn, repeats):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(repeats):
    from unlearn_lab._kernels import _core  # noqa: F401  (fails -> skip)
    from unlearn_lab._kernels import np_ref

    backends = {"compiled": sys.modules["unlearn_lab._kernels._core"],
                "numpy": np_ref}

    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4096, 512))
    targets = rng.integers(0, 512, size=4096)
    mask = (rng.random(4096) < 0.6).astype(float)
    _, probs = np_ref.softmax_xent_fwd(logits, targets, mask)
    x_act = rng.normal(size=(4096, 256))
    g_act = rng.normal(size=(4096, 256))
    _, t_act = np_ref.gelu_fwd(x_act)
    theta = rng.normal(size=200_000)
    grad = rng.normal(size=200_000)
    ids = rng.integers(0, 512, size=4096)
    vals = rng.normal(size=(4096, 64))
    lcs_a = rng.integers(0, 50, size=400)
    lcs_b = rng.integers(0, 50, size=400)

    cases = {
        "softmax_xent_fwd [4096x512]":
            lambda k: k.softmax_xent_fwd(logits, targets, mask),
        "softmax_xent_bwd [4096x512]":
            lambda k: k.softmax_xent_bwd(probs, targets, mask, 0.1),
        "gelu_fwd         [4096x256]":
            lambda k: k.gelu_fwd(x_act),
        "gelu_bwd         [4096x256]":
            lambda k: k.gelu_bwd(g_act, x_act, t_act),
        "scatter_add_rows [4096->512x64]":
            lambda k: k.scatter_add_rows(np.zeros((512, 64)), ids, vals),
        "adamw_step       [200k]":
            lambda k: k.adamw_step(theta.copy(), grad, np.zeros_like(theta),
                                   np.zeros_like(theta), 1, 1e-3, 0.9, 0.999,
                                   1e-8, 0.01),
        "lcs_len          [400x400]":
            lambda k: k.lcs_len(lcs_a, lcs_b),
    }

    print(f"{'kernel':34} {'compiled':>12} {'numpy':>12} {'speedup':>9}", flush=True)
    for name, call in cases.items():
        times = {
            label: timeit(lambda k=kernel: call(k), repeats)
            for label, kernel in backends.items()
        }
        ratio = times["numpy"] / times["compiled"]
        print(f"{name:34} {times['compiled']*1e3:9.3f} ms {times['numpy']*1e3:9.3f} ms"
              f"  {ratio:7.2f}x", flush=True)


STEP_SNIPPET = r"""
import time
import numpy as np
from unlearn_lab._kernels import BACKEND
from unlearn_lab.corpus import CorpusSpec, synth_corpus
from unlearn_lab.tokenizer import Vocabulary
from unlearn_lab.checkpoint import Checkpoint, ModelConfig
from unlearn_lab.model import encode_example, make_batch
from unlearn_lab.objectives import UnlearnMethodConfig, sga_loss
from unlearn_lab.normal_data import build_normal_set

corp = synth_corpus(CorpusSpec(authors=40, qa_per_author=5, forget_fraction=0.1), 11)
vocab = Vocabulary.train(corp.all_text(), 512)
cfg = ModelConfig(vocab_size=vocab.size, dim=64, layers=2, heads=2, context=128, seed=3)
ck = Checkpoint.init(cfg)
nset = build_normal_set(corp.forget, corp.retain, "similarity", 12)
ids = [r.id for r in corp.forget]
fex = [encode_example(vocab, r.question, r.answer) for r in corp.forget]
nex = {rid: [encode_example(vocab, c.question, c.answer)
             for c in nset.companions[rid]] for rid in ids}
fb = make_batch(fex, 128)
nbs = [make_batch([nex[ids[i]][k] for i in range(20)], 128) for k in range(12)]
mcfg = UnlearnMethodConfig(method="SGA", rate=0.8, slot_count=13)
sga_loss(ck, fb, nbs, mcfg).grad()  # warm up
start = time.perf_counter()
n = 5
for _ in range(n):
    ck = ck.adamw_update(sga_loss(ck, fb, nbs, mcfg).grad(), 1e-4)
print(f"{BACKEND}: {(time.perf_counter()-start)/n*1e3:.1f} ms per optimizer step")
"""


def bench_full_step():
    print("\nfull smoothed-ascent optimizer step (12 normal slots, 20 records):",
          flush=True)
    for env_extra in ({}, {"UNLEARN_LAB_PURE_PYTHON": "1"}):
        env = dict(os.environ, **env_extra)
        subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, check=True)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    try:
        bench_kernels(args.repeats)
    except ImportError:
        print("compiled core not available; only the numpy backend is installed")
    bench_full_step()
