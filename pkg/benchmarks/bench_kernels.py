"""Time the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

The backend is fixed at import time, so each backend runs in its own worker
process (SSRCAP_NUMBA=1 / 0); the parent prints a side-by-side table.  Sizes
follow the micro-world benchmark preset: batch 32, hidden 128, vocabulary
about 150, beam 10.  Kernel rows time both implementations; the last two
rows time the package as dispatched, which keeps a kernel on numpy wherever
the numba loop loses.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

B, H, V = 32, 128, 150


def cases():
    from ssrcap import autodiff as ad
    from ssrcap import kernels as K
    from ssrcap.decoding import beam_search
    from ssrcap.objectives import caption_xent_loss
    from ssrcap.seq_models import Captioner

    # some kernels dispatch to numpy under both backends; time the numba loops directly
    pick = (lambda name: getattr(K, "nb_" + name)) if K.HAS_NUMBA else (lambda name: getattr(K, "np_" + name))
    log_softmax, log_softmax_bwd = pick("log_softmax"), pick("log_softmax_bwd")
    lstm_fwd, gru_fwd = pick("lstm_cell_fwd"), pick("gru_cell_fwd")

    rng = np.random.default_rng(0)
    gates = rng.normal(size=(B, 4 * H)).astype(np.float32)
    c = rng.normal(size=(B, H)).astype(np.float32)
    h, c2, act, tc = K.lstm_cell_fwd(gates, c)
    gx, gh = rng.normal(size=(B, 3 * H)).astype(np.float32), rng.normal(size=(B, 3 * H)).astype(np.float32)
    _, r, z, n = K.gru_cell_fwd(gx, gh, c)
    logits = rng.normal(size=(B, V)).astype(np.float32)
    y = K.log_softmax_fwd(logits)
    sim = rng.uniform(-1, 1, size=(128, 128))
    ex = np.zeros((128, 128), dtype=bool)
    gold = np.arange(128)
    probs = np.exp(y.astype(np.float64))
    u = rng.random(B)

    cap = Captioner(V, 32, 64, H, seed=0)
    feats = rng.normal(size=(B, 32)).astype(np.float32)
    caps = [list(rng.integers(4, V, size=int(rng.integers(5, 12)))) for _ in range(B)]

    def train_step():
        with ad.Tape():
            loss = caption_xent_loss(cap, feats, caps, True, np.random.default_rng(1))
        ad.backward(loss)

    return {
        "lstm_cell fwd": lambda: lstm_fwd(gates, c),
        "lstm_cell bwd": lambda: K.lstm_cell_bwd(c, c, act, c, tc),
        "gru_cell fwd": lambda: gru_fwd(gx, gh, c),
        "gru_cell bwd": lambda: K.gru_cell_bwd(c, r, z, n, gh, c),
        "log_softmax fwd": lambda: log_softmax(logits),
        "log_softmax bwd": lambda: log_softmax_bwd(logits, y),
        "hardneg fwd 128": lambda: K.hardneg_fwd(sim, 0.2, ex),
        "gold_ranks 128": lambda: K.gold_ranks(sim, gold),
        "sample_rows": lambda: K.sample_rows(probs, u),
        "captioner fwd+bwd": train_step,
        "beam search (10)": lambda: beam_search(cap, feats[0], beam=10, max_len=16),
    }


def worker(repeat):
    from ssrcap import kernels

    out = {}
    for name, fn in cases().items():
        fn()  # compile / warm caches
        number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
        best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
        out[name] = best
    json.dump({"backend": kernels.BACKEND, "times": out}, sys.stdout)


def run_backend(flag, repeat):
    env = {**os.environ, "SSRCAP_NUMBA": flag, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1"}
    r = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)], env=env,
                       capture_output=True, text=True, check=True)
    return json.loads(r.stdout)


def fmt(sec):
    return f"{sec * 1e6:10.1f} us" if sec < 1e-2 else f"{sec * 1e3:10.1f} ms"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat)
        return
    nb = run_backend("1", args.repeat)
    npy = run_backend("0", args.repeat)
    if nb["backend"] != "numba":
        print("numba unavailable; only the numpy path was timed")
    print(f"{'kernel':<20} {'numba':>13} {'numpy':>13} {'speedup':>8}")
    for name, t_np in npy["times"].items():
        t_nb = nb["times"][name]
        print(f"{name:<20} {fmt(t_nb)} {fmt(t_np)} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
