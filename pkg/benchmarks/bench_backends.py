"""Compare the numba and numpy kernel backends.

Each backend runs in its own subprocess because HCLN_BACKEND is read at
import time. Besides timings, every case reports a digest of its output so
the two backends can be checked for bitwise agreement.

    python3 benchmarks/bench_backends.py --repeat 5
    python3 benchmarks/bench_backends.py --json results.json
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

CASES = ("matmul_256", "row_sum_4096x64", "svd_64", "forward_micro", "loss_grads_micro", "train_step_wide")


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _make_cases():
    from hypercloning import backprop as B
    from hypercloning import model as M
    from hypercloning import tensor as T
    from hypercloning import train as TR

    g = np.random.default_rng(0)
    a, b = g.standard_normal((256, 256)), g.standard_normal((256, 256))
    rs = g.standard_normal((4096, 64))
    sq = g.standard_normal((64, 64))
    micro = M.get_preset("micro")
    p_micro = M.init_random(micro, T.Rng(1))
    toks = g.integers(0, micro.vocab_size, (4, 65))
    wide = M.get_preset("micro-wide")
    p_wide = M.init_random(wide, T.Rng(2), np.float32)
    cfg = TR.TrainConfig(batch_size=8, context_len=64)
    batch = g.integers(0, wide.vocab_size, (8, 65))

    def train_step():
        loss, grads = B.loss_and_grads(p_wide, wide, batch)
        new, _ = TR.adamw_step(p_wide, grads, TR.init_adam_state(p_wide), 1, cfg)
        return np.array([loss]), *(new[k] for k in sorted(new))

    return {
        "matmul_256": lambda: (T.matmul(a, b),),
        "row_sum_4096x64": lambda: (T.row_sum(rs),),
        "svd_64": lambda: (T.singular_values(sq),),
        "forward_micro": lambda: (M.forward(p_micro, micro, toks[:, :-1]).logits,),
        "loss_grads_micro": lambda: (lambda lg: (np.array([lg[0]]), *(lg[1][k] for k in sorted(lg[1]))))(
            B.loss_and_grads(p_micro, micro, toks)),
        "train_step_wide": train_step,
    }


def worker(repeat):
    from hypercloning.tensor import BACKEND

    out = {"backend": BACKEND, "cases": {}}
    for name, fn in _make_cases().items():
        t0 = time.perf_counter()
        res = fn()  # includes JIT compilation on the numba backend
        first = time.perf_counter() - t0
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        out["cases"][name] = {"first_s": first, "best_s": min(times), "median_s": float(np.median(times)),
                              "digest": _digest(*res)}
    return out


def run_backend(backend, repeat):
    env = dict(os.environ, HCLN_BACKEND=backend)
    cmd = [sys.executable, os.path.abspath(__file__), "--worker", "--repeat", str(repeat)]
    r = subprocess.run(cmd, env=env, capture_output=True, text=True)
    if r.returncode != 0:
        sys.exit(f"{backend} worker failed:\n{r.stderr}")
    return json.loads(r.stdout)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3, help="timed repetitions after the first call")
    p.add_argument("--json", default=None, help="write raw results here")
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return 0
    res = {b: run_backend(b, args.repeat) for b in ("numpy", "numba")}
    print(f"{'case':<20} {'numpy best':>12} {'numba best':>12} {'speedup':>8} {'numba 1st':>10}  bitwise")
    for name in CASES:
        a, b = res["numpy"]["cases"][name], res["numba"]["cases"][name]
        same = "yes" if a["digest"] == b["digest"] else "NO"
        print(f"{name:<20} {a['best_s']:>11.4f}s {b['best_s']:>11.4f}s {a['best_s'] / b['best_s']:>7.1f}x "
              f"{b['first_s']:>9.2f}s  {same}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
