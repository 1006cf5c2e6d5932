"""Compare the numba kernels with their numpy fallbacks.

Run ``python benchmarks/bench_kernels.py``.  The first table times each
kernel on inputs sized like one inner step of the default sinusoid model.
The second times a full meta-training step in two fresh interpreters, one
with ``MIRRORMETA_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mirrormeta import _kernels as kn

STEP_CODE = """
import time, numpy as np
from mirrormeta import _kernels, meta, model, tasks
_kernels.warmup()
fam = tasks.TaskFamilyConfig(family="{family}", M=5, N=1, input_dim={input_dim})
spec = model.spec_for(fam)
params = meta.MetaParams.init("{method}", spec, 0)
cfg = meta.MetaConfig(batch_size=4)
batch = [tasks.pool_task(fam, "train", i) for i in range(4)]
meta.meta_step(params, batch, cfg, spec)
times = []
for _ in range({repeats}):
    t = time.perf_counter()
    meta.meta_step(params, batch, cfg, spec)
    times.append(time.perf_counter() - t)
print(np.median(times))
"""


def kernel_cases(rng):
    d = 1761  # parameters of the (1, 40, 40, 1) MLP
    index = rng.integers(0, d, size=4 * d)
    logits = rng.normal(size=(75, 5))
    labels = rng.integers(0, 5, size=75)
    x = rng.normal(size=d)
    return [
        ("scatter_add", lambda: kn.scatter_add_numba(x.repeat(4), index, d),
         lambda: kn.scatter_add_numpy(x.repeat(4), index, d)),
        ("logistic", lambda: kn.logistic_numba(x), lambda: kn.logistic_numpy(x)),
        ("log_softmax_rows", lambda: kn.log_softmax_rows_numba(logits),
         lambda: kn.log_softmax_rows_numpy(logits)),
        ("softmax_xent", lambda: kn.softmax_xent_numba(logits, labels),
         lambda: kn.softmax_xent_numpy(logits, labels)),
    ]


def best_of(fn, number):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--number", type=int, default=2000)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if not kn.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    kn.warmup()
    print(f"{'kernel':<18}{'numba us':>10}{'numpy us':>10}{'speedup':>9}")
    for name, fast, slow in kernel_cases(np.random.default_rng(0)):
        fast(), slow()
        a, b = best_of(fast, args.number), best_of(slow, args.number)
        print(f"{name:<18}{a * 1e6:>10.2f}{b * 1e6:>10.2f}{b / a:>9.2f}")
    print()
    print(f"{'meta step':<28}{'numba ms':>10}{'numpy ms':>10}")
    for family, method in (("sinusoid", "maml"), ("sinusoid", "mirror"), ("gaussian-blobs", "mirror")):
        code = STEP_CODE.format(family=family, method=method, repeats=args.repeats,
                                input_dim=1 if family == "sinusoid" else 4)
        out = []
        for flag in ("0", "1"):
            env = dict(os.environ, MIRRORMETA_DISABLE_NUMBA=flag)
            res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            out.append(float(res.stdout.strip()) * 1e3)
        print(f"{family + ' ' + method:<28}{out[0]:>10.2f}{out[1]:>10.2f}")


if __name__ == "__main__":
    main()
