"""Compare the compiled kernels with the numpy fallback.

Each kernel is timed on training-sized inputs with both modules imported
directly. A full training step (forward, backward, update) is timed in two
subprocesses, one of them with DYSPHASE_PURE_PYTHON=1, since the backend is
fixed at import.

    python benchmarks/bench_kernels.py [--batch 128] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from dysphase import _kernels_py as py

try:
    from dysphase import _kernels as cy
except ImportError:
    cy = None

STEP_SNIPPET = """
import json, sys, timeit
import numpy as np
from dysphase import kernels
from dysphase.neuralnet import Network, build_single_cnn, sgd_update
batch, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
x = rng.standard_normal((batch, 81, 50)).astype(np.float32)
y = np.arange(batch) % 2
net = Network(build_single_cnn(), seed=0)

def step():
    net.zero_grad()
    net.loss_and_grad(x, y, train=True)
    named = list(net.named_params())
    sgd_update([l.params[k] for _, l, k in named], [l.grads[k] for _, l, k in named], 0.01)

step()
print(json.dumps({"backend": kernels.BACKEND, "seconds": min(timeit.repeat(step, number=1, repeat=repeat))}))
"""


def kernel_cases(batch, rng):
    f32 = np.float32
    x1 = rng.standard_normal((batch, 1, 81, 50)).astype(f32)
    x2 = rng.standard_normal((batch, 64, 40, 24)).astype(f32)
    w1, b1 = rng.standard_normal((64, 1, 2, 2)).astype(f32), np.zeros(64, f32)
    g1 = rng.standard_normal((batch, 64, 80, 49)).astype(f32)
    cols = rng.standard_normal((batch, 38, 22, 64 * 9)).astype(f32)
    act = rng.standard_normal((batch, 64, 80, 49)).astype(f32)
    pooled_idx = py.maxpool2x2_forward(act)[1]
    gpool = rng.standard_normal((batch, 64, 40, 24)).astype(f32)
    mean, var = py.channel_moments(act)
    inv = (1 / np.sqrt(var + 1e-5)).astype(f32)
    scale, shift = np.ones(64, f32), np.zeros(64, f32)
    xhat = py.affine_normalize(act, mean.astype(f32), inv, scale, shift)[0]
    audio = rng.standard_normal(16000 * 8)
    sos = np.tile([1.0, 0.0, 0.0, 1.0, -1.8, 0.85], (4, 1))
    bands = rng.standard_normal((81, 16000 * 2))
    return [
        ("conv1 direct forward", "conv2d_direct", (x1, w1, b1)),
        ("conv1 direct weight grad", "conv2d_direct_weight_grad", (x1, g1, 2, 2)),
        ("conv2 im2col", "im2col", (x2, 3, 3)),
        ("conv2 col2im", "col2im", (cols, 64, 40, 24, 3, 3)),
        ("maxpool forward", "maxpool2x2_forward", (act,)),
        ("maxpool backward", "maxpool2x2_backward", (gpool, pooled_idx, 80, 49)),
        ("relu forward", "relu_forward", (act,)),
        ("relu backward", "relu_backward", (g1, act)),
        ("batchnorm moments", "channel_moments", (act,)),
        ("batchnorm normalize", "affine_normalize", (act, mean.astype(f32), inv, scale, shift)),
        ("batchnorm backward", "batchnorm_backward", (g1, xhat, scale, inv)),
        ("gammatone band (8 s)", "sos_filter", (audio, sos)),
        ("frame mean (81 bands, 2 s)", "frame_mean", (bands, 160, 160)),
    ]


def best_of(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def training_step(batch, repeat, pure):
    env = dict(os.environ)
    env.pop("DYSPHASE_PURE_PYTHON", None)
    if pure:
        env["DYSPHASE_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(batch), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=128, help="mini-batch size of the kernel inputs")
    p.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is reported)")
    p.add_argument("--skip-step", action="store_true", help="do not time the full training step")
    args = p.parse_args(argv)
    if cy is None:
        print("compiled kernels are not built; only the fallback can be timed", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, name, kargs in kernel_cases(args.batch, rng):
        tc = best_of(getattr(cy, name), kargs, args.repeat)
        tp = best_of(getattr(py, name), kargs, args.repeat)
        print(f"{label:32s} {tc * 1e3:10.2f} {tp * 1e3:10.2f} {tp / tc:7.1f}x")
    if not args.skip_step:
        fast = training_step(args.batch, args.repeat, pure=False)
        slow = training_step(args.batch, args.repeat, pure=True)
        assert (fast["backend"], slow["backend"]) == ("cython", "python")
        print(f"{'training step (single CNN)':32s} {fast['seconds'] * 1e3:10.1f} {slow['seconds'] * 1e3:10.1f} "
              f"{slow['seconds'] / fast['seconds']:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
