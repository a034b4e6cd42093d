"""Compare the compiled and pure-Python rasterizer backends.

Times a forward render and a forward+backward pass on synthetic scenes of
increasing size, checks that both backends agree, and prints a table.

    python benchmarks/bench_raster.py [--sizes 16 64 256] [--res 64] [--repeat 3]
"""
import argparse
import time

import numpy as np
import torch

from sgsplat.raster import BACKENDS
from sgsplat.renderer import render, render_tensors, scene_tensors
from sgsplat.synthetic import SynthSpec, random_scene, ring_cameras


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def forward_backward(scene, cam, backend):
    t = {k: v.requires_grad_(True) for k, v in scene_tensors(scene).items()}
    rgb, *_ = render_tensors(t["mean"], t["log_scale"], t["rotation"], t["opacity_logit"], t["sh"],
                             cam, scene.sh_degree, backend=backend)
    rgb.sum().backward()
    return torch.cat([v.grad.flatten() for v in t.values()]).numpy()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if "compiled" not in BACKENDS:
        print("compiled backend unavailable; only the python fallback is installed")
    names = sorted(BACKENDS)
    print(f"{'K':>6} {'pass':>9} " + " ".join(f"{n + ' [ms]':>15}" for n in names) + f" {'speedup':>8} {'max diff':>9}")
    for k in args.sizes:
        spec = SynthSpec(n_kernels=k, width=args.res, height=args.res, n_train=1, n_test=0)
        scene = random_scene(spec, np.random.default_rng(k))
        cam = ring_cameras(spec)[0]
        for label, fn in (("forward", lambda b: render(scene, cam, backend=b).rgb),
                          ("fwd+bwd", lambda b: forward_backward(scene, cam, b))):
            res = {b: best_of(lambda: fn(b), args.repeat) for b in names}
            row = " ".join(f"{1e3 * res[b][0]:15.2f}" for b in names)
            if len(names) == 2:
                speed = res["python"][0] / res["compiled"][0]
                diff = float(np.abs(res["python"][1] - res["compiled"][1]).max())
                row += f" {speed:7.1f}x {diff:9.1e}"
            print(f"{k:6d} {label:>9} {row}")


if __name__ == "__main__":
    main()
