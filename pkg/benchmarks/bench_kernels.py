"""Time the compiled kernels against the numpy fallback.

Run from the repository root after building the extension::

    python3 setup.py build_ext --inplace
    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called on the shapes it sees during GRPO rollouts and
evaluation (8-joint skeleton, 32 frames, groups of 16). Outputs of the two
backends are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from egogrpo.kernels import _reference

try:
    from egogrpo.kernels import _native
except ImportError:  # extension not built
    _native = None

from egogrpo.kinematics import Skeleton


def cases(rng):
    skel = Skeleton.default()
    t, n = 32, skel.joint_count

    def quats(*shape):
        q = rng.normal(size=shape + (4,))
        return q / np.linalg.norm(q, axis=-1, keepdims=True)

    fk_args = (skel.parent, skel.offset, quats(16, t), rng.normal(size=(16, t, 3)), quats(16, t, n))
    grads = rng.uniform(-1, 1, size=(6, 3))
    xs = np.linspace(0, 4.99, 32)
    return {
        "quat_mul (16x32x8)": (quats(16, t, n), quats(16, t, n)),
        "quat_rotate (16x32x8)": (quats(16, t, n), rng.normal(size=(16, t, n, 3))),
        "forward_kinematics (16 seq)": fk_args,
        "perlin_1d (32 frames)": (grads, xs),
        "mean_pairwise_distance (16x1120)": (rng.normal(size=(16, 1120)),),
    }


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--min-time", type=float, default=0.2, help="seconds per timing sample")
    args = p.parse_args(argv)
    if _native is None:
        raise SystemExit("compiled kernels not built; run `python3 setup.py build_ext --inplace` first")

    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python (us)':>12s} {'native (us)':>12s} {'speed-up':>9s}")
    for name, case in cases(rng).items():
        fn = name.split()[0]
        ref, nat = getattr(_reference, fn), getattr(_native, fn)
        for a, b in zip(_as_tuple(ref(*case)), _as_tuple(nat(*case))):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        times = []
        for f in (ref, nat):
            timer = timeit.Timer(lambda: f(*case))
            number, _ = timer.autorange()
            number = max(1, int(number * args.min_time / 0.2))
            times.append(min(timer.repeat(args.repeat, number)) / number * 1e6)
        print(f"{name:34s} {times[0]:12.1f} {times[1]:12.1f} {times[0] / times[1]:8.1f}x")


if __name__ == "__main__":
    main()
