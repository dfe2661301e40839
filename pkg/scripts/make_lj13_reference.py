"""Generate the LJ-13 ground-truth fixture shipped in ``cdsampling/data``.

A long non-reversible parallel tempering run (flat reference, 8 levels,
about 10^7 target evaluations in total) started from the relaxed
icosahedral minimum.  After burn-in, top-level states are thinned and a
fixed number of configurations is stored together with the minimum ``x0``
and their energies.

    python scripts/make_lj13_reference.py --out src/cdsampling/data/lj13_reference.npz
"""

import argparse
import logging
import time

import numpy as np

from cdsampling.kernels import KernelConfig
from cdsampling.targets import find_mode, make_target
from cdsampling.tempering import AnnealingSchedule, run_nrpt

log = logging.getLogger("make_lj13_reference")


def icosahedron(radius: float = 1.1) -> np.ndarray:
    """Centre particle plus the 12 vertices of a regular icosahedron."""
    phi = (1 + 5**0.5) / 2
    v = []
    for a in (-1, 1):
        for b in (-phi, phi):
            v += [(0, a, b), (a, b, 0), (b, 0, a)]
    v = np.array(v, dtype=float)
    v *= radius / np.linalg.norm(v[0])
    return np.vstack([np.zeros(3), v])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="src/cdsampling/data/lj13_reference.npz")
    ap.add_argument("--chains", type=int, default=100)
    ap.add_argument("--sweeps", type=int, default=12500)
    ap.add_argument("--replicas", type=int, default=8)
    ap.add_argument("--beta-min", type=float, default=0.1)
    ap.add_argument("--burn", type=float, default=0.2, help="fraction of sweeps discarded")
    ap.add_argument("--thin", type=int, default=25)
    ap.add_argument("--keep", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    target = make_target("lj13")
    x0 = find_mode(target, icosahedron().reshape(-1), steps=20000, lr=1e-3, max_move=0.05)
    log.info("minimum energy %.4f", float(target.energy(x0)))

    rng = np.random.default_rng(args.seed)
    sched = AnnealingSchedule.geometric(args.replicas, args.beta_min, include_zero=False)
    cfg = KernelConfig(kind="MALA", step_size=0.01)
    burn = int(args.burn * args.sweeps)
    kept = []
    t = time.time()

    def collect(ens, k, in_pilot):
        if k >= burn and (k - burn) % args.thin == 0:
            kept.append(ens.position[-1].copy())
        if (k + 1) % 1000 == 0:
            log.info("sweep %d/%d, %.0fs, evaluations %d", k + 1, args.sweeps, time.time() - t,
                     target.counter.count)

    ens = run_nrpt(target.value_and_score, None, sched, x0, args.chains, args.sweeps, cfg, rng,
                   on_sweep=collect)
    samples = np.concatenate(kept)
    samples = samples[np.all(np.isfinite(samples), axis=1)]
    idx = np.sort(rng.choice(len(samples), min(args.keep, len(samples)), replace=False))
    samples = samples[idx]
    energies = target.energy(samples)
    diag = ens.diagnostics()
    log.info("kept %d, mean energy %.3f, round trips %d, evaluations %d", len(samples),
             energies.mean(), diag.round_trips, target.counter.count)
    np.savez_compressed(args.out, samples=samples, energies=energies, x0=x0,
                        evaluations=np.int64(target.counter.count), seed=np.int64(args.seed),
                        betas=ens.schedule.betas)


if __name__ == "__main__":
    main()
