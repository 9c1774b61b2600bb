"""With/without residual refinement over several sampler seeds, sharing one pair of trained nets."""

import argparse
from dataclasses import replace

import numpy as np

from argsdiff.cli import RunCache
from argsdiff.config import load_config
from argsdiff.diffusion import make_exponential_schedule
from argsdiff.metrics import psnr
from argsdiff.sampler import SamplerDivergenceError, run_fusion


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--guidance", choices=("full-backprop", "fixed-eps"), default=None)
    ap.add_argument("--uncapped", action="store_true", help="also run refinement with the literal step size")
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.guidance:
        cfg = replace(cfg, guidance_mode=args.guidance)
    cache = RunCache()
    scene = cache.scene(cfg)
    nets = cache.trained(cfg)
    print(f"trained in {nets.seconds:.0f}s")
    arms = {"argm": replace(cfg, argm_enabled=True), "no-argm": replace(cfg, argm_enabled=False)}
    if args.uncapped:
        arms["argm-uncapped"] = replace(cfg, argm_step_cap=False)
    s = make_exponential_schedule(cfg.num_steps)
    for name, arm in arms.items():
        vals = []
        for seed in range(args.seeds):
            try:
                res = run_fusion(scene.lr, scene.msi, nets.spatial, nets.spectral, scene.model, arm.sampler(), s,
                                 np.random.default_rng(seed))
                vals.append(psnr(scene.ref, res.fused))
            except SamplerDivergenceError as err:
                print(f"{name} seed {seed}: {err}")
                vals.append(float("nan"))
        print(f"{name:>14}: mean {np.nanmean(vals):.2f} dB  [{', '.join(f'{v:.2f}' for v in vals)}]")


if __name__ == "__main__":
    main()
