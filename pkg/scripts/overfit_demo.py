"""Train MAE after 200 Adam steps on the desk-scale synthetic set, relative to initialization.

    python3 scripts/overfit_demo.py --seeds 1..5
"""
import argparse
import time

from sgru.cli import parse_int_list
from sgru.data import generate_synthetic, make_windows
from sgru.model import init_params
from sgru.training import TrainConfig, split_mae, train


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1..5")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--variant", default="sgru")
    args = ap.parse_args(argv)

    data = make_windows(generate_synthetic(4, 2, seed=1, lag_steps=6, noise_std=0.05), 12, 12)
    print("seed,initial_mae,final_mae,ratio,seconds")
    for seed in parse_int_list(args.seeds):
        cfg = TrainConfig(variant=args.variant, H=8, d_emb=4, max_steps=args.steps,
                          max_epochs=10_000, patience=10_000, seed=seed)
        t0 = time.perf_counter()
        before = split_mae(init_params(cfg.dims_for(data), cfg.variant, seed), data, "train")
        after = split_mae(train(cfg, data).final_params, data, "train")
        print(f"{seed},{before:.3f},{after:.3f},{after / before:.4f},{time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
