"""Rank-4 teacher recovery at equivalent rank 4 and 2, with the Eckart-Young floor."""
import argparse

from melora.harness import ExperimentConfig, run_recovery


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/recovery.yaml")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    base = ExperimentConfig.from_file(args.config)
    for n in (4, 2):
        cfg = ExperimentConfig.from_file(args.config, n=n, r_mini=base.r_mini)
        rep = run_recovery(cfg, args.seed)
        print(f"n={n} r_mini={cfg.r_mini} equiv_rank={rep.equiv_rank} params={rep.params} "
              f"test_mse={rep.test_mse:.3e} population_mse={rep.population_mse:.3e} "
              f"floor={rep.eckart_young_floor:.3e}")


if __name__ == "__main__":
    main()
