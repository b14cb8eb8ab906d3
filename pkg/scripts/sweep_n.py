"""Sweep the number of mini LoRAs at a fixed parameter budget and print per-n means."""
import argparse
import csv
import io

from melora.harness import ExperimentConfig, run_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/sweep_n.yaml")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    cfg = ExperimentConfig.from_file(args.config, workers=args.workers)
    text = run_sweep(cfg)
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    for row in csv.DictReader(io.StringIO(text)):
        if row["seed"] == "mean":
            print(f"n={row['n']:>2} equiv_rank={row['equiv_rank']:>2} params={row['params']} "
                  f"test_mse={float(row['final_metric']):.3e} sv_count={row['sv_count']}")


if __name__ == "__main__":
    main()
