"""Singular values above threshold after training, MELoRA vs LoRA at the same budget."""
import argparse

from melora.harness import ExperimentConfig, run_recovery


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    common = dict(d=args.d, k=args.n, steps=args.steps, threshold=args.threshold)
    print("seed,melora_params,lora_params,melora_sv_count,lora_sv_count")
    for seed in range(args.seeds):
        mel = run_recovery(ExperimentConfig(mode="melora", n=args.n, r_mini=1, **common), seed)
        lora = run_recovery(ExperimentConfig(mode="lora", n=1, r_mini=1, **common), seed)
        print(f"{seed},{mel.params},{lora.params},{mel.sv_count},{lora.sv_count}")


if __name__ == "__main__":
    main()
