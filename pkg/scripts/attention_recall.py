"""Fine-tune Q and V of a frozen attention head: MELoRA vs LoRA at equal equivalent rank."""
import argparse

from melora.harness import ExperimentConfig, run_attention


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/attention.yaml")
    args = p.parse_args()
    mel_cfg = ExperimentConfig.from_file(args.config)
    lora_cfg = ExperimentConfig.from_file(args.config, mode="lora", n=1,
                                          r_mini=mel_cfg.n * mel_cfg.r_mini)
    for cfg in (mel_cfg, lora_cfg):
        res = run_attention(cfg)
        print(f"{cfg.mode:<6} n={cfg.n} r_mini={cfg.r_mini} params={res.params} "
              f"equiv_rank={res.equiv_rank} baseline_acc={res.extra['baseline_accuracy']:.3f} "
              f"test_acc={res.final_metric:.3f}")


if __name__ == "__main__":
    main()
