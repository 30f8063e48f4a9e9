"""Train the tiny model (MPTN and dense-temporal ablation) on a synthetic distortion dataset.

    python3 scripts/run_synthetic_vqa.py --out runs/synth --epochs 60
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from vqt.data import generate_synthetic_dataset, read_manifest
from vqt.model import ModelConfig, TrainSettings, save_checkpoint, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/synth"))
    ap.add_argument("--count", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--weight-decay", type=float, default=0.1)
    ap.add_argument("--decay-every", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", default="mptn,dense")
    args = ap.parse_args(argv)

    base = ModelConfig.preset("tiny", seed=args.seed)
    data_dir = args.out / "data"
    manifest = data_dir / "manifest.tsv"
    if not manifest.exists():
        generate_synthetic_dataset(data_dir, args.count, base.frames, base.height, base.width,
                                   seed=args.seed)
    man = read_manifest(manifest)
    settings = TrainSettings(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             weight_decay=args.weight_decay, decay_every=args.decay_every)
    summary = {}
    for variant in args.variants.split(","):
        cfg = replace(base, temporal=variant)
        log_path = args.out / f"{variant}.log"
        start = time.time()
        with open(log_path, "w") as log:
            def on_epoch(e):
                log.write(e.to_line() + "\n")
                log.flush()
                print(f"[{variant}] {e.to_line()}", file=sys.stderr)

            params, history = train(man, cfg, settings, on_epoch=on_epoch)
        save_checkpoint(args.out / f"{variant}.vqtw", params, cfg)
        summary[variant] = (history[-1], time.time() - start)
    for variant, (last, secs) in summary.items():
        print(f"{variant}\tplcc={last.plcc:.4f}\tsrocc={last.srocc:.4f}\tkrocc={last.krocc:.4f}"
              f"\trmse={last.rmse:.4f}\tseconds={secs:.0f}")


if __name__ == "__main__":
    main()
