#!/usr/bin/env python3
"""The whole pipeline through the command-line surface.

Equivalent shell session:

    symtrans gen-data --pairs 2 --out data --seed 9 --spec spec.json
    symtrans train --config train.json --out run
    symtrans register --moving data/pair_000/moving.svol \
        --fixed data/pair_000/fixed.svol \
        --checkpoint run/checkpoint_000050.symt --mode diff \
        --out-field u.svol --out-warped w.svol
    symtrans eval --field u.svol --moving-labels ... --fixed-labels ...
    symtrans count --compare-msa
    symtrans verify --suite diffeo
"""

import json
from pathlib import Path

from symtrans.cli import main

root = Path("demos_out/cli_workflow")
root.mkdir(parents=True, exist_ok=True)

spec = {"extents": [16, 16, 16], "radius_range": [2.5, 4.0],
        "warp_amplitude": 1.5, "warp_sigma": 2.5, "translation_max": 1.0}
(root / "spec.json").write_text(json.dumps(spec, indent=2))

train_cfg = {
    "iterations": 50,
    "seed": 3,
    "lr": 0.005,
    "beta2": 0.99,
    "checkpoint_every": 50,
    "model": {"input_shape": [16, 16, 16], "base_dim": 8,
              "encoder_depths": [1, 1, 1], "decoder_depths": [1, 1, 1]},
    "data": spec,
}
(root / "train.json").write_text(json.dumps(train_cfg, indent=2))

steps = [
    ["gen-data", "--spec", str(root / "spec.json"), "--pairs", "2",
     "--out", str(root / "data"), "--seed", "9"],
    ["train", "--config", str(root / "train.json"), "--out", str(root / "run"),
     "--log", "25"],
    ["register",
     "--moving", str(root / "data/pair_000/moving.svol"),
     "--fixed", str(root / "data/pair_000/fixed.svol"),
     "--checkpoint", str(root / "run/checkpoint_000050.symt"),
     "--mode", "diff",
     "--out-field", str(root / "u.svol"),
     "--out-warped", str(root / "w.svol"),
     "--moving-labels", str(root / "data/pair_000/moving_labels.svol"),
     "--fixed-labels", str(root / "data/pair_000/fixed_labels.svol")],
    ["eval", "--field", str(root / "u.svol"),
     "--moving-labels", str(root / "data/pair_000/moving_labels.svol"),
     "--fixed-labels", str(root / "data/pair_000/fixed_labels.svol")],
    ["count", "--compare-msa"],
    ["verify", "--suite", "diffeo"],
]

for argv in steps:
    print(f"\n$ symtrans {' '.join(argv)}")
    code = main(argv)
    if code != 0:
        raise SystemExit(f"step failed with exit code {code}")
print("\nworkflow complete; artifacts under", root)
