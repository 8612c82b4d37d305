"""Copy the desk-scale reports out of a CLI output directory into results/desk_scale/.

    python3 scripts/collect_desk_results.py RUNS_DIR [DEST]
"""

import json
import shutil
import sys
from pathlib import Path

from metadet.cli import RunConfig

PKG = Path(__file__).resolve().parents[1]


def _run_dir(out, config_file):
    cfg = RunConfig.from_dict(json.loads(Path(config_file).read_text()))
    return Path(out) / cfg.config_hash[:12]


def collect(out, configs, dest):
    configs, dest = Path(configs), Path(dest)
    (dest / "sweep_finetune").mkdir(parents=True, exist_ok=True)
    five = _run_dir(out, configs / "desk_mnist_5shot.json")
    one = _run_dir(out, configs / "desk_mnist_1shot.json")
    one_rand = _run_dir(out, configs / "desk_mnist_1shot_randomized.json")
    copies = {
        five / "reports" / "meta.json": "meta_5shot.json",
        five / "reports" / "dnn.json": "dnn_5shot.json",
        five / "reports" / "dnn_balanced.json": "dnn_balanced_5shot.json",
        one / "reports" / "meta.json": "meta_1shot_fixed.json",
        one_rand / "reports" / "meta.json": "meta_1shot_randomized.json",
    }
    for steps in (0, 1, 5, 20):
        copies[five / "sweeps" / "finetune_times" / f"meta_{steps}.json"] = f"sweep_finetune/meta_{steps}.json"
    for src, name in copies.items():
        shutil.copyfile(src, dest / name)
    for run, tag in ((five, "5shot"), (one, "1shot_fixed"), (one_rand, "1shot_randomized")):
        for name in ("config.json", "pools/pools.json"):
            shutil.copyfile(run / name, dest / f"{tag}_{Path(name).name}")
        ckpt = json.loads((run / "checkpoints" / "meta" / "checkpoint.json").read_text())
        (dest / f"{tag}_meta_checkpoint.json").write_text(json.dumps(ckpt, indent=1, sort_keys=True))
    return dest


if __name__ == "__main__":
    out = sys.argv[1]
    dest = sys.argv[2] if len(sys.argv) > 2 else PKG / "results" / "desk_scale"
    print(collect(out, PKG / "configs", dest))
