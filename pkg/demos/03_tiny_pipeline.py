"""Run every stage end to end on a very small dataset and print the headline numbers.

The default sizes take about six minutes on one core; this version finishes in under a minute
and is for seeing the artifacts, not for judging quality."""
import json
import sys
import tempfile
from pathlib import Path

from refavs.pipeline import read_curves, run_pipeline
from refavs.synthgen import DatasetConfig

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="refavs-demo-"))
summary = run_pipeline(root, seed=0,
                       data_config=DatasetConfig(seed=0, n_train=64, n_val=8, n_test_seen=16, n_test_unseen=16),
                       steps={"teacher": 60, "sft": 40, "reflective": 10, "grpo": 10})
print(json.dumps({k: v for k, v in summary.items() if k != "timings_s"}, indent=1))
grpo = read_curves(root / "grpo" / "curves.csv")
print("grpo reward_all per step:", grpo["reward_all"].round(3).tolist())
print((root / "grpo" / "metrics" / "metrics.txt").read_text())
print("artifacts under", root)
