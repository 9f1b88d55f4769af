"""Sweep the consistency weight lambda0 and the threshold beta with the
harness's grid runner. Every run writes a metrics CSV; the ranked summary
lands in runs/demo-sweep/summary.txt.

    python3 demos/03_ablation_sweep.py
"""
from fedssl.harness import config_from_dict, sweep

cfg = config_from_dict({"rounds": 40, "output_dir": "runs/demo-sweep"}, apply_env=False)
path = sweep(cfg, {"ssl.lambda0": [0.0, 1.0], "ssl.beta": [0.4, 0.9]})
print(path.read_text())
print((path.parent / "summary.txt").read_text())
