"""Build a label-skewed federation of Gaussian blobs, look at how far each
client's labeled classes drift from its unlabeled ones, then train
FedLabel next to supervised FedAvg on the same split.

    python3 demos/01_quickstart.py
"""
import numpy as np

from fedssl.harness import config_from_dict, final_accuracy, prepare, train, with_overrides
from fedssl.data import partition_report

cfg = config_from_dict({"rounds": 40}, apply_env=False)

# Twenty clients, Dir(0.1) over classes, 20% of each client's samples labeled.
clients, _, test = prepare(cfg)
rows = partition_report(clients)
print(f"{len(clients)} clients, {len(test)} test samples")
print("client  labeled  unlabeled  mismatch")
for r in rows[:5]:
    print(f"{r['client']:6d}  {r['n_labeled']:7d}  {r['n_unlabeled']:9d}  {r['mismatch']:8.3f}")
print("mean labeled/unlabeled mismatch:", round(float(np.nanmean([r["mismatch"] for r in rows])), 3))

# Same data, same seed, two protocols.
for name in ("fedavg", "fedlabel"):
    history, _ = train(with_overrides(cfg, {"method.name": name}))
    last = history[-1]
    print(f"{name:9s} test acc {final_accuracy(history):.3f}  "
          f"accepted {last.accepted_frac:.2f}  pseudo-label acc {last.pseudo_acc:.3f}")
