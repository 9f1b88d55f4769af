"""Who should label an unlabeled sample: the global model, the client's
freshly fine-tuned local model, or whichever of the two is more confident?

Trains FedLabel three times, changing only the selection mode, and prints
test accuracy and the accuracy of the pseudo-labels actually used.

    python3 demos/02_selection_modes.py
"""
import math

import numpy as np

from fedssl.harness import config_from_dict, final_accuracy, train, with_overrides

cfg = config_from_dict({"rounds": 60}, apply_env=False)

for mode in ("confidence", "local_only", "global_only"):
    history, _ = train(with_overrides(cfg, {"ssl.mode": mode}))
    pacc = np.mean([m.pseudo_acc for m in history[-10:] if not math.isnan(m.pseudo_acc)])
    lam = np.mean([m.mean_lambda for m in history[-10:] if not math.isnan(m.mean_lambda)])
    print(f"{mode:12s} test acc {final_accuracy(history):.3f}  pseudo-label acc {pacc:.3f}  mean lambda {lam:.3f}")
