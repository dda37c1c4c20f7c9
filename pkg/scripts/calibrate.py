"""Calibration runs for the end-to-end accuracy thresholds."""

import json
import sys
import time

from landmarkconv import net, synthground as sg


def main():
    heads = sys.argv[1:] or ["lfc-p4", "pointwise", "dilated", "lfc-p2v", "lfc-p1"]
    train_s = sg.gen_dataset(8000, seed=42, critical_fraction=0.5)
    test_s = sg.gen_dataset(1000, seed=43, critical_fraction=0.5)
    print("datasets ready (%d train / %d test)" % (len(train_s), len(test_s)),
          flush=True)
    results = {}
    for spec in heads:
        head, _, scheme = spec.partition("-")
        cfg = net.ModelConfig(head=head, scheme=scheme or "p4")
        tcfg = net.TrainConfig(epochs=40)
        t0 = time.time()
        _, metrics = net.train(
            train_s, test_s, cfg, tcfg,
            log=lambda m: print("[%s] %s" % (spec, m), flush=True))
        final = metrics[-1]
        final["minutes"] = (time.time() - t0) / 60.0
        results[spec] = final
        print(json.dumps({spec: final}), flush=True)
    print("FINAL", json.dumps(results, indent=2), flush=True)


if __name__ == "__main__":
    main()
