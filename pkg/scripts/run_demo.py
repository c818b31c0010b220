#!/usr/bin/env python3
"""End-to-end walkthrough over loopback TCP.

Starts worker services in this process, then runs every protection
combination on the bundled toy classifier:

  1. integrity-only holistic offload + asynchronous spot-check
  2. the same against a worker that corrupts 30% of one layer
  3. layered offload with input masking (data stays private)
  4. layered offload with weight shares across two workers
  5. both maskings together

Usage: python scripts/run_demo.py
"""

import os
import sys
import threading

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

import offguard as og
from offguard.client import MODE_LAYERED
from offguard.container import load_model
from offguard.tensor import load_tensor
from offguard.worker import serve

ASSETS = os.path.join(os.path.dirname(__file__), os.pardir, "assets")


def start_worker(core):
    ready, evt = {}, threading.Event()

    def cb(bound):
        ready["port"] = bound[1]
        evt.set()

    threading.Thread(
        target=serve, args=(core, "127.0.0.1", 0), kwargs={"ready_callback": cb}, daemon=True
    ).start()
    evt.wait(5.0)
    return og.TcpSession("127.0.0.1", ready["port"])


def main():
    model = load_model(os.path.join(ASSETS, "toy_mlp.model"))
    x = load_tensor(os.path.join(ASSETS, "corpus", "sample_000.tensor"))
    y_plain, _ = og.forward_model(model, x)
    print(f"input {x.tolist()} -> local prediction {int(np.argmax(y_plain))} {np.round(y_plain, 4).tolist()}")

    print("\n[1] integrity-only holistic offload")
    client = og.OffloadClient(model, [start_worker(og.WorkerCore())], og.OffloadPlan(verify_ratio=0.25))
    client.setup()
    y, record = client.offload_infer(x)
    print(f"    worker prediction {int(np.argmax(y))}, commit {record.commit.root.hex()[:16]}...")
    verdict = client.verify_async(record, og.select_verification(record, 0.5, rng_seed=1))
    print(f"    spot-check of 50% of committed units: {verdict.status}")

    print("\n[2] the same against a cheating worker (30% of layer 2 corrupted)")
    cheat_core = og.WorkerCore(behavior=og.Cheat(beta=0.3, target_layer=2, seed=9))
    client = og.OffloadClient(model, [start_worker(cheat_core)], og.OffloadPlan(verify_ratio=0.25))
    client.setup()
    y, record = client.offload_infer(x)
    verdict = client.verify_async(record, og.select_verification(record, 1.0, rng_seed=1))
    print(f"    full check: {verdict.status}, offending units {list(verdict.evidence)}")

    print("\n[3] layered offload with input masks (k = 100)")
    plan = og.OffloadPlan(mode=MODE_LAYERED, privacy_k=100.0)
    client = og.OffloadClient(model, [start_worker(og.WorkerCore())], plan, rng_seed=4)
    client.setup()
    client.prepare_masks(4)
    y, record = client.offload_infer(x)
    err = float(np.max(np.abs(y - y_plain)))
    print(f"    prediction {int(np.argmax(y))}, max abs deviation from plain {err:.2e}")
    print(f"    local layer checks: "
          + ", ".join(client.verify_layer_local(record, i).status for i in range(len(model.layers))))

    print("\n[4] weight shares across two workers (k = 100)")
    plan = og.OffloadPlan(mode=MODE_LAYERED, confidentiality_k=100.0)
    client = og.OffloadClient(
        model, [start_worker(og.WorkerCore()), start_worker(og.WorkerCore())], plan, rng_seed=5
    )
    client.setup()
    y, _ = client.offload_infer(x)
    print(f"    prediction {int(np.argmax(y))}, max abs deviation {float(np.max(np.abs(y - y_plain))):.2e}")

    print("\n[5] both protections (k = 10 each)")
    plan = og.OffloadPlan(mode=MODE_LAYERED, privacy_k=10.0, confidentiality_k=10.0)
    client = og.OffloadClient(
        model, [start_worker(og.WorkerCore()), start_worker(og.WorkerCore())], plan, rng_seed=6
    )
    client.setup()
    client.prepare_masks(4)
    y, _ = client.offload_infer(x)
    print(f"    prediction {int(np.argmax(y))}, max abs deviation {float(np.max(np.abs(y - y_plain))):.2e}")

    print("\nestimates: leak probability per masked value at k=100:",
          f"{og.masking_failure_rate(100):.4f};",
          "miss rate checking 10% of 100 units against 10% corruption:",
          f"{og.detection_failure_probability(100, 0.1, 0.1):.4f}")


if __name__ == "__main__":
    main()
