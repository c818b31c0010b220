#!/usr/bin/env python3
"""Build the bundled desk-scale assets deterministically.

Produces:
    assets/toy_mlp.model   - 3-dense-layer classifier trained on synthetic
                             4-class blobs in the unit square
    assets/corpus/         - 100 held-out inputs (one tensor file each)
                             plus labels.csv for reference
    assets/toy_cnn.model   - small conv net with seeded random weights,
                             used by the loopback benchmark

The script re-checks the properties the test suite relies on (confident
margins; masked-offload agreement at the scales the suite asserts) so a
regenerated asset set can never silently violate them.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

import offguard as og
from offguard import analysis
from offguard.container import save_model
from offguard.tensor import save_tensor

ASSETS = os.path.join(os.path.dirname(__file__), os.pardir, "assets")

BLOB_CENTERS = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]], dtype=np.float32)
BLOB_STD = 0.07
N_CLASSES = 4
HIDDEN = 16
TRAIN_SEED = 20240601
CORPUS_SEED = 20240602
CNN_SEED = 20240603


def sample_blobs(rng, per_class):
    xs, ys = [], []
    for label, center in enumerate(BLOB_CENTERS):
        pts = rng.normal(center, BLOB_STD, size=(per_class, 2))
        xs.append(np.clip(pts, 0.0, 1.0))
        ys.append(np.full(per_class, label))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def train_mlp():
    rng = np.random.default_rng(TRAIN_SEED)
    x, y = sample_blobs(rng, 100)
    onehot = np.eye(N_CLASSES, dtype=np.float32)[y]

    def init(shape, fan_in):
        return rng.normal(0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)

    w1, b1 = init((HIDDEN, 2), 2), np.zeros(HIDDEN, dtype=np.float32)
    w2, b2 = init((HIDDEN, HIDDEN), HIDDEN), np.zeros(HIDDEN, dtype=np.float32)
    w3, b3 = init((N_CLASSES, HIDDEN), HIDDEN), np.zeros(N_CLASSES, dtype=np.float32)

    lr = np.float32(0.5)
    for step in range(3000):
        h1 = x @ w1.T + b1
        a1 = np.maximum(h1, 0)
        h2 = a1 @ w2.T + b2
        a2 = np.maximum(h2, 0)
        logits = a2 @ w3.T + b3
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)

        g = (probs - onehot) / len(x)
        gw3 = g.T @ a2
        gb3 = g.sum(axis=0)
        ga2 = g @ w3
        gh2 = ga2 * (h2 > 0)
        gw2 = gh2.T @ a1
        gb2 = gh2.sum(axis=0)
        ga1 = gh2 @ w2
        gh1 = ga1 * (h1 > 0)
        gw1 = gh1.T @ x
        gb1 = gh1.sum(axis=0)

        w3 -= lr * gw3; b3 -= lr * gb3
        w2 -= lr * gw2; b2 -= lr * gb2
        w1 -= lr * gw1; b1 -= lr * gb1

    model = og.ModelSpec(
        [
            og.dense(w1, b1), og.relu(),
            og.dense(w2, b2), og.relu(),
            og.dense(w3, b3), og.softmax(),
        ],
        (2,),
    )
    train_acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return model, train_acc


def build_corpus(model):
    rng = np.random.default_rng(CORPUS_SEED)
    x, y = sample_blobs(rng, 25)
    margins = []
    for xi in x:
        out, _ = og.forward_model(model, xi)
        top2 = np.sort(out)[-2:]
        margins.append(float(top2[1] - top2[0]))
    return x, y, min(margins)


def build_cnn():
    rng = np.random.default_rng(CNN_SEED)

    def conv(c_in, c_out, k=3):
        kern = rng.normal(0, np.sqrt(2.0 / (k * k * c_in)), size=(k, k, c_in, c_out))
        return og.conv2d(kern.astype(np.float32), np.zeros(c_out, dtype=np.float32))

    flat = 20 * 20 * 16
    dense = og.dense(
        rng.normal(0, np.sqrt(1.0 / flat), size=(10, flat)).astype(np.float32),
        np.zeros(10, dtype=np.float32),
    )
    return og.ModelSpec(
        [conv(3, 16), og.relu(), conv(16, 16), og.relu(), og.flatten(), dense, og.softmax()],
        (24, 24, 3),
    )


def check_masking_contracts(model, corpus):
    """The committed assets must satisfy what the acceptance suite asserts."""
    for options, ks, want_full in (("p", [1.0, 1e3], True), ("c", [1.0, 1e3], True), ("pc", [1e6], False)):
        rows = analysis.sweep_k(model, list(corpus), ks, options)
        for row in rows:
            if want_full and row.agreement != 1.0:
                raise SystemExit(f"asset check failed: {options} k={row.k} agreement {row.agreement}")
            if not want_full and row.agreement >= 1.0:
                raise SystemExit(f"asset check failed: {options} k={row.k} did not degrade")


def main():
    os.makedirs(os.path.join(ASSETS, "corpus"), exist_ok=True)
    model, train_acc = train_mlp()
    corpus, labels, min_margin = build_corpus(model)
    print(f"toy mlp: train accuracy {train_acc:.3f}, min corpus margin {min_margin:.4f}")
    if train_acc < 0.98 or min_margin < 0.05:
        raise SystemExit("asset check failed: classifier not confident enough")
    check_masking_contracts(model, corpus)

    save_model(os.path.join(ASSETS, "toy_mlp.model"), model)
    lines = ["index,label"]
    for i, (xi, yi) in enumerate(zip(corpus, labels)):
        save_tensor(os.path.join(ASSETS, "corpus", f"sample_{i:03d}.tensor"), xi)
        lines.append(f"{i},{int(yi)}")
    with open(os.path.join(ASSETS, "corpus", "labels.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")

    cnn = build_cnn()
    save_model(os.path.join(ASSETS, "toy_cnn.model"), cnn)
    print(f"wrote assets to {os.path.abspath(ASSETS)}")


if __name__ == "__main__":
    main()
