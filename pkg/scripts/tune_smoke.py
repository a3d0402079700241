"""Scratch experiment: check the toy-face task is learnable at the
acceptance scale (200 train / 50 test, 64x64, N=64, seed 42) for both
the unary-only baseline and the full pipeline."""

import sys
import time

import numpy as np

from crfseg import evalio, networks, pipeline

SIZE = 64
COMPACT = 20.0


def make_examples(seed, count):
    rng = np.random.default_rng(seed)
    return [evalio.toy_face(rng, SIZE) for _ in range(count)]


def test_metrics(params, config, test_prepared):
    preds, gts = [], []
    for image, labels, spmap, graph in test_prepared:
        fp = pipeline.forward(image, None, params, spmap, graph, config)
        preds.append(fp.probabilities.argmax(axis=-1))
        gts.append(labels)
    report = evalio.evaluate(preds, gts, 3)
    return report.overall_accuracy, report.f


def run(pairwise, lr, epochs, train_ex, test_ex):
    config = pipeline.TrainConfig(
        arch=networks.Architecture(),
        learning_rate=lr,
        momentum=0.9,
        epochs=epochs,
        superpixel_regions=64,
        superpixel_compactness=COMPACT,
        seed=42,
        pairwise=pairwise,
    )
    t0 = time.time()
    train_prepared = pipeline.prepare_examples(train_ex, config)
    test_prepared = pipeline.prepare_examples(test_ex, config)
    print(f"prep {time.time()-t0:.0f}s", flush=True)
    t0 = time.time()
    params, history = pipeline.train(train_prepared, config, echo=False)
    acc, f = test_metrics(params, config, test_prepared)
    print(
        f"pairwise={pairwise} lr={lr} epochs={epochs}: "
        f"train_acc={history[-1].pixel_accuracy:.4f} loss={history[-1].loss:.4f} "
        f"TEST acc={acc:.4f} F={np.round(f, 4)} ({time.time()-t0:.0f}s)",
        flush=True,
    )
    for m in history[::5]:
        print("   ", m.line(), flush=True)
    return params, acc, f


if __name__ == "__main__":
    n_train, n_test, epochs = 200, 50, 30
    if len(sys.argv) > 1:
        n_train, n_test, epochs = map(int, sys.argv[1:4])
    train_ex = make_examples(42, n_train)
    test_ex = make_examples(4242, n_test)
    run(False, 0.01, epochs, train_ex, test_ex)
    run(True, 0.01, epochs, train_ex, test_ex)
