"""Full acceptance-scale run: 200 train / 50 test, 64x64, N=64, seed 42,
50 epochs, unary-only baseline then full pipeline."""

import time

import numpy as np

from crfseg import evalio, networks, pipeline

GAIN_ENC, GAIN_DEC = 2.0, 4.0


def init_with_gain(arch, seed):
    r = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            cout, cin, kh, kw = shape
            limit = np.sqrt(6.0 / (cin * kh * kw + cout * kh * kw))
            gain = GAIN_DEC if name.startswith("d") else GAIN_ENC
            params[name] = r.uniform(-limit * gain, limit * gain, size=shape)
    return params


def run(pairwise, lr=0.3, epochs=50):
    rng = np.random.default_rng(42)
    train_ex = [evalio.toy_face(rng, 64) for _ in range(200)]
    rng2 = np.random.default_rng(4242)
    test_ex = [evalio.toy_face(rng2, 64) for _ in range(50)]
    cfg = pipeline.TrainConfig(
        arch=networks.Architecture(), learning_rate=lr, momentum=0.9,
        epochs=epochs, superpixel_regions=64, superpixel_compactness=20.0,
        seed=42, pairwise=pairwise, lr_decay_every=20)
    tr = pipeline.prepare_examples(train_ex, cfg)
    te = pipeline.prepare_examples(test_ex, cfg)
    params = init_with_gain(cfg.arch, 42)
    velocity = {n: np.zeros_like(v) for n, v in params.items()}
    rngp = np.random.default_rng(42)
    t0 = time.time()
    for ep in range(1, epochs + 1):
        lrr = lr * 0.5 ** ((ep - 1) // cfg.lr_decay_every)
        tot = 0.0
        for i in rngp.permutation(len(tr)):
            img, lab, sm, gr = tr[i]
            fp = pipeline.forward(img, lab, params, sm, gr, cfg)
            pipeline.sgd_step(params, pipeline.backward(fp), velocity, lrr, 0.9)
            tot += fp.loss
        if ep % 5 == 0 or ep == 1:
            preds = [
                pipeline.forward(im, None, params, sm, gr, cfg).probabilities.argmax(-1)
                for im, _, sm, gr in te
            ]
            rep = evalio.evaluate(preds, [lb for _, lb, _, _ in te], 3)
            print(
                f"pw={pairwise} ep={ep:2d} loss={tot/len(tr):.4f} "
                f"TEST acc={rep.overall_accuracy:.4f} F={np.round(rep.f, 3)} "
                f"({time.time()-t0:.0f}s)",
                flush=True,
            )


if __name__ == "__main__":
    run(False)
    run(True)
