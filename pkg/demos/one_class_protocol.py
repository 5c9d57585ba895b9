"""
One-class protocol on a labeled dataset
=======================================

Pick one class as normal, train on it alone and score the full test split.
Real runs read MNIST / Fashion-MNIST IDX files or CIFAR-10 batches with
``load_labeled_dataset``; here a toy dataset of striped digits stands in.
"""

import numpy as np

from hfrae import BackboneSpec, DecoderSpec, TrainConfig, build_decoder, build_encoder, evaluate, train
from hfrae.datasets import LabeledDataset, make_one_class_split

rng = np.random.default_rng(0)


def stripes(cls, n):
    # class c: gratings at angle c * 18 degrees
    yy, xx = np.mgrid[:28, :28]
    theta = np.deg2rad(cls * 18)
    base = 127 + 100 * np.sin((xx * np.cos(theta) + yy * np.sin(theta)) / 2.0)
    return np.clip(base + rng.normal(0, 10, (n, 28, 28)), 0, 255).astype(np.uint8)


classes = range(10)
train_x = np.concatenate([stripes(c, 12) for c in classes])
train_y = np.repeat(np.arange(10), 12)
test_x = np.concatenate([stripes(c, 4) for c in classes])
test_y = np.repeat(np.arange(10), 4)
toy = LabeledDataset("stripes", train_x, train_y, test_x, test_y)

res = 64
encoder = build_encoder(BackboneSpec("resnet18", "random"))
aucs = []
for normal in (0, 5):
    split = make_one_class_split(toy, normal, resolution=res)
    decoder = build_decoder(DecoderSpec(encoder.channels), encoder.output_shapes(res, res), seed=0)
    train(encoder, decoder, split.train, TrainConfig(epochs=15, batch_size=4))
    report = evaluate(encoder, decoder, split.test, category=f"normal={normal}")
    print(report.category, "detection AUROC", round(report.image_auroc, 3))
    aucs.append(report.image_auroc)
print("mean", round(float(np.mean(aucs)), 3))
