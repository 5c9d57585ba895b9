"""
Training on the synthetic texture dataset
=========================================

Generate the seeded fixture, train a decoder on normal images only, then
score the test split and write heat-map overlays. A short run; the desk
config in configs/desk.yaml trains for 200 epochs.
"""

from pathlib import Path

from hfrae import BackboneSpec, DecoderSpec, TrainConfig, build_decoder, build_encoder, evaluate, train
from hfrae.datasets import load_mvtec_category
from hfrae.export import save_overlay
from hfrae.fixture import make_fixture

out = Path("synthetic_run")
root = make_fixture(out / "data", seed=7).parent

res = 128
train_set = load_mvtec_category(root, "synthetic", "train", res)
test_set = load_mvtec_category(root, "synthetic", "test", res)

encoder = build_encoder(BackboneSpec("resnet18", "random"))
decoder = build_decoder(DecoderSpec(encoder.channels), encoder.output_shapes(res, res), seed=0)

ckpt = train(encoder, decoder, train_set, TrainConfig(epochs=30, batch_size=8))
print("loss", round(ckpt.loss_history[0]["loss"], 4), "->", round(ckpt.final_loss, 4))

report, outputs = evaluate(encoder, decoder, test_set, return_outputs=True)
print(report.row())

vrange = (0.0, float(outputs["maps"].max()))
for rec, amap in list(zip(test_set, outputs["maps"]))[-4:]:
    save_overlay(rec.image, amap, out / "overlays" / Path(rec.source_path).name, vrange=vrange)
