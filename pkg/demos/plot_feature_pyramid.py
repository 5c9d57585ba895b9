"""
Encoder pyramid and decoder reconstruction
==========================================

The frozen backbone yields three feature levels; the decoder rebuilds all
three from the deepest one.
"""

import torch

from hfrae import BackboneSpec, DecoderSpec, build_decoder, build_encoder, extract_features

# "imagenet" loads pretrained weights; "random" runs offline
encoder = build_encoder(BackboneSpec("resnet18", "random"))
x = torch.randn(2, 3, 256, 256)
pyramid = extract_features(encoder, x)
print("encoder levels", pyramid.shapes)

decoder = build_decoder(DecoderSpec(encoder.channels), pyramid.shapes, seed=0)
recon = decoder(pyramid.levels[-1])
print("decoder levels", [tuple(r.shape[1:]) for r in recon])

n_train = sum(p.numel() for p in decoder.parameters())
n_frozen = sum(p.numel() for p in encoder.parameters())
print(f"trainable {n_train:,} / frozen {n_frozen:,}")

# nearest-neighbour upsampling between stages
print(decoder.upsample(torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])))
