"""Unsupervised anomaly detection by hierarchical feature reconstruction.

A frozen ImageNet ResNet encodes an image into a three-level feature pyramid,
a small trainable decoder rebuilds every level from the deepest one, and the
normalized reconstruction residuals give both the training loss and, at test
time, a pixel anomaly map whose maximum is the image anomaly score.
"""

from .decoder import Decoder, DecoderSpec, build_decoder, reconstruct
from .encoder import BackboneSpec, Encoder, FeaturePyramid, build_encoder, extract_features
from .metrics import EvalReport, aupro, connected_components, image_auroc, pixel_auroc, roc_curve
from .residual import (
    aggregate_anomaly_map,
    anomaly_score,
    hierarchical_loss,
    level_loss,
    normalize_level,
    residual_map,
    total_loss,
)
from .trainer import (
    Checkpoint,
    InferenceConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
