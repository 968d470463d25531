from .checkpoint import load_weights, save_weights
from .layers import (
    Conv2D,
    Dense,
    GlobalAvgPool,
    HybridReduce,
    MaxPool2x2,
    ReLU,
    sigmoid,
    softmax,
    softmax_cross_entropy,
)
from .nets import (
    PostClassifierConfig,
    PostClassifierNet,
    ProposerConfig,
    ProposerNet,
    SlotPredictions,
    extract_context_features,
    postclassifier_forward,
    proposer_forward,
)
from .train import (
    CropSample,
    SGDMomentum,
    TrainStep,
    build_crop_samples,
    label_crop,
    sample_training_batch,
    train_postclassifier,
    train_proposer,
    write_loss_csv,
)

__all__ = [
    "Conv2D",
    "CropSample",
    "Dense",
    "GlobalAvgPool",
    "HybridReduce",
    "MaxPool2x2",
    "PostClassifierConfig",
    "PostClassifierNet",
    "ProposerConfig",
    "ProposerNet",
    "ReLU",
    "SGDMomentum",
    "SlotPredictions",
    "TrainStep",
    "build_crop_samples",
    "extract_context_features",
    "label_crop",
    "load_weights",
    "postclassifier_forward",
    "proposer_forward",
    "sample_training_batch",
    "save_weights",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "train_postclassifier",
    "train_proposer",
    "write_loss_csv",
]
