"""Pretrained residual backbone with a mid-network feature tap.

For a plain torchvision ResNet-50 the 512-channel stage at 1/8
resolution is ``layer2``: a 417 x 417 input yields a 53 x 53 x 512
feature map there, matching the classifier's expected geometry.
Features are exported unnormalised; the engine's cosine handles scale.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torchvision import models
from torchvision.models.resnet import ResNet

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_FACTORIES = {
    "resnet50": (models.resnet50, "IMAGENET1K_V1"),
    "resnet101": (models.resnet101, "IMAGENET1K_V1"),
}


class MissingWeightsError(RuntimeError):
    """Pretrained weights were requested but could not be obtained."""


def build_feature_extractor(backbone: str, weights: str, layer: str) -> nn.Module:
    """The backbone truncated right after the tap layer, in eval mode.

    ``weights`` is ``imagenet`` (abort if unobtainable), ``none`` or
    ``calibrated`` (reproducible random init; the latter expects a
    :func:`calibrate_batchnorm` pass over the export corpus), or a path
    to a local state dict.
    """
    if backbone not in _FACTORIES:
        raise ValueError(f"unsupported backbone {backbone!r}; choose from {sorted(_FACTORIES)}")
    factory, weight_tag = _FACTORIES[backbone]
    if weights == "imagenet":
        try:
            net: ResNet = factory(weights=weight_tag)
        except Exception as exc:  # download or cache failure
            raise MissingWeightsError(
                f"pretrained weights for {backbone} unavailable: {exc}"
            ) from exc
    elif weights in ("none", "calibrated"):
        torch.manual_seed(0)  # random init, but a reproducible one
        net = factory(weights=None)
    else:
        net = factory(weights=None)
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise MissingWeightsError(f"cannot load weights from {weights!r}: {exc}") from exc
        net.load_state_dict(state)

    stages = ["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"]
    keep = stages[: stages.index(layer) + 1]
    extractor = nn.Sequential(*(getattr(net, name) for name in keep))
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor


def calibrate_batchnorm(extractor: nn.Module, images) -> None:
    """Refresh BatchNorm running statistics with forward passes only.

    No parameters change (no gradients are computed); this merely
    standardises activations so that a randomly initialised backbone
    produces a usable cosine geometry instead of collapsing every
    post-ReLU feature into a sliver of the positive orthant.
    """
    for m in extractor.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_running_stats()
            m.momentum = None  # cumulative moving average over the corpus
    extractor.train()
    with torch.no_grad():
        for image in images:
            extractor(_to_tensor(image))
    extractor.eval()


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    arr = (np.asarray(image, dtype=np.float32) - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def extract_features(extractor: nn.Module, image: np.ndarray) -> np.ndarray:
    """(H, W, 3) float image in [0, 1] -> channel-last float32 feature map."""
    with torch.no_grad():
        feats = extractor(_to_tensor(image))
    return feats.squeeze(0).permute(1, 2, 0).contiguous().numpy().astype(np.float32)
