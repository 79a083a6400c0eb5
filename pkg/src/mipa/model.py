"""Shared-encoder detector and its versioned checkpoint archive."""
from __future__ import annotations

import torch
from torch import nn

from .agnostic import ModalityClassifier
from .detection import DetectionHead, predict
from .encoder import EncoderConfig, PatchEncoder

CHECKPOINT_FORMAT = 1


class MiPaDetector(nn.Module):
    """Patch encoder + per-token detection head, used unchanged for RGB, IR and mosaics."""

    def __init__(self, encoder_config: EncoderConfig, image_size: tuple, num_classes: int):
        super().__init__()
        h, w = image_size
        p = encoder_config.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {image_size} not divisible by patch_size {p}")
        self.image_size = (h, w)
        self.num_classes = num_classes
        self.encoder = PatchEncoder(encoder_config, h // p, w // p)
        self.head = DetectionHead(encoder_config.embed_dim, num_classes)

    def forward(self, images: torch.Tensor) -> tuple:
        """Return ``(stage1_tokens, raw_head_output)``."""
        stage1, final = self.encoder(images)
        return stage1.tokens, self.head(final.tokens)

    @torch.no_grad()
    def detect(self, images: torch.Tensor, score_threshold: float = 0.3, image_ids=None) -> list:
        was_training = self.training
        self.eval()
        _, raw = self(images)
        self.train(was_training)
        return predict(raw, self.num_classes, score_threshold, image_ids=image_ids)


def build_classifier(model: MiPaDetector, seed: int) -> ModalityClassifier:
    # own generator so adding the classifier leaves detector initialisation untouched
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    classifier = ModalityClassifier(model.encoder.config.embed_dim)
    torch.random.set_rng_state(state)
    return classifier


def save_checkpoint(path, model: MiPaDetector, experiment: dict, classifier=None, extra=None):
    archive = {
        "format_version": CHECKPOINT_FORMAT,
        "encoder_config": model.encoder.config.to_dict(),
        "image_size": list(model.image_size),
        "num_classes": model.num_classes,
        "experiment": experiment,
        "state_dict": model.state_dict(),
        "classifier_state_dict": classifier.state_dict() if classifier is not None else None,
        "extra": extra or {},
    }
    torch.save(archive, path)


def load_checkpoint(path) -> tuple:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    version = archive.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_FORMAT}")
    model = MiPaDetector(EncoderConfig(**archive["encoder_config"]), tuple(archive["image_size"]),
                         archive["num_classes"])
    model.load_state_dict(archive["state_dict"])
    model.eval()
    return model, archive
