"""Bundled toy detector checkpoint for exercising the export bridge.

A small bias-free two-headed net: a strided conv trunk, a linear box head,
and a sigmoid confidence head. Checkpoints are plain torch saves carrying
the architecture config next to the state dict so they reload without
importing any model zoo.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .dmb import ExportError

CKPT_FORMAT = "toy-detector-v1"


class ToyDetector(nn.Module):
    def __init__(self, in_ch=3, widths=(8, 8), n_boxes=4, box_dim=7,
                 n_classes=3, in_hw=16):
        super().__init__()
        self.config = {"in_ch": in_ch, "widths": list(widths),
                       "n_boxes": n_boxes, "box_dim": box_dim,
                       "n_classes": n_classes, "in_hw": in_hw}
        trunk = []
        c, hw = in_ch, in_hw
        for w in widths:
            trunk.append(nn.Conv2d(c, w, 3, stride=2, padding=1, bias=False))
            trunk.append(nn.ReLU())
            c, hw = w, (hw + 1) // 2
        self.trunk = nn.Sequential(*trunk)
        feat = c * hw * hw
        self.box_head = nn.Linear(feat, n_boxes * box_dim, bias=False)
        self.conf_head = nn.Linear(feat, n_boxes * n_classes, bias=False)

    def forward(self, x):
        f = torch.flatten(self.trunk(x), 1)
        return self.box_head(f), torch.sigmoid(self.conf_head(f))


def build_toy_model(config=None, seed: int = 0) -> ToyDetector:
    torch.manual_seed(seed)
    return ToyDetector(**(config or {}))


def save_toy_checkpoint(path, seed: int = 0) -> ToyDetector:
    model = build_toy_model(seed=seed)
    torch.save({"format": CKPT_FORMAT, "config": model.config,
                "state_dict": model.state_dict()}, path)
    return model


def load_checkpoint(path) -> ToyDetector:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ExportError(f"cannot load checkpoint: {path} ({e})") from e
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise ExportError(f"unrecognized checkpoint format: {path}")
    model = ToyDetector(**blob["config"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def toy_calibration(n: int, seed: int = 0, in_ch=3, in_hw=16) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, in_ch, in_hw, in_hw))
