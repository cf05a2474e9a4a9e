from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import pytest
import torch
from PIL import Image


class TinyDetector(torch.nn.Module):
    """Brightness-keyed stand-in with the torchvision detection interface.

    Bright frames get one confident animal box, mid-gray frames one
    low-score person box (exercises the confidence floor), dark frames
    nothing.
    """

    def forward(self, images: List[torch.Tensor]) -> List[Dict[str, torch.Tensor]]:
        results: List[Dict[str, torch.Tensor]] = []
        for img in images:
            h = float(img.shape[1])
            w = float(img.shape[2])
            brightness = img.mean()
            if bool(brightness > 0.5):
                boxes = torch.tensor([[0.1 * w, 0.2 * h, 0.5 * w, 0.8 * h]])
                labels = torch.ones(1, dtype=torch.int64)
                scores = torch.tensor([0.9])
            elif bool(brightness > 0.25):
                boxes = torch.tensor([[0.0, 0.0, 0.3 * w, 0.3 * h]])
                labels = torch.full((1,), 2, dtype=torch.int64)
                scores = torch.tensor([0.08])
            else:
                boxes = torch.zeros((0, 4))
                labels = torch.zeros((0,), dtype=torch.int64)
                scores = torch.zeros((0,))
            results.append({"boxes": boxes, "labels": labels, "scores": scores})
        return results


@pytest.fixture(scope="session")
def model_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("model") / "tiny_detector.pt"
    torch.jit.script(TinyDetector()).save(str(path))
    return path


def write_image(path: Path, gray: int, size: int = 16) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (size, size), (gray, gray, gray)).save(path)
    return path


@pytest.fixture
def three_image_folder(tmp_path) -> Path:
    folder = tmp_path / "images"
    write_image(folder / "bright.jpg", 240)
    write_image(folder / "dim.jpg", 96)
    write_image(folder / "dark.jpg", 10)
    return folder
