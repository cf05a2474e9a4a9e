"""Run a TorchScript detection model over an image folder, write batch JSON.

The model must follow the torchvision detection convention: called with a
list of CHW float tensors in [0, 1], it returns one dict per image with
``boxes`` (xyxy pixels), ``labels`` (int64) and ``scores``. Category labels
1/2/3 map to animal/person/vehicle; anything else is dropped. MegaDetector
exports scripted to this interface plug in directly.

Invocation matches the pipeline's external-process adapter template:

    md-bridge --input {input_folder} --output {output_json}

One batch JSON per run. A broken image puts a ``failure`` string on its
entry instead of aborting the folder; exit status is 0 iff the JSON was
written. No network access: the model is loaded from a local path.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import torch
from PIL import Image

FORMAT_VERSION = "1.3"
DETECTION_CATEGORIES = {"1": "animal", "2": "person", "3": "vehicle"}
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png"}
DEFAULT_CONFIDENCE_FLOOR = 0.005


def list_images(folder: Path) -> list[str]:
    files = [
        p.relative_to(folder).as_posix()
        for p in folder.rglob("*")
        if p.is_file()
        and p.suffix.lower() in IMAGE_EXTENSIONS
        and not p.name.startswith(".")
    ]
    return sorted(files)


def load_model(model_path: Path, device: str) -> torch.jit.ScriptModule:
    model = torch.jit.load(str(model_path), map_location=device)
    model.eval()
    return model


def pick_device(preference: str) -> str:
    if preference == "cuda" and not torch.cuda.is_available():
        print("md-bridge: cuda requested but unavailable, using cpu", file=sys.stderr)
        return "cpu"
    return preference


def image_tensor(path: Path, device: str) -> torch.Tensor:
    with Image.open(path) as im:
        array = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).to(device)


def _round5(value: float) -> float:
    return round(value, 5)


def detections_from_output(
    output: dict, width: int, height: int, floor: float
) -> list[dict]:
    boxes = output["boxes"].detach().cpu().numpy()
    labels = output["labels"].detach().cpu().numpy()
    scores = output["scores"].detach().cpu().numpy()
    detections = []
    for (x1, y1, x2, y2), label, score in zip(boxes, labels, scores):
        if score < floor or int(label) not in (1, 2, 3):
            continue
        x = max(0.0, min(1.0, float(x1) / width))
        y = max(0.0, min(1.0, float(y1) / height))
        w = max(0.0, min(1.0 - x, float(x2 - x1) / width))
        h = max(0.0, min(1.0 - y, float(y2 - y1) / height))
        detections.append(
            {
                "category": str(int(label)),
                "conf": _round5(float(score)),
                "bbox": [_round5(x), _round5(y), _round5(w), _round5(h)],
            }
        )
    return detections


def run_folder(
    model: torch.jit.ScriptModule,
    folder: Path,
    device: str,
    floor: float,
) -> dict:
    images = []
    for rel in list_images(folder):
        entry: dict = {"file": rel}
        try:
            tensor = image_tensor(folder / rel, device)
            with torch.no_grad():
                (output,) = model([tensor])
            height, width = tensor.shape[1], tensor.shape[2]
            entry["detections"] = detections_from_output(output, width, height, floor)
        except Exception as exc:  # keep going; one bad frame is normal
            entry["failure"] = f"{type(exc).__name__}: {exc}"
        images.append(entry)
    return {
        "images": images,
        "detection_categories": dict(DETECTION_CATEGORIES),
        "info": {
            "format_version": FORMAT_VERSION,
            "detector_name": "md-bridge",
            "generated_at": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        },
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="md-bridge",
        description="Run a local TorchScript detection model over an image folder.",
    )
    parser.add_argument("--input", required=True, help="image folder to process")
    parser.add_argument("--output", required=True, help="batch JSON output path")
    parser.add_argument("--model", required=True, help="TorchScript model path")
    parser.add_argument("--device", choices=("cpu", "cuda"), default="cpu")
    parser.add_argument(
        "--confidence-floor",
        type=float,
        default=DEFAULT_CONFIDENCE_FLOOR,
        help="drop detections scoring below this (default %(default)s)",
    )
    return parser


def bridge_main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    folder = Path(args.input)
    if not folder.is_dir():
        print(f"md-bridge: input folder {folder} not found", file=sys.stderr)
        return 1
    device = pick_device(args.device)
    model_path = Path(args.model)
    try:
        model = load_model(model_path, device)
    except Exception as exc:
        print(f"md-bridge: cannot load model {model_path}: {exc}", file=sys.stderr)
        return 1
    batch = run_folder(model, folder, device, args.confidence_floor)
    batch["info"]["detector_name"] = model_path.stem
    try:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            json.dumps(batch, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        print(f"md-bridge: cannot write {args.output}: {exc}", file=sys.stderr)
        return 1
    failures = sum(1 for e in batch["images"] if "failure" in e)
    print(
        f"md-bridge: {len(batch['images'])} image(s), {failures} failure(s) "
        f"-> {args.output}",
        file=sys.stderr,
    )
    return 0


def main() -> None:
    sys.exit(bridge_main())


if __name__ == "__main__":
    main()
