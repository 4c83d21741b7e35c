"""Export configuration: a single text file of key=value lines.

Keys: ``backbone`` (default resnet50), ``weights`` (``imagenet``, a
local state-dict path, ``none`` for raw random init, or ``calibrated``
for random init with BatchNorm statistics refreshed on the export
corpus), ``resolution`` (default 417), ``layer`` (tap point, default
layer2), ``out_dir``, and one ``image`` line per input::

    image = <class_id>\t<image_id>\t<image_path>\t<mask_path>

(colons work as separators too when paths contain no colon).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

KNOWN_LAYERS = ("layer1", "layer2", "layer3", "layer4")


@dataclass(frozen=True)
class ImageItem:
    class_id: int
    image_id: str
    image_path: str
    mask_path: str


@dataclass(frozen=True)
class ExportConfig:
    out_dir: str
    items: tuple
    backbone: str = "resnet50"
    weights: str = "imagenet"
    resolution: int = 417
    layer: str = "layer2"

    def __post_init__(self) -> None:
        if self.resolution < 32:
            raise ValueError("resolution must be a positive image size (>= 32)")
        if self.layer not in KNOWN_LAYERS:
            raise ValueError(f"layer must be one of {KNOWN_LAYERS}, got {self.layer!r}")
        if not self.items:
            raise ValueError("need at least one image item")
        for item in self.items:
            for p in (item.image_path, item.mask_path):
                if not Path(p).exists():
                    raise FileNotFoundError(f"input path does not exist: {p}")


def _parse_item(value: str) -> ImageItem:
    sep = "\t" if "\t" in value else ":"
    parts = value.split(sep)
    if len(parts) != 4:
        raise ValueError(f"image line needs class_id{sep}image_id{sep}image{sep}mask, got {value!r}")
    return ImageItem(int(parts[0]), parts[1], parts[2], parts[3])


def load_config(path) -> ExportConfig:
    fields = {}
    items = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "image":
            items.append(_parse_item(value))
        else:
            fields[key] = value
    if "out_dir" not in fields:
        raise ValueError(f"{path}: missing out_dir")
    return ExportConfig(
        out_dir=fields["out_dir"],
        items=tuple(items),
        backbone=fields.get("backbone", "resnet50"),
        weights=fields.get("weights", "imagenet"),
        resolution=int(fields.get("resolution", "417")),
        layer=fields.get("layer", "layer2"),
    )
