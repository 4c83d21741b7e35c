"""Bridge from real images to the inference engine's container format:
resize, run a pretrained residual backbone, tap mid-network features,
downsample masks to the feature grid, and write per-image containers
plus a dataset index."""

from .config import ExportConfig, ImageItem, load_config
from .containers import read_container, write_container, write_image_container
from .export import export_task_set
from .masks import downsample_mask

__version__ = "0.1.0"
