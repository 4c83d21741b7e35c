"""Command line: `repri-export --config export.cfg`."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbone import MissingWeightsError
from .config import load_config
from .export import export_task_set


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Extract backbone feature maps from images and write "
        "feature containers plus a dataset index."
    )
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        cfg = load_config(args.config)
        index_path, records = export_task_set(cfg)
    except MissingWeightsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {len(records)} containers; index at {index_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
