"""Centerline-based intracranial artery labeling toolkit."""

__version__ = "0.1.0"

from .volume import CLASS_NAMES, NON_ANNOTATED, NUM_CLASSES, Volume, read_volume, write_volume  # noqa: E402

__all__ = ["CLASS_NAMES", "NON_ANNOTATED", "NUM_CLASSES", "Volume", "read_volume", "write_volume", "__version__"]
