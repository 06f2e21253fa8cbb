"""RGB-only crop/weed/soil semantic segmentation."""

__version__ = "0.1.0"
