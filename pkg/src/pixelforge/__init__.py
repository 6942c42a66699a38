"""pixelforge: OSM polygons to pixel-level tag rasters, contrastive alignment and control maps."""

__version__ = "0.1.0"
