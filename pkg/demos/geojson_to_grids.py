"""Turn a handful of hand-made GeoJSON polygons into composition grids.

Writes two FeatureCollections around one z16 tile (an apartment block with a
height tag, a park, and a school whose outline crosses the tile's east edge),
then runs ingest and rasterize and prints what landed in each grid.

    python demos/geojson_to_grids.py [out_dir]
"""
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from pixelforge.geometry import TileSpec, pixel_to_lonlat
from pixelforge.pipeline import cmd_ingest, cmd_rasterize, read_manifest, resolve
from pixelforge.raster import extract_instances, read_grid

TILE = TileSpec(16, 19295, 24640, 128, 128)


def rect(u0, v0, u1, v1):
    corners = [(u0, v0), (u1, v0), (u1, v1), (u0, v1), (u0, v0)]
    return [list(pixel_to_lonlat(u, v, TILE)) for u, v in corners]


def feature(ring, **tags):
    return {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [ring]}, "properties": tags}


def main(out: Path):
    src = out / "geojson"
    src.mkdir(parents=True, exist_ok=True)
    buildings = [
        feature(rect(10, 10, 50, 40), building="apartments", height="18m"),
        feature(rect(90, 60, 160, 100), building="school"),  # runs into the next tile east
    ]
    land = [feature(rect(0, 64, 70, 128), leisure="park")]
    for name, feats in (("buildings", buildings), ("land", land)):
        (src / f"{name}.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": feats}))

    report = cmd_ingest(src, out / "ingest", zoom=16, tile_px=128, rare_threshold=0.0)
    print(f"ingest: {report.n_polygons} polygons over {report.n_tiles} tiles, skipped {report.skipped}")
    manifest = cmd_rasterize(report.manifest_path, out / "grids", min_coverage=0.0)
    for rec in read_manifest(manifest):
        g = read_grid(resolve(manifest, rec["grid_path"]))
        ids, counts = np.unique(g.ids, return_counts=True)
        t = rec["tile"]
        print(f"\ntile {t['z']}/{t['x']}/{t['y']} split={rec['split']} size={g.height}x{g.width}")
        for cid, n in zip(ids, counts):
            label = " + ".join(f"{a.key}={a.value}" for a in g.intern[int(cid)].atoms) or "(empty)"
            print(f"  id {int(cid):2d}  {n:6d} px  {label}")
        print(f"  {len(extract_instances(g))} polygon instances")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="pixelforge-demo-")))
