"""Dataset pipeline behind the command line: ingest, rasterize, train, control, eval.

Every step is deterministic given its inputs and seed. Manifests are JSONL
files whose paths are stored relative to the manifest's directory.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import blob
from .align import MAX_LOG_SCALE, AlignParams, TrainConfig, plan_batch_size, pool_polygon, train
from .control import (
    MaskSchedule,
    apply_polygon_mask,
    build_control_raster,
    build_embedding_grid,
    quantize_preview,
    retained_fraction,
    write_raster,
)
from .embed import ControlAdapterParams, ToyImageEncoderParams, ToyTextEncoderParams, image_forward, text_forward
from .evaluate import (
    fit_gaussian,
    frechet_distance,
    jaccard_relevance,
    mixed_f1,
    parent_child_accuracy,
    psnr,
    rank_gallery,
    recall_at_k,
    semantic_ndcg_at_k,
    ssim,
    tag_overlap_f1,
)
from .geometry import PolygonGeometry, TileSpec, tiles_for_polygon
from .raster import (
    MIN_COVERAGE,
    CompositionGrid,
    InternTable,
    composite_tile,
    coverage_fraction,
    decode_grid,
    extract_instances,
    passes_coverage,
    read_grid,
    write_grid,
)
from .synthetic import _digest_seed, feature_instances, synthetic_image, training_sample
from .tags import (
    Composition,
    TagVocabulary,
    filter_rare_tags,
    parse_sentence,
    parse_tag,
    render_sentence,
    tag_from_kv,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BLOCK_TILES = 4
CACHE_ENV = "PIXELFORGE_CACHE"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- manifests ------------------------------------------------------------------------------

def tile_name(t: TileSpec) -> str:
    return f"{t.z}_{t.x}_{t.y}"


def tile_record(t: TileSpec) -> dict:
    return {"z": t.z, "x": t.x, "y": t.y}


def tile_from_record(rec: dict) -> TileSpec:
    px, py = rec.get("size", (512, 512))
    return TileSpec(rec["tile"]["z"], rec["tile"]["x"], rec["tile"]["y"], px, py)


def write_manifest(path: Path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path, check_paths: bool = True) -> list[dict]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "split" in rec and rec["split"] not in SPLITS:
                raise DataError(f"{path}:{lineno}: bad split {rec['split']!r}")
            cov = rec.get("coverage")
            if cov is not None and not 0.0 <= cov <= 1.0:
                raise DataError(f"{path}:{lineno}: coverage {cov} outside [0, 1]")
            if check_paths:
                for key in ("grid_path", "image_path", "features_path"):
                    if rec.get(key) and not (path.parent / rec[key]).exists():
                        raise DataError(f"{path}:{lineno}: {key} {rec[key]!r} does not exist")
            records.append(rec)
    return records


def resolve(manifest_path, rel: str) -> Path:
    return Path(manifest_path).parent / rel


def assign_split(t: TileSpec, block: int = BLOCK_TILES) -> str:
    """60/20/20 split keyed by a hash of the tile's spatial block."""
    u = _digest_seed("block", t.z, t.x // block, t.y // block) % 1000
    return "train" if u < 600 else ("val" if u < 800 else "test")


# -- ingest -------------------------------------------------------------------------------

@dataclass
class IngestReport:
    manifest_path: Path
    n_polygons: int = 0
    n_tiles: int = 0
    skipped: dict = field(default_factory=dict)  # geometry type -> count
    errors: list = field(default_factory=list)


def _feature_polygons(feature: dict) -> tuple[list, Optional[str]]:
    geom = feature.get("geometry") or {}
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype == "Polygon":
        parts = [coords]
    elif gtype == "MultiPolygon":
        parts = coords
    else:
        return [], gtype or "null"
    return [PolygonGeometry(p[0], tuple(p[1:])) for p in parts], None


def _feature_tags(feature: dict) -> Composition:
    props = feature.get("properties") or {}
    atoms = []
    for k, v in props.items():
        if v is None or isinstance(v, (dict, list, bool)) or str(v).strip() == "" or str(k).startswith("@"):
            continue
        atoms.append(tag_from_kv(k, v))
    return Composition(tuple(atoms))


def cmd_ingest(geojson_dir, out_dir, zoom: int = 16, tile_px: int = 512, rare_threshold: float = 0.002) -> IngestReport:
    """Assign GeoJSON polygons to tiles, build the tag vocabulary and prune rare tags."""
    src, out = Path(geojson_dir), Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    report = IngestReport(out / "manifest.jsonl")
    per_tile: dict[tuple, list] = {}
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".geojson", ".json"))
    for fp in files:
        try:
            doc = json.loads(fp.read_text(encoding="utf-8"))
            if doc.get("type") != "FeatureCollection" or not isinstance(doc.get("features"), list):
                raise ValueError("not a GeoJSON FeatureCollection")
        except (OSError, ValueError, AttributeError) as exc:
            report.errors.append({"file": fp.name, "error": str(exc)})
            log.error("%s: %s", fp.name, exc)
            continue
        for idx, feature in enumerate(doc["features"]):
            try:
                polys, skipped = _feature_polygons(feature)
                if skipped:
                    report.skipped[skipped] = report.skipped.get(skipped, 0) + 1
                    continue
                comp = _feature_tags(feature)
            except (ValueError, TypeError, IndexError, AttributeError) as exc:
                report.errors.append({"file": fp.name, "feature": idx, "error": str(exc)})
                continue
            if not comp:
                report.skipped["untagged"] = report.skipped.get("untagged", 0) + 1
                continue
            for poly in polys:
                report.n_polygons += 1
                for t in tiles_for_polygon(poly, zoom, tile_px, tile_px):
                    per_tile.setdefault((t.z, t.y, t.x), []).append((poly, comp))
    for gtype, n in sorted(report.skipped.items()):
        log.warning("skipped %d %s feature(s)", n, gtype)

    records = []
    if per_tile:
        vocab = TagVocabulary.from_tiles(
            {a for _, comp in polys for a in comp.atoms} for polys in per_tile.values()
        )
        (out / "vocabulary.json").write_text(vocab.to_json(), encoding="utf-8")
        retained = filter_rare_tags(vocab, rare_threshold)
        for (z, y, x) in sorted(per_tile):
            t = TileSpec(z, x, y, tile_px, tile_px)
            feats = []
            for poly, comp in per_tile[(z, y, x)]:
                kept = sorted(a.rendered for a in comp.atoms if a in retained)
                if not kept:
                    continue
                rings = [poly.exterior.tolist(), *(h.tolist() for h in poly.holes)]
                feats.append({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": rings},
                              "properties": {"tags": kept}})
            if not feats:
                continue
            rel = f"tiles/{tile_name(t)}.geojson"
            (out / rel).write_text(json.dumps({"type": "FeatureCollection", "features": feats}), encoding="utf-8")
            records.append({"tile": tile_record(t), "size": [tile_px, tile_px], "features_path": rel,
                            "n_polygons": len(feats), "coverage": None})
    report.n_tiles = len(records)
    write_manifest(report.manifest_path, records)
    if report.errors:
        write_manifest(out / "errors.jsonl", report.errors)
    if report.n_polygons == 0:
        raise DataError(f"no polygon features found in {src} (skipped: {report.skipped})")
    return report


# -- rasterize ------------------------------------------------------------------------------

def _load_tile_polygons(path: Path) -> list:
    doc = json.loads(path.read_text(encoding="utf-8"))
    out = []
    for f in doc["features"]:
        rings = f["geometry"]["coordinates"]
        comp = Composition(tuple(parse_tag(t) for t in f["properties"]["tags"]))
        out.append((PolygonGeometry(rings[0], tuple(rings[1:])), comp))
    return out


def write_dataset(grids: Iterable[CompositionGrid], out_dir, extra: Optional[dict] = None) -> Path:
    """Write grids as ``.pxfg`` files with a manifest; IDs are merged into one dataset-wide table."""
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    table = InternTable()
    records = []
    for g in grids:
        g = g.relabel(table)
        rel = f"grids/{tile_name(g.tile)}.pxfg"
        write_grid(out / rel, g)
        rec = {
            "tile": tile_record(g.tile),
            "size": [g.tile.px, g.tile.py],
            "coverage": coverage_fraction(g),
            "n_instances": len(extract_instances(g)),
            "grid_path": rel,
            "split": assign_split(g.tile),
        }
        rec.update((extra or {}).get(tile_name(g.tile), {}))
        records.append(rec)
    path = out / "manifest.jsonl"
    write_manifest(path, records)
    return path


def cmd_rasterize(manifest, out_dir, min_coverage: float = MIN_COVERAGE, threads: int = 1) -> Path:
    """Composite each ingested tile, gate on coverage and write grids plus a split manifest."""
    manifest = Path(manifest)
    records = read_manifest(manifest)

    def build(rec):
        t = tile_from_record(rec)
        try:
            polys = _load_tile_polygons(resolve(manifest, rec["features_path"]))
        except (OSError, ValueError, KeyError) as exc:
            log.error("tile %s: %s", tile_name(t), exc)
            return t, None
        return t, composite_tile(polys, t)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        built = list(pool.map(build, records))
    kept = []
    for t, g in built:
        if g is None:
            continue
        if not passes_coverage(g, min_coverage):
            log.info("dropping tile %s: coverage %.4f < %.2f", tile_name(t), coverage_fraction(g), min_coverage)
            continue
        kept.append(g)
    return write_dataset(kept, out_dir)


# -- samples and checkpoints ------------------------------------------------------------------

def load_image(path: Path) -> np.ndarray:
    """Image file as a (3, H, W) float array; PNG/JPEG scaled to [0, 1], ``.npy`` as stored."""
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        return arr if arr.shape[0] == 3 else arr.transpose(2, 0, 1)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def tile_image(manifest, rec: dict, g: CompositionGrid, seed: int) -> np.ndarray:
    if rec.get("image_path"):
        return load_image(resolve(manifest, rec["image_path"]))
    return synthetic_image(g, seed=seed)


def load_split(manifest, split: str, check: bool = True) -> list[tuple[dict, CompositionGrid]]:
    out = []
    for rec in read_manifest(manifest):
        if rec.get("split") != split or not rec.get("grid_path"):
            continue
        out.append((rec, read_grid(resolve(manifest, rec["grid_path"]), tile_from_record(rec))))
    if check and not out:
        raise DataError(f"manifest {manifest} has no {split!r} tiles")
    return out


def save_checkpoint(path, params: AlignParams, cfg: TrainConfig):
    blob.write_blob(
        path,
        {"text_weight": params.text.weight, "image_weight": params.image.weight, "log_scale": [params.log_scale]},
        kind="align", seed=cfg.seed, d=cfg.d, v=cfg.v_hash, grid=[cfg.grid_h, cfg.grid_w], config=cfg.dump(),
    )


def load_checkpoint(path) -> tuple[AlignParams, TrainConfig]:
    meta, arrays = blob.read_blob(path)
    if meta.get("kind") != "align":
        raise DataError(f"{path} is not an alignment checkpoint")
    cfg = TrainConfig.parse(meta["config"])
    params = AlignParams(
        ToyTextEncoderParams(arrays["text_weight"]),
        ToyImageEncoderParams(arrays["image_weight"]),
        # f32 storage can round ln(100) upward
        min(float(arrays["log_scale"][0]), MAX_LOG_SCALE),
    )
    return params, cfg


def cmd_train_align(manifest, out_dir, cfg: TrainConfig) -> tuple[AlignParams, list]:
    """Train the toy encoders on the train split; writes ``checkpoint.pxfb`` and ``loss.csv``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tiles = load_split(manifest, "train")
    samples = [training_sample(g, tile_image(manifest, rec, g, cfg.seed), cfg.grid) for rec, g in tiles]
    samples = [s for s in samples if s.instances]
    if not samples:
        raise DataError("train split has no polygon instances")
    params = AlignParams.init(cfg.d, cfg.v_hash, samples[0].image.shape[0], cfg.seed)
    if cfg.max_steps:
        params, history = train(samples, cfg, params)
    else:
        history = None
    save_checkpoint(out / "checkpoint.pxfb", params, cfg)
    csv = history.to_csv() if history else "step,loss,logit_scale\n"
    (out / "loss.csv").write_text(csv, encoding="utf-8")
    return params, (history.losses if history else [])


# -- text embedding cache ---------------------------------------------------------------------

def _checkpoint_digest(params: AlignParams) -> str:
    return hashlib.sha256(params.text.weight.astype("<f8").tobytes()).hexdigest()[:16]


def text_cache(params: AlignParams, compositions: dict, cache_dir=None) -> dict:
    """``{composition id: embedding}``, reusing a sentence-keyed cache file when available."""
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    known: dict[str, np.ndarray] = {}
    path = None
    if cache_dir:
        path = Path(cache_dir) / f"text-{_checkpoint_digest(params)}.pxfb"
        if path.exists():
            meta, arrays = blob.read_blob(path)
            known = dict(zip(meta["sentences"], arrays["embeddings"]))
    todo = sorted({render_sentence(c) for c in compositions.values()} - known.keys())
    if todo:
        emb, _ = text_forward([parse_sentence(s) for s in todo], params.text)
        known.update(zip(todo, emb))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            names = sorted(known)
            blob.write_blob(path, {"embeddings": np.stack([known[s] for s in names])}, sentences=names)
    return {cid: np.asarray(known[render_sentence(c)]) for cid, c in compositions.items()}


# -- control ----------------------------------------------------------------------------------

def parse_schedule_step(text: str) -> tuple[int, int]:
    try:
        t, total = (int(s) for s in text.split("/"))
    except ValueError as exc:
        raise UsageError(f"--schedule-step expects t/T, got {text!r}") from exc
    return t, total


def cmd_control(
    manifest,
    checkpoint,
    out_dir,
    mask_retained: Optional[float] = None,
    schedule_step: Optional[tuple[int, int]] = None,
    adapter_path=None,
    seed: int = 42,
    preview: bool = False,
    cache_dir=None,
) -> list[Path]:
    """Write a PXFC control raster (and optional PNG preview) for every tile in the manifest."""
    if mask_retained is not None and schedule_step is not None:
        raise UsageError("use either --mask-retained or --schedule-step, not both")
    if schedule_step is not None:
        t, total = schedule_step
        mask_retained = retained_fraction(MaskSchedule(total), t)
    if mask_retained is not None and not 0.0 <= mask_retained <= 1.0:
        raise UsageError("--mask-retained must lie in [0, 1]")
    params, _ = load_checkpoint(checkpoint)
    if adapter_path:
        _, arrays = blob.read_blob(adapter_path)
        adapter = ControlAdapterParams(arrays["weight"], arrays["bias"])
    else:
        adapter = ControlAdapterParams.init(params.text.d, rng=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob.write_blob(out / "adapter.pxfb", {"weight": adapter.weight, "bias": adapter.bias}, kind="adapter")

    manifest = Path(manifest)
    tiles = [(rec, read_grid(resolve(manifest, rec["grid_path"]), tile_from_record(rec)))
             for rec in read_manifest(manifest) if rec.get("grid_path")]
    comps = {}
    for _, g in tiles:
        comps.update(g.intern.items())
    cache = text_cache(params, comps, cache_dir)
    written = []
    for rec, g in tiles:
        t = g.tile
        if mask_retained is not None:
            rng = np.random.default_rng(_digest_seed("mask", seed, t.z, t.x, t.y))
            g, _ = apply_polygon_mask(g, extract_instances(g), mask_retained, rng)
        s = build_control_raster(build_embedding_grid(g, cache), adapter)
        path = out / f"{tile_name(t)}.pxfc"
        write_raster(path, s)
        written.append(path)
        if preview:
            from PIL import Image

            Image.fromarray(quantize_preview(s)).save(out / f"{tile_name(t)}.png")
    return written


# -- eval ------------------------------------------------------------------------------------

SUITES = ("retrieval", "tags", "image")


def _to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float image to (H, W, 3) 8-bit; [0, 1] data maps directly, else min-max over [-2, 2]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        arr = (arr + 2.0) / 4.0
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).transpose(1, 2, 0)


def _retrieval_queries(manifest, tiles, params: AlignParams, cfg: TrainConfig, seed: int):
    queries = []
    comps: dict[int, Composition] = {}
    for rec, g in tiles:
        z, _ = image_forward(tile_image(manifest, rec, g, seed), params.image, cfg.grid)
        for inst in feature_instances(g, cfg.grid):
            queries.append((inst.composition_id, pool_polygon(z, inst.mask)))
            comps[inst.composition_id] = g.intern[inst.composition_id]
    return queries, comps


def cmd_eval(
    manifest,
    checkpoint,
    suites: Iterable[str] = ("retrieval",),
    seed: int = 42,
    generated_dir=None,
    real_features=None,
    generated_features=None,
    out_json=None,
) -> dict:
    suites = list(suites)
    if not suites:
        raise UsageError("select at least one suite")
    bad = [s for s in suites if s not in SUITES]
    if bad:
        raise UsageError(f"unknown suite(s) {bad}; choose from {SUITES}")
    params, cfg = load_checkpoint(checkpoint)
    tiles = load_split(manifest, "test")
    report: dict = {}

    if "retrieval" in suites or "tags" in suites:
        queries, comps = _retrieval_queries(manifest, tiles, params, cfg, seed)
        if not queries:
            raise DataError("test split has no polygon instances")
        gallery_ids = sorted(comps)
        emb, _ = text_forward([comps[i] for i in gallery_ids], params.text)
        results = [rank_gallery(q, gallery_ids, emb, truth) for truth, q in queries]
        report["n_queries"] = len(results)
        report["gallery_size"] = len(gallery_ids)
        report["n_query_compositions"] = len({r.truth for r in results})
        if "retrieval" in suites:
            for k in (1, 5, 10):
                report[f"recall@{k}"] = recall_at_k(results, k)
            report["ndcg@20"] = semantic_ndcg_at_k(results, jaccard_relevance(comps), 20)
            report["exact@1"] = float(np.mean([r.ranked_ids[0] == r.truth for r in results]))
            report["tag_f1@1"] = float(np.mean([tag_overlap_f1(comps[r.ranked_ids[0]], comps[r.truth]) for r in results]))
        if "tags" in suites:
            preds = [(comps[r.ranked_ids[0]], comps[r.truth]) for r in results]
            report["parent_acc"], report["child_acc"] = parent_child_accuracy(preds)
            report["mixed_f1"] = mixed_f1(preds)

    if "image" in suites:
        if generated_dir is None:
            raise UsageError("the image suite needs --generated DIR")
        gen_dir = Path(generated_dir)
        ss, ps, ref_feats, gen_feats = [], [], [], []
        for rec, g in tiles:
            name = tile_name(g.tile)
            cands = [gen_dir / f"{name}{ext}" for ext in (".png", ".npy")]
            found = next((p for p in cands if p.exists()), None)
            if found is None:
                log.warning("no generated image for tile %s", name)
                continue
            ref = tile_image(manifest, rec, g, seed)
            gen = load_image(found)
            ref8, gen8 = _to_uint8(ref), _to_uint8(gen)
            ss.append(ssim(ref8, gen8))
            ps.append(psnr(ref8, gen8))
            ref_feats.append(image_forward(ref, params.image, cfg.grid)[0].mean(axis=(1, 2)))
            gen_feats.append(image_forward(gen, params.image, cfg.grid)[0].mean(axis=(1, 2)))
        if not ss:
            raise DataError("no generated images matched test tiles")
        report["ssim_mean"] = float(np.mean(ss))
        pm = float(np.mean(ps))
        report["psnr_mean"] = "inf" if math.isinf(pm) else pm
        if real_features is None and len(ref_feats) >= 2:
            report["frechet"] = frechet_distance(fit_gaussian(ref_feats), fit_gaussian(gen_feats))

    if real_features is not None and generated_features is not None:
        _, ra = blob.read_blob(real_features)
        _, ga = blob.read_blob(generated_features)
        report["frechet"] = frechet_distance(fit_gaussian(ra["features"]), fit_gaussian(ga["features"]))

    if out_json is not None:
        Path(out_json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


# -- utilities ----------------------------------------------------------------------------------

def cmd_plan_batch(manifest, k: int = 128, confidence: float = 0.95, seed: int = 42) -> dict:
    counts = [rec["n_instances"] for rec in read_manifest(manifest) if rec.get("split") == "train"]
    if not counts:
        raise DataError("no train tiles with instance counts")
    b = plan_batch_size(counts, k, confidence, seed=seed)
    return {"k": k, "confidence": confidence, "batch_images": b, "feasible": b is not None, "n_images": len(counts)}


def cmd_grid_info(path) -> dict:
    data = Path(path).read_bytes()
    g = decode_grid(data)
    ids, counts = np.unique(g.ids, return_counts=True)
    top = sorted(zip(counts.tolist(), ids.tolist()), reverse=True)[:10]
    return {
        "width": g.width,
        "height": g.height,
        "bytes": len(data),
        "intern_entries": len(g.intern),
        "coverage": coverage_fraction(g),
        "n_instances": len(extract_instances(g)),
        "top_compositions": [{"id": i, "pixels": n, "sentence": render_sentence(g.intern[i])} for n, i in top],
    }
