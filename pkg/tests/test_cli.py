import json
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from pixelforge import cli
from pixelforge.align import AlignParams, TrainConfig
from pixelforge.blob import read_blob
from pixelforge.control import read_raster
from pixelforge.embed import ControlAdapterParams, adapter_forward, encode_text_toy
from pixelforge.geometry import TileSpec, pixel_to_lonlat
from pixelforge.pipeline import (
    DataError,
    UsageError,
    assign_split,
    cmd_control,
    cmd_eval,
    cmd_ingest,
    cmd_rasterize,
    cmd_train_align,
    load_checkpoint,
    read_manifest,
    resolve,
    tile_name,
    write_dataset,
)
from pixelforge.raster import read_grid
from pixelforge.synthetic import planted_dataset, synthetic_image
from pixelforge.tags import EMPTY

TILE = TileSpec(16, 32768, 32768, 100, 100)


def ring(t, u0, v0, u1, v1):
    pts = [(u0, v0), (u1, v0), (u1, v1), (u0, v1), (u0, v0)]
    return [list(pixel_to_lonlat(u, v, t)) for u, v in pts]


def polygon_feature(rings, **tags):
    return {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": rings}, "properties": tags}


def write_fc(path: Path, features):
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}))


def test_ingest_points_only_is_data_error(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    pts = [{"type": "Feature", "geometry": {"type": "Point", "coordinates": [0.001 * i, 0.001]},
            "properties": {"amenity": "bench"}} for i in range(5)]
    write_fc(src / "a.geojson", pts)
    with pytest.raises(DataError):
        cmd_ingest(src, tmp_path / "out")
    assert (tmp_path / "out" / "manifest.jsonl").read_text() == ""
    assert cli.main(["ingest", str(src), "--out", str(tmp_path / "out2")]) == 2


def test_ingest_counts_skipped_points(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    t = TileSpec(16, 32768, 32768, 16, 16)
    feats = [polygon_feature([ring(t, 2, 2, 10, 10)], building="yes")]
    feats += [{"type": "Feature", "geometry": {"type": "Point", "coordinates": [0.001, 0.001]},
               "properties": {"amenity": "bench"}}] * 3
    feats += [{"type": "Feature", "geometry": {"type": "LineString", "coordinates": [[0, 0], [0.001, 0.001]]},
               "properties": {"highway": "path"}}]
    write_fc(src / "a.geojson", feats)
    (src / "broken.geojson").write_text("{not json")
    rep = cmd_ingest(src, tmp_path / "out", tile_px=16)
    assert rep.skipped == {"Point": 3, "LineString": 1}
    assert rep.n_polygons == 1 and rep.n_tiles == 1
    assert len(rep.errors) == 1 and rep.errors[0]["file"] == "broken.geojson"


def test_polygon_spanning_two_tiles(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    t = TileSpec(16, 32768, 32768, 16, 16)
    write_fc(src / "a.geojson", [polygon_feature([ring(t, 8, 4, 24, 12)], building="house")])
    rep = cmd_ingest(src, tmp_path / "ing", tile_px=16)
    manifest = cmd_rasterize(rep.manifest_path, tmp_path / "ras", min_coverage=0.0)
    recs = read_manifest(manifest)
    assert sorted(r["tile"]["x"] for r in recs) == [32768, 32769]
    for r in recs:
        g = read_grid(resolve(manifest, r["grid_path"]))
        assert any(c.rendered == "building house" for _, comp in g.intern.items() for c in comp.atoms)


def test_ingest_idempotent(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    t = TileSpec(16, 32768, 32768, 32, 32)
    write_fc(src / "a.geojson", [polygon_feature([ring(t, 1, 1, 30, 20)], landuse="grass"),
                                 polygon_feature([ring(t, 5, 5, 40, 30)], building="yes", height="6m")])
    a = cmd_ingest(src, tmp_path / "a", tile_px=32)
    b = cmd_ingest(src, tmp_path / "b", tile_px=32)
    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    for rec in read_manifest(a.manifest_path):
        assert (tmp_path / "a" / rec["features_path"]).read_bytes() == (tmp_path / "b" / rec["features_path"]).read_bytes()
    ra = cmd_rasterize(a.manifest_path, tmp_path / "ra", min_coverage=0.0)
    rb = cmd_rasterize(b.manifest_path, tmp_path / "rb", min_coverage=0.0, threads=4)
    assert ra.read_bytes() == rb.read_bytes()


def test_ingest_prunes_rare_tags(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    t = TileSpec(16, 32768, 32768, 16, 16)
    write_fc(src / "a.geojson", [polygon_feature([ring(t, 0, 0, 16, 16)], building="yes", shop="bakery")])
    rep = cmd_ingest(src, tmp_path / "out", tile_px=16, rare_threshold=0.0)
    vocab = json.loads((tmp_path / "out" / "vocabulary.json").read_text())
    assert vocab == {"counts": {"building yes": 1, "shop bakery": 1}, "total_tiles": 1}
    assert rep.n_tiles == 1


@pytest.mark.parametrize("extra_pixels, kept", [(90, False), (100, True)])
def test_coverage_gate_boundary(tmp_path, extra_pixels, kept):
    # 69 full rows plus a partial row: 6990 px (69.9%) is dropped, 7000 px (70.0%) is kept
    src = tmp_path / "src"
    src.mkdir()
    feats = [polygon_feature([ring(TILE, 0, 0, 100, 69)], landuse="grass"),
             polygon_feature([ring(TILE, 0, 69, extra_pixels, 70)], landuse="grass")]
    write_fc(src / "a.geojson", feats)
    rep = cmd_ingest(src, tmp_path / "ing", tile_px=100)
    manifest = cmd_rasterize(rep.manifest_path, tmp_path / "ras")
    recs = [r for r in read_manifest(manifest) if r["tile"] == {"z": 16, "x": 32768, "y": 32768}]
    assert bool(recs) == kept
    if kept:
        assert recs[0]["coverage"] == 0.70


def test_split_band_and_blocks():
    rng = np.random.default_rng(0)
    tiles = [TileSpec(16, int(x), int(y)) for x, y in rng.integers(0, 1 << 16, size=(2000, 2))]
    counts = Counter(assign_split(t) for t in tiles)
    for split, target in (("train", 0.6), ("val", 0.2), ("test", 0.2)):
        assert abs(counts[split] / len(tiles) - target) <= 0.05
    base = TileSpec(16, 400, 800)
    same_block = {assign_split(TileSpec(16, 400 + dx, 800 + dy)) for dx in range(4) for dy in range(4)}
    assert same_block == {assign_split(base)}


def test_rasterize_matches_in_memory_grids(tmp_path):
    grids = planted_dataset(n_tiles=8)
    manifest = write_dataset(grids, tmp_path)
    for g, rec in zip(grids, read_manifest(manifest)):
        back = read_grid(resolve(manifest, rec["grid_path"]), g.tile)
        assert np.array_equal(back.ids == 0, g.ids == 0)
        assert all(back.composition_at(i, j) == g.composition_at(i, j) for i in range(0, 64, 7) for j in range(0, 64, 5))


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    return write_dataset(planted_dataset(n_compositions=8, n_tiles=24), tmp_path_factory.mktemp("small"))


def test_train_deterministic(small_manifest, tmp_path):
    cfg = TrainConfig(grid_h=16, grid_w=16, max_steps=25, lr=1e-2)
    _, a = cmd_train_align(small_manifest, tmp_path / "a", cfg)
    _, b = cmd_train_align(small_manifest, tmp_path / "b", cfg)
    assert a == b and a[-1] == b[-1]
    assert (tmp_path / "a" / "checkpoint.pxfb").read_bytes() == (tmp_path / "b" / "checkpoint.pxfb").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_text().count("\n") == 26


def test_train_zero_steps_is_init(small_manifest, tmp_path):
    cfg = TrainConfig(grid_h=16, grid_w=16, max_steps=0)
    params, losses = cmd_train_align(small_manifest, tmp_path, cfg)
    init = AlignParams.init(cfg.d, cfg.v_hash, 3, cfg.seed)
    loaded, _ = load_checkpoint(tmp_path / "checkpoint.pxfb")
    assert losses == []
    assert np.array_equal(params.flatten(), init.flatten())
    assert np.array_equal(loaded.text.weight, init.text.weight.astype(np.float32).astype(np.float64))


def test_train_empty_split_errors(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    with pytest.raises(DataError):
        cmd_train_align(tmp_path / "manifest.jsonl", tmp_path / "o", TrainConfig(max_steps=1))


def test_planted_final_loss_below_quarter_log_k(planted_run):
    # at most 32 distinct compositions can appear in one contrastive batch
    assert planted_run["losses"][-1] < math.log(32) / 4


@pytest.fixture(scope="module")
def checkpoint(small_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    cmd_train_align(small_manifest, out, TrainConfig(grid_h=16, grid_w=16, max_steps=5))
    return out / "checkpoint.pxfb"


def test_control_full_retention_matches_unmasked(small_manifest, checkpoint, tmp_path):
    a = cmd_control(small_manifest, checkpoint, tmp_path / "none")
    b = cmd_control(small_manifest, checkpoint, tmp_path / "one", mask_retained=1.0)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    c = cmd_control(small_manifest, checkpoint, tmp_path / "half1", mask_retained=0.5, seed=3)
    d = cmd_control(small_manifest, checkpoint, tmp_path / "half2", mask_retained=0.5, seed=3)
    assert [p.read_bytes() for p in c] == [p.read_bytes() for p in d]
    assert [p.read_bytes() for p in c] != [p.read_bytes() for p in a]


def test_control_zero_retention_is_empty_color(small_manifest, checkpoint, tmp_path):
    paths = cmd_control(small_manifest, checkpoint, tmp_path, mask_retained=0.0)
    params, _ = load_checkpoint(checkpoint)
    _, arrays = read_blob(tmp_path / "adapter.pxfb")
    adapter = ControlAdapterParams(arrays["weight"], arrays["bias"])
    empty = adapter_forward(encode_text_toy(EMPTY, params.text)[:, None, None], adapter)[:, 0, 0]
    for p in paths:
        s = read_raster(p)
        assert s.shape == (3, 64, 64)
        assert np.all(s == empty.astype(np.float32)[:, None, None])


def test_control_schedule_step_and_cache_env(small_manifest, checkpoint, tmp_path, monkeypatch):
    monkeypatch.setenv("PIXELFORGE_CACHE", str(tmp_path / "cache"))
    a = cmd_control(small_manifest, checkpoint, tmp_path / "a", schedule_step=(50, 100))
    b = cmd_control(small_manifest, checkpoint, tmp_path / "b", mask_retained=0.65)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert len(list((tmp_path / "cache").glob("text-*.pxfb"))) == 1
    with pytest.raises(UsageError):
        cmd_control(small_manifest, checkpoint, tmp_path / "c", mask_retained=0.5, schedule_step=(1, 2))


def test_control_preview_pngs(small_manifest, checkpoint, tmp_path):
    paths = cmd_control(small_manifest, checkpoint, tmp_path, preview=True)
    assert all(p.with_suffix(".png").exists() for p in paths)


def test_eval_image_suite_identical(small_manifest, checkpoint, tmp_path):
    gen = tmp_path / "gen"
    gen.mkdir()
    for rec in read_manifest(small_manifest):
        if rec["split"] == "test":
            g = read_grid(resolve(small_manifest, rec["grid_path"]))
            t = TileSpec(rec["tile"]["z"], rec["tile"]["x"], rec["tile"]["y"], 64, 64)
            g.tile = t
            np.save(gen / f"{tile_name(t)}.npy", synthetic_image(g, seed=42))
    report = cmd_eval(small_manifest, checkpoint, ["image"], generated_dir=gen, out_json=tmp_path / "m.json")
    assert report["ssim_mean"] == 1.0 and report["psnr_mean"] == "inf"
    assert abs(report["frechet"]) <= 1e-9
    assert json.loads((tmp_path / "m.json").read_text())["ssim_mean"] == 1.0


def test_eval_empty_suite_is_usage_error(small_manifest, checkpoint):
    with pytest.raises(UsageError):
        cmd_eval(small_manifest, checkpoint, [])
    assert cli.main(["eval", str(small_manifest), "--checkpoint", str(checkpoint)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(small_manifest, checkpoint, tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["control", str(small_manifest), "--checkpoint", str(checkpoint), "--out", str(tmp_path / "c"),
                     "--mask-retained", "1.5"]) == 1
    assert cli.main(["grid-info", str(tmp_path / "missing.pxfg")]) == 2
    (tmp_path / "bad.pxfg").write_bytes(b"JUNKJUNK")
    assert cli.main(["grid-info", str(tmp_path / "bad.pxfg")]) == 2
    cfg = tmp_path / "explode.cfg"
    cfg.write_text("lr = 1e308\nmax_steps = 3\ngrid_h = 16\ngrid_w = 16\northogonal = false\n")
    assert cli.main(["train-align", str(small_manifest), "--out", str(tmp_path / "t"), "--config", str(cfg)]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_global_options_before_subcommand(small_manifest, tmp_path):
    cfg = tmp_path / "explode.cfg"
    cfg.write_text("lr = 1e308\nmax_steps = 3\ngrid_h = 16\ngrid_w = 16\northogonal = false\n")
    assert cli.main(["--config", str(cfg), "train-align", str(small_manifest), "--out", str(tmp_path / "t")]) == 3
    args = cli.build_parser().parse_args(["--seed", "7", "--threads", "3", "grid-info", "x.pxfg"])
    assert (args.seed, args.threads) == (7, 3)


def test_cli_end_to_end(small_manifest, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["--seed", "42", "train-align", str(small_manifest), "--out", str(out), "--max-steps", "3"]) == 0
    ckpt = str(out / "checkpoint.pxfb")
    assert cli.main(["eval", str(small_manifest), "--checkpoint", ckpt, "--suite", "retrieval,tags"]) == 0
    assert cli.main(["control", str(small_manifest), "--checkpoint", ckpt, "--out", str(tmp_path / "ctl"),
                     "--schedule-step", "10/20"]) == 0
    assert cli.main(["plan-batch", str(small_manifest), "--k", "16"]) == 0
    rec = read_manifest(small_manifest)[0]
    assert cli.main(["grid-info", str(resolve(small_manifest, rec["grid_path"]))]) == 0
    capsys.readouterr()
    assert cli.main(["eval", str(small_manifest), "--checkpoint", ckpt, "--suite", "tags"]) == 0
    assert set(json.loads(capsys.readouterr().out)) >= {"parent_acc", "child_acc", "mixed_f1"}
