"""From an orthomosaic to scored DSM-prompted masks.

A synthetic site stands in for a drone survey: an RGB+DSM raster with
crowns annotated in world coordinates. We tile it, clip the crowns into each
tile, find tree tops as DSM local maxima and prompt a segmenter with them.
The segmenter here is the small mock SAM so the script runs in seconds on a
laptop; pass ``--sam vit_h --checkpoint sam_vit_h_4b8939.pth`` for the real
model (and a larger ``--size``; SAM works on 1024 px tiles).

    python demos/01_tiles_and_dsm_prompts.py
"""
import argparse

import numpy as np

from crownseg.dsmtools import DsmChannel, PeakConfig, peak_prompts
from crownseg.geodata import clip_annotations_to_tile, filter_tiles, tile_orthomosaic
from crownseg.metrics import evaluate
from crownseg.sam_adapter import SamAdapter, build_sam, run_sam_automatic, run_sam_dsm_prompts
from crownseg.structures import GroundTruth
from crownseg.synthetic import SiteSpec, synthetic_site


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128, help="tile size in pixels")
    ap.add_argument("--sam", default="mock")
    ap.add_argument("--checkpoint")
    args = ap.parse_args()

    raster, crowns, aoi = synthetic_site(0, SiteSpec(size=2 * args.size, n_crowns=14, radius=(8, 16)))
    print(f"raster {raster.width}x{raster.height}, {len(crowns)} crowns, bands={raster.bands.shape[-1]}")

    # 50% overlap: a 2S x 2S raster gives a 3 x 3 grid of S-pixel tiles
    tiles = tile_orthomosaic(raster, aoi, tile_size=args.size, overlap=0.5, annotations=crowns)
    tiles = filter_tiles([clip_annotations_to_tile(t) for t in tiles])
    print(f"{len(tiles)} tiles kept after clipping; origins {[t.origin for t in tiles]}")

    # Tree tops: local maxima at least 10 px apart, scale-free in the DSM units.
    t = tiles[len(tiles) // 2]
    dsm = DsmChannel.from_tile(t.dsm, t.image)
    peaks = peak_prompts(dsm, PeakConfig(min_distance=10))
    print(f"tile {t.tile_id}: {len(t.annotations)} crowns, {len(peaks)} DSM peaks")

    if args.sam == "mock":
        adapter = SamAdapter(build_sam("mock", image_size=args.size))
    else:
        adapter = SamAdapter(build_sam(args.sam, checkpoint=args.checkpoint))

    gt, auto, prompted = {}, {}, {}
    for t in tiles:
        gt[t.tile_id] = [GroundTruth(m, "tree") for m in t.masks()]
        auto[t.tile_id] = run_sam_automatic(adapter, t.image, pps=8)
        prompted[t.tile_id] = run_sam_dsm_prompts(adapter, t.image, t.dsm, PeakConfig(10))

    # With the untrained mock the numbers only show the plumbing; a real
    # checkpoint gives meaningful masks.
    for name, preds in (("SAM automatic", auto), ("SAM + DSM peaks", prompted)):
        r = evaluate(preds, gt)
        n = sum(len(v) for v in preds.values())
        print(f"{name:16s} {n:4d} masks  single-class mAP {100 * r.single_class_map:5.1f}  mIoU {100 * r.miou:5.1f}")
    print("mean peaks per tile:", np.mean([len(peak_prompts(DsmChannel.from_tile(t.dsm, t.image), PeakConfig(10)))
                                           for t in tiles]))


if __name__ == "__main__":
    main()
