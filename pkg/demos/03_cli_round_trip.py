"""The command line end to end: tile, train, predict, evaluate, compare.

Everything goes through files, so each step can be rerun in isolation. The
script writes a synthetic orthomosaic and crown GeoJSON into a work
directory and then drives ``crownseg`` exactly as a shell user would.

    python demos/03_cli_round_trip.py --work /tmp/crownseg_demo
    crownseg eval --gt /tmp/crownseg_demo/tiles/train.json \
        --results /tmp/crownseg_demo/balsam/results.json --iou-mode 0.5
"""
import argparse
from pathlib import Path

from crownseg.cli import main as crownseg
from crownseg.geodata import write_features, write_orthomosaic
from crownseg.synthetic import SiteSpec, synthetic_site

CONFIG = """\
train_data: {train}
model_kind: balsam
image_size: 128
optimizer: adamw
base_lr: 0.003
weight_decay: 0.0
warmup.kind: none
schedule: none
batch_size: 3
max_epochs: {epochs}
random_flip: false
rpn_post_nms_top_n: [200, 100]
roi_batch_size: 64
rpn_batch_size: 64
representation_size: 256
max_mask_instances: 8
"""


def run(*argv):
    print("$ crownseg", " ".join(argv))
    code = crownseg(list(argv))
    if code:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="crownseg_demo")
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)

    raster, crowns, aoi = synthetic_site(1, SiteSpec(size=256, n_crowns=10, radius=(10, 18)))
    write_orthomosaic(work / "ortho.tif", raster)
    write_features(work / "crowns.geojson", [(c.polygon, {"Label": c.class_label}) for c in crowns])
    write_features(work / "aoi.geojson", [(aoi.polygons, {})])

    run("tile", "--raster", str(work / "ortho.tif"), "--annotations", str(work / "crowns.geojson"),
        "--aoi", str(work / "aoi.geojson"), "--tile-size", "128", "--out", str(work / "tiles"))
    run("prompts", "preview", "--data", str(work / "tiles" / "train.json"), "--min-distance", "10",
        "--out", str(work / "preview"))

    train_json = (work / "tiles" / "train.json").resolve()
    results = []
    for kind in ("rsprompter", "balsam"):
        cfg = work / f"{kind}.yaml"
        cfg.write_text(CONFIG.format(train=train_json, epochs=args.epochs).replace("balsam", kind))
        run("train", "--config", str(cfg), "--seed", "0", "--out", str(work / kind / "train"))
        run("predict", "--checkpoint", str(work / kind / "train" / "best.pt"), "--data", str(train_json),
            "--overlays", "--out", str(work / kind))
        run("eval", "--gt", str(train_json), "--results", str(work / kind / "results.json"),
            "--out", str(work / kind))
        results.append(str(work / kind / "results.json"))

    # Ground truth in the first column, then one column per method.
    run("panel", "--gt", str(train_json), "--results", *results, "--names", "RSPrompter", "BalSAM",
        "--out", str(work / "panel"))
    print("outputs under", work.resolve())


if __name__ == "__main__":
    main()
