"""Does a height prompt help? BalSAM against RSPrompter on synthetic crowns.

Both models share a frozen segmenter and an anchor prompter. BalSAM adds a
small convolutional encoder that turns the DSM into an embedding added to the
image embedding. Its last layer starts at zero, so before training BalSAM
computes exactly what RSPrompter computes; training decides how much height
to let in.

The defaults train for a few minutes on one CPU at 128 px with the mock
segmenter; the scores illustrate the training loop, not the published numbers.

    python demos/02_train_balsam_vs_rsprompter.py --epochs 15
"""
import argparse

import torch

from crownseg.prompter import build_prompt_segmenter
from crownseg.sam_adapter import SamAdapter, build_sam
from crownseg.synthetic import synthetic_sample
from crownseg.trainer import TrainConfig, evaluate_model, train

SMALL = dict(rpn_post_nms_top_n=(200, 100), roi_batch_size=64, rpn_batch_size=64, representation_size=256,
             max_mask_instances=8)
CLASSES = ["conifer", "broadleaf"]


def build(variant, seed):
    torch.manual_seed(seed)
    return build_prompt_segmenter(SamAdapter(build_sam("mock", image_size=128)), len(CLASSES), variant, **SMALL)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--tiles", type=int, default=4)
    args = ap.parse_args()
    torch.set_num_threads(1)

    data = {"train": [synthetic_sample(i, 128, 3, CLASSES) for i in range(args.tiles)],
            "val": [synthetic_sample(100 + i, 128, 3, CLASSES) for i in range(2)]}
    cfg = TrainConfig("balsam", "adamw", 3e-3, weight_decay=0.0, batch_size=2, max_epochs=args.epochs,
                      random_flip=True, seed=0)

    # Identical trainable weights, zero DSM embedding: the two start out equal.
    bal, rsp = build("balsam", 0), build("rsprompter", 0)
    rsp.load_trainable_state_dict({k: v for k, v in bal.trainable_state_dict().items()
                                   if not k.startswith("dsm_encoder.")})
    print("DSM encoder parameters:", sum(p.numel() for p in bal.dsm_encoder.parameters()))

    for name, model in (("rsprompter", rsp), ("balsam", bal)):
        def progress(step, rec, name=name):
            if step % 10 == 0:
                print(f"  {name} step {step:3d} loss {rec['loss']:.3f}")
            return False

        res = train(model, data, cfg, CLASSES, on_step=progress)
        report = evaluate_model(model, data["val"], CLASSES)
        print(f"{name}: best epoch {res.best_epoch}, val mAP {100 * report.map:.1f}, "
              f"single-class mAP {100 * report.single_class_map:.1f}, mIoU {100 * report.miou:.1f}")
        print(f"  frozen segmenter checksum {model.sam_checksum()[:12]}")


if __name__ == "__main__":
    main()
