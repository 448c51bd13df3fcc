"""End-to-end desk run: generate a separable synthetic dataset, train the
full model, and print the metric report plus a sample prediction.

    python demos/02_train_and_evaluate.py          # ~2 minutes on a laptop
    python demos/02_train_and_evaluate.py --fast   # smaller, ~30 seconds
"""

import sys
import time

import vtground as vg
from vtground.pipeline import predict_dataset


def main(fast: bool = False):
    n_pairs, epochs = (60, 12) if fast else (250, 40)
    spec = vg.SynthSpec(seed=11, n_pairs=n_pairs, n_clips=32, d_feat=64,
                        noise_in=0.05, noise_out=0.5)
    records = vg.generate_synthetic(spec)
    split = int(n_pairs * 0.8)
    train_recs, eval_recs = records[:split], records[split:]
    print(f"dataset: {len(train_recs)} train / {len(eval_recs)} eval pairs, "
          f"{spec.n_clips} clips each")

    cfg = vg.desk_config()
    tc = vg.TrainConfig(epochs=epochs, batch_size=16, lr=2e-3, eval_interval=10)
    t0 = time.perf_counter()
    state = vg.train(train_recs, cfg, train_cfg=tc, seed=0, eval_records=eval_recs,
                     log=lambda e: print(f"  epoch {e['epoch']:3d}  loss {e['loss']:.3f}"))
    print(f"trained in {time.perf_counter() - t0:.0f}s")

    report = vg.evaluate_dataset(state.model, eval_recs)
    print("\nmetric report on the eval split:")
    print(f"  R1@0.3 / 0.5 / 0.7 : {report.r1[0.3]:.3f} / {report.r1[0.5]:.3f} / {report.r1[0.7]:.3f}")
    print(f"  mAP@0.5 / 0.75     : {report.map_at[0.5]:.3f} / {report.map_at[0.75]:.3f}")
    print(f"  avg mAP (0.5:0.95) : {report.map_avg:.3f}")
    print(f"  mean IoU           : {report.miou:.3f}")
    print(f"  HD mAP / HIT@1     : {report.hd_map:.3f} / {report.hit1:.3f}")

    rec, pred, _ = predict_dataset(state.model, eval_recs[:1])[0]
    gt = rec.gt.spans[0]
    top, conf = pred.spans[0]
    print("\nsample query:")
    print(f"  ground truth  center={gt.center:.3f} width={gt.width:.3f}")
    print(f"  top prediction center={top.center:.3f} width={top.width:.3f} "
          f"(confidence {conf:.2f})")


if __name__ == "__main__":
    main(fast="--fast" in sys.argv)
