"""Component study on a shoestring: train the fusion-only baseline and the
full model side by side, then run the correspondence-alignment analysis that
relates per-query retrieval quality to how well the learned correspondence
tracks ground-truth saliency.

    python demos/03_components_and_analysis.py     # a few minutes
"""

import numpy as np

import vtground as vg
from vtground.evalkit import correspondence_alignment_analysis
from vtground.pipeline import predict_dataset


def train_row(row, records, split, epochs=25, seed=0):
    cfg = vg.ablation_config(row, vg.desk_config())
    tc = vg.TrainConfig(epochs=epochs, batch_size=16, lr=2e-3)
    state = vg.train(records[:split], cfg, train_cfg=tc, seed=seed)
    report = vg.evaluate_dataset(state.model, records[split:])
    return state, report


def main():
    spec = vg.SynthSpec(seed=11, n_pairs=120, n_clips=32, d_feat=64,
                        noise_in=0.05, noise_out=0.5)
    records = vg.generate_synthetic(spec)
    split = 96

    print("training row (a): self-attention fusion baseline ...")
    _, report_a = train_row("a", records, split)
    print("training row (g): full model ...")
    state_g, report_g = train_row("g", records, split)

    print("\n           R1@0.5   avg mAP   HD mAP")
    print(f"  row (a)  {report_a.r1[0.5]:6.3f}   {report_a.map_avg:7.3f}   {report_a.hd_map:6.3f}")
    print(f"  row (g)  {report_g.r1[0.5]:6.3f}   {report_g.map_avg:7.3f}   {report_g.hd_map:6.3f}")

    # alignment analysis: cosine(correspondence, GT saliency) per eval query,
    # binned against that query's threshold-averaged mAP
    triples = predict_dataset(state_g.model, records[split:])
    analysis = correspondence_alignment_analysis(
        [corr for _, _, corr in triples],
        [rec.gt.saliency for rec, _, _ in triples],
        [q["avg_map"] for q in report_g.per_query],
    )
    print("\ncorrespondence-alignment bins (full model):")
    print("  cosine range        count   mean avg-mAP")
    for b in analysis.occupied():
        print(f"  [{b.low:+.3f}, {b.high:+.3f}]   {b.count:4d}   {b.mean_map:8.3f}")
    occupied = analysis.occupied()
    if len(occupied) > 1:
        print("\nqueries whose correspondence best matches saliency retrieve best:"
              f" top bin {occupied[-1].mean_map:.3f} vs bottom bin {occupied[0].mean_map:.3f}")


if __name__ == "__main__":
    main()
