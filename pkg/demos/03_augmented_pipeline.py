"""Regular training vs the uncertainty-guided augmentation pipeline.

The toy dataset deliberately leaves a viewpoint gap: training views span a
narrow yaw range while test views sit well outside it. Regular triplet
training cannot close that gap; the augmentation loop detects retrieval
failures, samples candidate poses around them, scores the candidates with
the uncertainty network, renders the most uncertain ones, and inserts the
renders into the database — organized with all real images as queries and
synthetic views as the database.

Run:  python3 demos/03_augmented_pipeline.py      (~3 minutes on CPU)
"""

from vpraug.augment import AugmentConfig
from vpraug.backbone import Backbone
from vpraug.pipeline import CachingImageLoader, run_pipeline, split_real
from vpraug.renderer import render_oracle
from vpraug.toy import (TOY_TAU_POS, make_toy_store, toy_backbone_config,
                        toy_ue_config)
from vpraug.training import OptimizerConfig, TrainConfig, train_ue
from vpraug.ue_net import UENet

DATASET = dict(n_places=12, ring_radius=4.0, val_yaws=(25.0,),
               test_yaws=(35.0, 45.0), val_revisits=0, val_offsets=0)


def vpr_cfg(seed):
    return TrainConfig(vpr=OptimizerConfig(lr=1e-3, lr_decay=0.99,
                                           weight_decay=1e-3, batch_size=8),
                       patience=30, seed=seed, max_epochs=25)


def main():
    loader = CachingImageLoader()
    store, scene = make_toy_store("demo_out/toy_pipe", seed=0, **DATASET)

    print("pretraining a backbone to bootstrap the uncertainty network...")
    pre = run_pipeline(store, toy_backbone_config(), vpr_cfg(0),
                       organization="regular", tau_pos=TOY_TAU_POS,
                       image_loader=loader)
    train_real, val_real, _ = split_real(store)
    ue = UENet(toy_ue_config(), seed=0)
    ue_cfg = TrainConfig(ue=OptimizerConfig(lr=1e-3, lr_decay=0.999,
                                            weight_decay=1e-3),
                         patience=300, seed=0, ue_epochs=300)
    train_ue(Backbone(pre.net), ue, train_real, val_real, ue_cfg,
             image_loader=loader)

    def renderer(request):
        return render_oracle(request, scene, seed=0, noise_level=0.0)

    rows = []
    for label, use_aug, use_ue in (("regular", False, False),
                                   ("augmented (random pick)", True, False),
                                   ("augmented (UE-guided)", True, True)):
        run_store, _ = make_toy_store(f"demo_out/toy_pipe_{len(rows)}",
                                      seed=0, **DATASET)
        kw = {}
        if use_aug:
            kw = dict(augment_config=AugmentConfig(
                          m_candidates=20, k_selected=3, n_references=5,
                          rotation_max_deg=30.0, use_ue=use_ue),
                      ue_net=ue if use_ue else None, renderer=renderer,
                      organization="real_query_synth_db")
        print(f"running: {label} ...")
        out = run_pipeline(run_store, toy_backbone_config(), vpr_cfg(0),
                           tau_pos=TOY_TAU_POS, image_loader=loader, **kw)
        rendered = sum(s["rendered"] for s in out.epoch_summaries)
        rows.append((label, out.test_report.recall_at[1], rendered))

    print("\n  condition                  test R@1   synthetic views rendered")
    for label, r1, rendered in rows:
        print(f"  {label:26s} {r1:8.3f}   {rendered}")


if __name__ == "__main__":
    main()
