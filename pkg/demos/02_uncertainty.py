"""Train the uncertainty network on the toy scene and probe what it learned.

The network scores a candidate camera pose *before* anything is rendered
there, from how consistently the nearby reference views agree once warped
to the candidate. This demo trains the toy-sized network, then walks a
candidate pose away from a known reference and prints the predicted scalar
uncertainty at each step — it should generally grow with distance.

Run:  python3 demos/02_uncertainty.py      (~2 minutes on CPU)
"""

import numpy as np

from vpraug.backbone import Backbone
from vpraug.geometry import Pose
from vpraug.pipeline import CachingImageLoader, run_pipeline, split_real
from vpraug.toy import (TOY_TAU_POS, make_toy_store, toy_backbone_config,
                        toy_ue_config)
from vpraug.training import OptimizerConfig, TrainConfig, train_ue
from vpraug.ue_net import UENet, build_reference_set, predict


def main():
    store, _ = make_toy_store("demo_out/toy_ue", seed=0, n_places=12,
                              ring_radius=4.0)
    loader = CachingImageLoader()

    print("pretraining the retrieval backbone (a few epochs)...")
    pre_cfg = TrainConfig(vpr=OptimizerConfig(lr=1e-3, lr_decay=0.99,
                                              weight_decay=1e-3, batch_size=8),
                          patience=15, seed=0, max_epochs=12)
    outcome = run_pipeline(store, toy_backbone_config(), pre_cfg,
                           organization="regular", tau_pos=TOY_TAU_POS,
                           image_loader=loader)
    backbone = Backbone(outcome.net)

    print("training the uncertainty network (self-supervised)...")
    train_real, val_real, _ = split_real(store)
    ue = UENet(toy_ue_config(), seed=0)
    ue_cfg = TrainConfig(ue=OptimizerConfig(lr=1e-3, lr_decay=0.999,
                                            weight_decay=1e-3),
                         patience=300, seed=0, ue_epochs=300)
    _, _, history = train_ue(backbone, ue, train_real, val_real, ue_cfg,
                             image_loader=loader)
    print(f"trained {len(history)} epochs; final val NLL {history[-1]:.2f}")

    # walk candidate poses away from known references and watch the score;
    # directions are horizontal, the dominant translation mode of a traversal
    rng = np.random.default_rng(0)
    anchors = [r for r in val_real if "solo" not in r.id][:8]
    ref_sets = [build_reference_set(a.pose, train_real,
                                    ue.config.n_references, backbone,
                                    image_loader=loader) for a in anchors]
    print("\n  distance from nearest reference -> scalar uncertainty "
          f"(mean over {len(anchors)} anchors x 4 directions)")
    for radius in (0.0, 0.5, 1.0, 1.5):
        scores = []
        for refs in ref_sets:
            base = refs.poses[0]
            for _ in range(4):
                d = rng.normal(size=3)
                d[2] = 0.0
                d /= np.linalg.norm(d)
                pose = Pose(base.rotation, base.translation + radius * d)
                scores.append(predict(ue, pose, refs).scalar_uncertainty)
        print(f"  r = {radius:4.2f}  ->  {np.mean(scores):8.4f}")


if __name__ == "__main__":
    main()
