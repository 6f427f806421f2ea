"""PCK curves for 2D keypoint error and 3D end-effector error.

Detects a keypoint set on a test split, estimates each frame's camera pose,
and summarizes both error distributions as PCK curves and their AUC.

    python demos/06_evaluation_metrics.py
"""

import numpy as np

from kpopt.datagen import generate_dataset
from kpopt.detector import fit_detector
from kpopt.geometry import RigidTransform
from kpopt.kinematics import end_effector_position
from kpopt.metrics import PCK_GRID_2D, PCK_GRID_3D, ee_3d_error, pck
from kpopt.optimizer import evaluate_performance
from kpopt.scenario import data_path, load_scenario

sc = load_scenario(data_path("tool_scenario.json"))
ds = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 100, 200, 2)
kset = (0, 5, 9, 14, 19, 24, 30)
ev = evaluate_performance(kset, fit_detector(sc.profile, kset, ds), ds, 50.0, np.random.default_rng(0))

arr = ds.arrays(ds.test_ids)
cols = [ds.index_of[k] for k in kset]
err_2d = np.linalg.norm(ev.detections.uv - arr.pixels[:, cols], axis=2)[ev.detections.detected]
err_3d = []
for row in np.flatnonzero(ev.pnp_ok):
    s = ds.sample(ds.test_ids[row])
    ee = end_effector_position(ds.chain, s.q)
    err_3d.append(1000 * ee_3d_error(RigidTransform.from_rt(ev.R[row], ev.t[row]), ee, s.T_cb.apply(ee)))

c2 = pck(err_2d, PCK_GRID_2D)
print(f"2D keypoint PCK: AUC {c2.auc:.3f};  within 5 px {c2.values[5]:.0%}, within 10 px {c2.values[10]:.0%}")
c3 = pck(err_3d, PCK_GRID_3D)
print(f"3D end-effector PCK: AUC {c3.auc:.3f};  within 20 mm {c3.values[5]:.0%}")
print(f"pose estimated on {ev.pnp_ok.sum()}/{len(ev.pnp_ok)} frames")
