"""Recovering the camera pose from 2D-3D keypoint correspondences.

Solves the same problem at increasing pixel noise, first with EPnP alone and
then with Levenberg-Marquardt refinement, and reports the pose error.

    python demos/02_pose_from_keypoints.py
"""

import numpy as np

from kpopt.geometry import CameraModel, RigidTransform, axis_angle_to_matrix, matrix_to_axis_angle, project_points
from kpopt.pnp import epnp, refine_pose

cam = CameraModel(800.0, 800.0, 320.0, 240.0, 640, 480)
rng = np.random.default_rng(1)
T_true = RigidTransform.from_rt(axis_angle_to_matrix([0.3, -0.5, 0.2]), [0.05, -0.02, 1.5])
X = rng.uniform(-0.2, 0.2, (8, 3))
uv_clean, _ = project_points(cam, T_true.apply(X))


def pose_error(T):
    rot = np.linalg.norm(matrix_to_axis_angle(T.rotation.T @ T_true.rotation))
    return np.degrees(rot), 1000 * np.linalg.norm(T.b - T_true.b)


print("noise px   EPnP rot deg / trans mm   refined rot deg / trans mm   rmse px")
for noise in (0.0, 0.5, 1.0, 2.0, 5.0):
    uv = uv_clean + rng.normal(0, noise, uv_clean.shape)
    first = epnp((uv, X), cam)
    final = refine_pose(first, (uv, X), cam)
    (r0, t0), (r1, t1) = pose_error(first.T), pose_error(final.T)
    print(f"{noise:8.1f}   {r0:9.4f} / {t0:8.3f}       {r1:9.4f} / {t1:8.3f}            {final.reprojection_rmse:.3f}")
