"""Forward kinematics, keypoint placement and projection for the surgical tool.

Loads the shipped tool description, poses it at a random joint configuration,
and prints where a few keypoints land in the base frame and in the image.

    python demos/01_kinematics_and_cameras.py
"""

import numpy as np

from kpopt.geometry import CameraModel, look_at, matrix_to_axis_angle, project_points
from kpopt.kinematics import end_effector_position, forward_kinematics, keypoint_positions, load_robot
from kpopt.scenario import data_path

chain, keypoints = load_robot(data_path("tool.json"))
print(f"{chain.name}: {chain.n_links} links, {chain.n_joints} joints, {len(keypoints)} candidate keypoints")

rng = np.random.default_rng(0)
q = rng.uniform(chain.lower_limits, chain.upper_limits)
fk = forward_kinematics(chain, q)
for n, link in enumerate(chain.links):
    angle = np.linalg.norm(matrix_to_axis_angle(fk[n, :3, :3]))
    print(f"  {link.name:<16} origin {np.round(fk[n, :3, 3], 4)}  rotated {np.degrees(angle):6.1f} deg")

# a camera 10 cm away looking at the wrist
cam = CameraModel(500.0, 500.0, 319.5, 239.5, 640, 480)
T_cb = look_at(eye=[0.09, 0.03, 0.16], target=[0.0, 0.0, 0.135])
pts = keypoint_positions(chain, q, keypoints, fk=fk)
uv, in_front = project_points(cam, T_cb.apply(pts))
print("\nkeypoint  group             base position (m)            pixel")
for kp, p, px, ok in zip(keypoints[::4], pts[::4], uv[::4], in_front[::4]):
    print(f"  {kp.id:>3}    {kp.group:<16} {np.round(p, 4)!s:<28} {np.round(px, 1) if ok else 'behind camera'}")
print(f"\nend effector in the camera frame: {np.round(T_cb.apply(end_effector_position(chain, q, fk=fk)), 4)} m")
