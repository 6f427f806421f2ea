"""Regenerate the robot descriptions under ``src/kpopt/data``.

Keypoints are placed just outside the link capsules so that a keypoint is
hidden only when some surface lies between it and the camera.

    python tools/make_fixtures.py
"""

import json
import math
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "kpopt" / "data"


def link(name, parent, joint=None, axis=(0, 0, 1), limits=(0, 0), translation=(0, 0, 0), capsules=()):
    entry = {"name": name, "parent": parent, "transform": {"quaternion": [1, 0, 0, 0], "translation": list(translation)},
             "capsules": [{"a": list(a), "b": list(b), "radius": r} for a, b, r in capsules]}
    entry["joint"] = {"type": joint or "fixed", "axis": list(axis), "limits": list(limits)}
    return entry


def ring(radius, z, angles_deg):
    return [[round(radius * math.cos(math.radians(a)), 6), round(radius * math.sin(math.radians(a)), 6), z]
            for a in angles_deg]


def planar():
    return {"name": "planar_2link", "links": [
        link("base", -1),
        link("link1", 0, "revolute", (0, 0, 1), (-math.pi, math.pi)),
        link("link2", 1, "revolute", (0, 0, 1), (-math.pi, math.pi), (1, 0, 0)),
        link("tip", 2, translation=(1, 0, 0)),
    ], "end_effector": {"link": "tip", "offset": [0, 0, 0]},
        "keypoints": [{"id": 0, "link": "link2", "offset": [0.5, 0, 0], "group": "link2"},
                      {"id": 1, "link": "tip", "offset": [0, 0, 0], "group": "tip"}]}


def arm7():
    joints = [  # name, axis, limits, offset from parent, capsule length, radius
        ("j1", (0, 0, 1), (-1.5, 1.5), (0, 0, 0.15), 0.15, 0.06),
        ("j2", (0, 1, 0), (-1.0, 1.0), (0, 0, 0.15), 0.30, 0.05),
        ("j3", (0, 0, 1), (-1.5, 1.5), (0, 0, 0.30), 0.10, 0.045),
        ("j4", (0, 1, 0), (0.0, 2.0), (0, 0, 0.10), 0.28, 0.04),
        ("j5", (0, 0, 1), (-1.5, 1.5), (0, 0, 0.28), 0.08, 0.035),
        ("j6", (0, 1, 0), (-1.5, 1.5), (0, 0, 0.08), 0.15, 0.03),
        ("j7", (0, 0, 1), (-2.0, 2.0), (0, 0, 0.15), 0.08, 0.03),
    ]
    links = [link("base", -1, capsules=[((0, 0, 0), (0, 0, 0.15), 0.08)])]
    keypoints = []
    for n, (name, axis, lim, off, length, r) in enumerate(joints, 1):
        links.append(link(name, n - 1, "revolute", axis, lim, off, [((0, 0, 0), (0, 0, length), r)]))
        # three keypoints per link, spread in height and around the circumference
        for j, (frac, ang) in enumerate(((0.25, 0), (0.5, 120), (0.75, 240))):
            keypoints.append({"id": 3 * (n - 1) + j, "link": name, "group": name,
                              "offset": ring(r + 0.002, round(frac * length, 6), [ang + 30 * n])[0]})
    return {"name": "arm7", "links": links, "end_effector": {"link": "j7", "offset": [0, 0, 0.1]},
            "keypoints": keypoints}


def tool():
    shaft_r, wrist_r, jaw_r = 0.004, 0.003, 0.0012
    links = [
        link("base", -1),
        link("yaw", 0, "revolute", (0, 0, 1), (-0.25, 0.25)),
        link("pitch", 1, "revolute", (0, 1, 0), (-0.25, 0.25)),
        # frame sits at the distal end of the shaft; the insertion depth moves it along z
        link("insertion", 2, "prismatic", (0, 0, 1), (0.10, 0.16), capsules=[((0, 0, -0.12), (0, 0, 0), shaft_r)]),
        link("roll", 3, "revolute", (0, 0, 1), (-1.5, 1.5), capsules=[((0, 0, 0), (0, 0, 0.004), shaft_r)]),
        link("wrist_pitch", 4, "revolute", (1, 0, 0), (-1.0, 1.0), (0, 0, 0.008),
             capsules=[((0, 0, 0), (0, 0, 0.006), wrist_r)]),
        link("wrist_yaw", 5, "revolute", (0, 1, 0), (-1.0, 1.0), (0, 0, 0.008),
             capsules=[((0, 0, 0), (0, 0, 0.003), wrist_r)]),
        link("jaw_left", 6, "revolute", (0, 1, 0), (0.0, 0.6), (0, 0, 0.004),
             capsules=[((0.0009, 0, 0), (0.0009, 0, 0.010), jaw_r)]),
        link("jaw_right", 6, "revolute", (0, -1, 0), (0.0, 0.6), (0, 0, 0.004),
             capsules=[((-0.0009, 0, 0), (-0.0009, 0, 0.010), jaw_r)]),
    ]
    m = 2e-4  # keypoints sit this far outside the surface
    groups = [
        ("shaft_proximal", "insertion", ring(shaft_r + m, -0.03, [0, 72, 144, 216, 288])),
        ("shaft_distal", "insertion", ring(shaft_r + m, -0.012, [45, 135, 225, 315])),
        ("roll", "roll", ring(shaft_r + m, 0.002, [0, 72, 144, 216, 288])),
        ("wrist_pitch", "wrist_pitch", ring(wrist_r + m, 0.003, [0, 72, 144, 216, 288])),
        ("wrist_yaw", "wrist_yaw", ring(wrist_r + m, 0.0015, [36, 108, 180, 252, 324])),
        ("jaw_left", "jaw_left", [[0.0009, s * (jaw_r + m), z] for s, z in ((1, 0.004), (-1, 0.004), (1, 0.008), (-1, 0.008))]),
        ("jaw_right", "jaw_right", [[-0.0009, s * (jaw_r + m), z] for s, z in ((1, 0.004), (-1, 0.004), (1, 0.008), (-1, 0.008))]),
    ]
    keypoints = []
    for group, link_name, offsets in groups:
        for off in offsets:
            keypoints.append({"id": len(keypoints), "link": link_name, "group": group, "offset": off})
    return {"name": "tool", "links": links, "end_effector": {"link": "wrist_yaw", "offset": [0, 0, 0.014]},
            "keypoints": keypoints}


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    for name, doc in (("planar_2link", planar()), ("arm7", arm7()), ("tool", tool())):
        (DATA / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print(f"wrote {name}.json: {len(doc['links'])} links, {len(doc['keypoints'])} keypoints")
