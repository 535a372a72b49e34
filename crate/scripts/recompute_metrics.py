#!/usr/bin/env python3
"""Recompute metrics.json from report.json and compare.

Usage: recompute_metrics.py REPORT [METRICS] [--tol 1e-9]

METRICS defaults to the metrics embedded in the report. Exits 0 when every
recomputed value agrees within the tolerance, 1 otherwise.
"""

import argparse
import json
import sys

import numpy as np


def rot(euler):
    a, b, g = euler
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(g), -np.sin(g), 0], [np.sin(g), np.cos(g), 0], [0, 0, 1]])
    return rz @ ry @ rx


def pose(p):
    return np.array(p["t"], dtype=float), rot(p["euler"])


def compose(a, b):
    return a[0] + a[1] @ b[0], a[1] @ b[1]


def rotation_angle(r):
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = 0.5 * (np.trace(r) - 1.0)
    return np.arctan2(s, c)


def quat(r):
    """Unit quaternion (w, x, y, z) of a rotation matrix."""
    w = np.sqrt(max(0.0, 1 + r[0, 0] + r[1, 1] + r[2, 2])) / 2
    x = np.sqrt(max(0.0, 1 + r[0, 0] - r[1, 1] - r[2, 2])) / 2
    y = np.sqrt(max(0.0, 1 - r[0, 0] + r[1, 1] - r[2, 2])) / 2
    z = np.sqrt(max(0.0, 1 - r[0, 0] - r[1, 1] + r[2, 2])) / 2
    x = np.copysign(x, r[2, 1] - r[1, 2])
    y = np.copysign(y, r[0, 2] - r[2, 0])
    z = np.copysign(z, r[1, 0] - r[0, 1])
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def quat_to_rot(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def align(pairs):
    """Rigid transform taking estimated poses onto true ones."""
    if not pairs:
        return None
    a = np.array([t[0] for t, _ in pairs])
    b = np.array([e[0] for _, e in pairs])
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    s = np.linalg.svd(b - cb, compute_uv=False) if len(pairs) >= 3 else None
    if s is not None and s[0] > 1e-9 and s[1] > 1e-9 * max(s[0], 1.0):
        u, _, vt = np.linalg.svd((b - cb).T @ (a - ca))
        d = np.sign(np.linalg.det(vt.T @ u.T))
        r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    else:
        m = np.zeros((4, 4))
        for t, e in pairs:
            q = quat(t[1] @ e[1].T)
            m += np.outer(q, q)
        vals, vecs = np.linalg.eigh(m)
        r = quat_to_rot(vecs[:, np.argmax(vals)])
    return ca - r @ cb, r


def rms(total, n):
    return float(np.sqrt(total / n)) if n > 0 else None


def recompute(report):
    truth = {m["id"]: pose(m["pose"]) for m in report["truth_markers"]}
    origins = {o["frame"]: pose(o["pose"]) for o in report["frame_origins"]}
    frames = sorted(set(report["live_frames"]) | {e["frame"] for e in report["final_map"]})
    per_frame = []
    for f in frames:
        pairs = [
            (truth[e["marker_id"]], pose(e["pose"]))
            for e in report["final_map"]
            if e["frame"] == f and e["marker_id"] in truth
        ]
        a = align(pairs)
        sp = so = 0.0
        if a is not None:
            for t, e in pairs:
                w = compose(a, e)
                sp += np.sum((t[0] - w[0]) ** 2)
                so += rotation_angle(t[1].T @ w[1]) ** 2
        origin = None
        if f in origins:
            o = origins[f]
            origin = rms(sum(np.sum((t[0] - (o[0] + o[1] @ e[0])) ** 2) for t, e in pairs), len(pairs))
        per_frame.append(
            {
                "frame": f,
                "markers": len(pairs),
                "alignment": a,
                "position_rmse": rms(sp, len(pairs)) if a is not None else None,
                "orientation_rmse": rms(so, len(pairs)) if a is not None else None,
                "origin_position_rmse": origin,
            }
        )

    chain = {link["from"]: (link["to"], pose(link["rt"])) for link in report["frame_chain"]}
    identity = (np.zeros(3), np.eye(3))
    acc = {}
    for s in report["trajectories"]:
        live, to_live = chain.get(s["frame"], (s["frame"], identity))
        fm = next((p for p in per_frame if p["frame"] == live), None)
        to_world = fm["alignment"] if fm is not None and fm["alignment"] is not None else origins.get(live)
        slot = acc.setdefault(s["drone_id"], [0.0, 0])
        if to_world is not None:
            w = compose(to_world, to_live)
            p = w[0] + w[1] @ np.array(s["estimate"]["t"])
            slot[0] += np.sum((np.array(s["truth"]["t"]) - p) ** 2)
            slot[1] += 1
    drones = [{"drone_id": d, "samples": n, "ate": rms(t, n)} for d, (t, n) in sorted(acc.items())]

    aligned = [p for p in per_frame if p["alignment"] is not None]
    n = sum(p["markers"] for p in aligned)

    def pooled(key):
        return rms(sum(p[key] ** 2 * p["markers"] for p in per_frame if p[key] is not None), n)

    with_origin = [p for p in per_frame if p["origin_position_rmse"] is not None]
    ran = [r for r in report["ba_runs"] if r["report"] is not None]
    return {
        "marker_count": len(report["final_map"]),
        "frames_remaining": len(report["live_frames"]),
        "marker_position_rmse": pooled("position_rmse"),
        "marker_orientation_rmse": pooled("orientation_rmse"),
        "origin_position_rmse": rms(
            sum(p["origin_position_rmse"] ** 2 * p["markers"] for p in with_origin),
            sum(p["markers"] for p in with_origin),
        ),
        "per_frame": per_frame,
        "drones": drones,
        "merge_count": len(report["merges"]),
        "refinement_count": len(report["refinements"]),
        "ba_runs": len(ran),
        "ba_iterations": sum(r["report"]["iterations"] for r in ran),
    }


def compare(ours, theirs, tol):
    problems = []

    def num(path, a, b):
        if a is None or b is None:
            if a is not None or b is not None:
                problems.append(f"{path}: {a} vs {b}")
        elif abs(a - b) > tol:
            problems.append(f"{path}: {a!r} vs {b!r}")

    for key in ["marker_count", "frames_remaining", "merge_count", "refinement_count", "ba_runs", "ba_iterations"]:
        if ours[key] != theirs[key]:
            problems.append(f"{key}: {ours[key]} vs {theirs[key]}")
    for key in ["marker_position_rmse", "marker_orientation_rmse", "origin_position_rmse"]:
        num(key, ours[key], theirs[key])
    if len(ours["per_frame"]) != len(theirs["per_frame"]):
        problems.append("per_frame length differs")
    for a, b in zip(ours["per_frame"], theirs["per_frame"]):
        f = a["frame"]
        if a["frame"] != b["frame"] or a["markers"] != b["markers"]:
            problems.append(f"frame {f}: identity or marker count differs")
        for key in ["position_rmse", "orientation_rmse", "origin_position_rmse"]:
            num(f"frame {f} {key}", a[key], b[key])
        if (a["alignment"] is None) != (b["alignment"] is None):
            problems.append(f"frame {f}: alignment presence differs")
        elif a["alignment"] is not None:
            t, r = pose(b["alignment"])
            num(f"frame {f} alignment t", float(np.max(np.abs(a["alignment"][0] - t))), 0.0)
            num(f"frame {f} alignment R", float(np.max(np.abs(a["alignment"][1] - r))), 0.0)
    if len(ours["drones"]) != len(theirs["drones"]):
        problems.append("drone count differs")
    for a, b in zip(ours["drones"], theirs["drones"]):
        if a["drone_id"] != b["drone_id"] or a["samples"] != b["samples"]:
            problems.append(f"drone {a['drone_id']}: identity or sample count differs")
        num(f"drone {a['drone_id']} ate", a["ate"], b["ate"])
    return problems


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("report")
    parser.add_argument("metrics", nargs="?")
    parser.add_argument("--tol", type=float, default=1e-9)
    args = parser.parse_args()
    with open(args.report) as f:
        report = json.load(f)
    if args.metrics:
        with open(args.metrics) as f:
            theirs = json.load(f)
    else:
        theirs = report["metrics"]
    problems = compare(recompute(report), theirs, args.tol)
    for p in problems:
        print(p)
    print(f"{'MISMATCH' if problems else 'OK'}: {len(problems)} difference(s) above {args.tol:g}")
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
