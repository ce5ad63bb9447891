"""Grasp rectangles and the rectangle success metric.

Builds a ground-truth grasp, perturbs it in angle and position, and prints
the Jaccard index, the angle difference and whether the prediction counts
as a success (angle below 30 degrees and overlap above 25 percent).

    python demos/demo_geometry.py
"""

import argparse

from stngrasp.geometry import GraspRect, angle_diff, is_success, jaccard


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--opening", type=float, default=40.0, help="gripper opening w of the ground truth (px)")
    args = ap.parse_args()

    gt = GraspRect(x=200, y=180, theta=20, w=args.opening, h=20)
    print("ground truth corners (plate p1-p2 first):")
    for p in gt.corners():
        print(f"   ({p[0]:7.2f}, {p[1]:7.2f})")

    trials = {
        "identical": gt,
        "shifted 8 px": gt.translated(8, 0),
        "rotated 29 deg": GraspRect(gt.x, gt.y, gt.theta + 29, gt.w, gt.h),
        "rotated 30 deg": GraspRect(gt.x, gt.y, gt.theta + 30, gt.w, gt.h),
        "flipped 180 deg": GraspRect(gt.x, gt.y, gt.theta + 180, gt.w, gt.h),
        "far away": gt.translated(60, 0),
    }
    print(f"\n{'prediction':18s} {'jaccard':>8s} {'d_angle':>8s}  success")
    for name, pred in trials.items():
        ok, _ = is_success(pred, [gt])
        print(f"{name:18s} {jaccard(pred, gt):8.3f} {angle_diff(pred.theta, gt.theta):8.2f}  {ok}")


if __name__ == "__main__":
    main()
