"""How p^v and the classifier are fused: the five-row rectification table."""

from ssvtcn.data import CLASS_NAMES
from ssvtcn.detector import ClassIntervals, classify_by_pv, rectify

for prelim, pv_class in [(0, 0), (0, 2), (1, 1), (1, 3), (2, 0)]:
    final, changed = rectify(prelim, pv_class)
    print(f"classifier {CLASS_NAMES[prelim]:<10} p^v {CLASS_NAMES[pv_class]:<10} -> "
          f"{CLASS_NAMES[final]:<10} {'rectified' if changed else ''}")

intervals = ClassIntervals(
    num_classes=4,
    q=0.05,
    lo={0: -5.0, 1: -12.0, 2: -22.0, 3: -40.0},
    hi={0: -1.0, 1: -8.0, 2: -18.0, 3: -30.0},
    center={0: -3.0, 1: -10.0, 2: -20.0, 3: -35.0},
    counts={0: 100, 1: 40, 2: 30, 3: 10},
    normal_threshold=-5.0,
)
for score in (-2.0, -9.0, -15.0, -50.0):
    print(f"p^v {score:>6}: {CLASS_NAMES[classify_by_pv(score, intervals)]}")
