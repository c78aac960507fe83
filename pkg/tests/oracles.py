"""Independent reference implementations used to check the package.

Nothing here imports the code under test; boxes are plain
``(x0, y0, x1, y1)`` tuples.
"""

import numpy as np

SPECIAL = {
    "monopolar curved scissors",
    "tip-up fenestrated grasper",
    "suction irrigator",
    "stapler",
    "grasping retractor",
}


def raster_counts(a, b):
    """(intersection cells, union cells) of two integer boxes by painting unit cells."""
    x0 = min(a[0], b[0])
    y0 = min(a[1], b[1])
    x1 = max(a[2], b[2])
    y1 = max(a[3], b[3])
    grid_a = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    grid_b = np.zeros_like(grid_a)
    grid_a[a[1] - y0 : a[3] - y0, a[0] - x0 : a[2] - x0] = True
    grid_b[b[1] - y0 : b[3] - y0, b[0] - x0 : b[2] - x0] = True
    return int((grid_a & grid_b).sum()), int((grid_a | grid_b).sum())


def raster_iou(a, b):
    inter, union = raster_counts(a, b)
    return inter / union


def naive_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def label_filter_literal(tools, parts, tau):
    """Straight transcription of the per-frame filtering loop.

    tools: list of (box, class name); parts: list of (box, kind).
    Returns True when the frame would be selected.
    """
    tips = [box for box, kind in parts if kind == "tip"]
    clevises = [box for box, kind in parts if kind == "clevis"]
    select_cnt = 0
    for tool_box, label in tools:
        if label in SPECIAL:
            for part_box in tips:
                if naive_iou(part_box, tool_box) > tau:
                    select_cnt += 1
        if label not in SPECIAL:
            for part_box in clevises:
                if naive_iou(part_box, tool_box) > tau:
                    select_cnt += 1
    return len(tools) == select_cnt


def ap_101(tp_flags, n_gt):
    """COCO-style 101-point AP from TP flags sorted by descending score, written out longhand."""
    tp = fp = 0
    recalls, precisions = [], []
    for flag in tp_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    total = 0.0
    for i in range(101):
        r = i / 100
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r - 1e-12 and prec > best:
                best = prec
        total += best
    return total / 101
