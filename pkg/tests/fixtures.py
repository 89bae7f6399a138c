"""Hand-built evaluation fixtures shared by several test modules."""

from pathlib import Path

# class 0: two GTs, detections ranked TP, FP, TP  -> AP 5/6
# class 1: one GT, one far-away detection         -> AP 0
STAIRCASE_GT = {
    "img0": ["0 0.25 0.25 0.2 0.2", "0 0.75 0.75 0.2 0.2"],
    "img1": ["1 0.5 0.5 0.1 0.1"],
}
STAIRCASE_PRED = {
    "img0": ["0 0.9 0.25 0.25 0.2 0.2", "0 0.8 0.25 0.75 0.2 0.2", "0 0.7 0.75 0.75 0.2 0.2"],
    "img1": ["1 0.6 0.1 0.9 0.1 0.1"],
}

PERFECT_GT = {
    "a": ["0 0.3 0.3 0.2 0.2", "1 0.7 0.7 0.3 0.2"],
    "b": ["2 0.5 0.5 0.4 0.4"],
    "c": ["0 0.2 0.8 0.1 0.1", "2 0.8 0.2 0.2 0.1"],
}


def perfect_predictions():
    return {k: [line.split(" ", 1)[0] + " 0.9 " + line.split(" ", 1)[1] for line in v] for k, v in PERFECT_GT.items()}


def write_label_dirs(root, gt, pred):
    root = Path(root)
    gt_dir, pred_dir = root / "gt", root / "pred"
    gt_dir.mkdir(parents=True, exist_ok=True)
    pred_dir.mkdir(parents=True, exist_ok=True)
    for name, lines in gt.items():
        (gt_dir / f"{name}.txt").write_text("".join(line + "\n" for line in lines))
    for name, lines in pred.items():
        (pred_dir / f"{name}.txt").write_text("".join(line + "\n" for line in lines))
    return gt_dir, pred_dir
