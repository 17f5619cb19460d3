"""Independent reference implementations used to check the real code.

Everything here is deliberately written as plain loops over scalars so it
shares no code paths with the package.
"""

from railswin.data.boxes import BBox
from railswin.data.coco import AnnotatedImage, Dataset
from railswin.metrics import Detection


def oracle_iou(a, b):
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def oracle_match(dets, gts, thresh):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(gts)
    labels = [False] * len(dets)
    for i in order:
        best_j, best_ov = -1, 0.0
        for j, (gbox, gcat) in enumerate(gts):
            if used[j] or gcat != dets[i].category_id:
                continue
            ov = oracle_iou(dets[i].box, gbox)
            if ov >= thresh and ov > best_ov:
                best_j, best_ov = j, ov
        if best_j >= 0:
            used[best_j] = True
            labels[i] = True
    return labels


def oracle_ap(scored, num_gt):
    """101-point interpolated AP from first principles."""
    if num_gt == 0:
        return 0.0 if scored else None
    ranked = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    points = []
    tp = fp = 0
    for i in ranked:
        if scored[i][1]:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100.0
        precisions = [p for rec, p in points if rec >= r - 1e-12]
        total += max(precisions) if precisions else 0.0
    return total / 101.0


def oracle_evaluate(dets, dataset, thresholds, max_dets):
    kept = []
    for im in dataset.images:
        mine = sorted([d for d in dets if d.image_id == im.id],
                      key=lambda d: -d.score)[:max_dets]
        kept.extend(mine)
    cats = sorted({cat for im in dataset.images for _, cat in im.instances})
    ap = {}
    recall = {}
    for t in thresholds:
        for c in cats:
            scored = []
            num_gt = 0
            for im in sorted(dataset.images, key=lambda im: im.id):
                gts_c = [(b, cat) for b, cat in im.instances if cat == c]
                dets_c = [d for d in kept if d.image_id == im.id and d.category_id == c]
                labels = oracle_match(dets_c, gts_c, t)
                scored.extend((d.score, tp) for d, tp in zip(dets_c, labels))
                num_gt += len(gts_c)
            ap[(t, c)] = oracle_ap(scored, num_gt) or 0.0
            recall[(t, c)] = sum(1 for _, x in scored if x) / num_gt if num_gt else 0.0
    t_lo, t_hi = min(thresholds), max(thresholds)
    map_lo = sum(ap[(t_lo, c)] for c in cats) / len(cats) if cats else 0.0
    map_hi = sum(ap[(t_hi, c)] for c in cats) / len(cats) if cats else 0.0
    ar = [sum(recall[(t, c)] for t in thresholds) / len(thresholds) for c in cats]
    mar = sum(ar) / len(cats) if cats else 0.0
    return map_lo, map_hi, mar


def random_fixture(rng, max_gt=3, max_dets=5, categories=(1, 2)):
    images = []
    dets = []
    for image_id in (1, 2, 3):
        instances = []
        for _ in range(int(rng.integers(0, max_gt + 1))):
            instances.append((BBox(float(rng.integers(0, 50)), float(rng.integers(0, 50)),
                                   float(rng.integers(5, 30)), float(rng.integers(5, 30))),
                              int(rng.choice(categories))))
        images.append(AnnotatedImage(id=image_id, width=100, height=100,
                                     instances=instances))
        for _ in range(int(rng.integers(0, max_dets + 1))):
            dets.append(Detection(image_id=image_id,
                                  box=BBox(float(rng.integers(0, 50)), float(rng.integers(0, 50)),
                                           float(rng.integers(5, 30)), float(rng.integers(5, 30))),
                                  category_id=int(rng.choice(categories)),
                                  score=float(rng.random())))
    return dets, Dataset(images=images, categories={c: f"cat{c}" for c in categories})


def oracle_stats(dataset, cid):
    """Naive per-instance loop for the mean pixel/relative sizes."""
    areas, ratios, ws, hs = [], [], [], []
    for im in dataset.images:
        for box, cat in im.instances:
            if cat == cid:
                areas.append(box.w * box.h)
                ratios.append(box.w * box.h / (im.width * im.height))
                ws.append(box.w)
                hs.append(box.h)
    n = len(areas)
    return (sum(areas) / n, sum(ratios) / n, sum(ws) / n, sum(hs) / n, n)
