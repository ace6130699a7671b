"""2D -> 3D label lifting and segmentation metrics.

Per-view instance maps vote through the face-id buffers onto mesh faces.
Instance identities are merged across views by face-set IoU (union-find over
pairs above threshold, processed in descending IoU order), majority vote
decides each face, and unseen faces inherit the nearest voted label by BFS
over face adjacency. Evaluation matches predicted to ground-truth instances
with an optimal assignment, so metrics are invariant to label permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, LengthMismatch
from .mesh import TriMesh, face_adjacency

IOU_MERGE_THRESHOLD = 0.3
BACKGROUND = 0


def hungarian(cost) -> list[tuple[int, int]]:
    """Optimal assignment minimizing total cost on an n x m matrix.

    Shortest-augmenting-path (Jonker-Volgenant style), O(n^2 m). Returns
    min(n, m) (row, col) pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("hungarian requires finite costs")
    n, m = cost.shape
    transposed = n > m
    if transposed:
        cost = cost.T
        n, m = m, n

    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row matched to column j, 1-based
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = []
    for j in range(1, m + 1):
        if p[j] != 0:
            row, col = p[j] - 1, j - 1
            pairs.append((col, row) if transposed else (row, col))
    return sorted(pairs)


@dataclass
class InstanceLabeling:
    face_labels: np.ndarray  # (F,) merged instance ids, 0 = background
    votes: np.ndarray  # (F, K+1) per-face vote histogram
    filled: np.ndarray  # (F,) True where the label came from fill_unseen

    @property
    def voted(self) -> np.ndarray:
        return self.votes.sum(axis=1) > 0


def predict_view(class_logits: np.ndarray, mask_logits: np.ndarray) -> np.ndarray:
    """Per-patch local instance assignment from one view's head outputs.

    Winning query per patch maximizes instance-class probability times
    sigmoid(mask logit); the patch is background when the winner's argmax
    class is no-object/background or its score is below 0.5. Returns (G^2,)
    ints with 0 = background, q+1 = query q.
    """
    class_logits = np.asarray(class_logits, dtype=np.float64)
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    e = np.exp(class_logits - class_logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)  # columns: no-object, background, instance
    inst_prob = probs[:, 2:3]
    score = inst_prob * (1.0 / (1.0 + np.exp(-mask_logits)))
    winner = score.argmax(axis=0)
    best = score[winner, np.arange(score.shape[1])]
    win_class = class_logits.argmax(axis=1)[winner]
    out = winner + 1
    out[(win_class != 2) | (best < 0.5)] = BACKGROUND
    return out.astype(np.int64)


def expand_patch_labels(patch_assign: np.ndarray, patch_size: int, resolution: int) -> np.ndarray:
    """Broadcast per-patch labels to a (H, W) pixel map."""
    g = resolution // patch_size
    grid = np.asarray(patch_assign).reshape(g, g)
    return np.repeat(np.repeat(grid, patch_size, axis=0), patch_size, axis=1)


def _merge_instances(unit_faces: dict) -> dict:
    """Union-find merge of (view, local_id) units by face-set IoU."""
    units = sorted(unit_faces)
    parent = {u: u for u in units}

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    pairs = []
    for a_idx in range(len(units)):
        for b_idx in range(a_idx + 1, len(units)):
            a, b = units[a_idx], units[b_idx]
            if a[0] == b[0]:
                continue  # identities merge across views only
            fa, fb = unit_faces[a], unit_faces[b]
            inter = len(fa & fb)
            if inter == 0:
                continue
            iou = inter / len(fa | fb)
            if iou > IOU_MERGE_THRESHOLD:
                pairs.append((-iou, a, b))
    for _, a, b in sorted(pairs):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    roots = sorted({find(u) for u in units})
    root_id = {r: k + 1 for k, r in enumerate(roots)}  # instance ids 1..K
    return {u: root_id[find(u)] for u in units}


def lift(pixel_maps: list, framebuffers: list, mesh: TriMesh) -> InstanceLabeling:
    """Vote per-view pixel instance maps onto mesh faces.

    Every covered pixel votes its label (background included) onto its face;
    per-view identities are merged across views by face-set IoU before
    voting, and each face takes its majority merged label with ties broken
    toward the smaller id. Unvoted faces stay 0 with an empty histogram for
    fill_unseen to resolve.
    """
    if len(pixel_maps) != len(framebuffers):
        raise DimensionMismatch("one pixel map per framebuffer required")
    for pm, fb in zip(pixel_maps, framebuffers):
        if pm.shape != fb.face_id.shape:
            raise DimensionMismatch("pixel map and framebuffer disagree on shape")
        if fb.face_id.max(initial=-1) >= mesh.n_faces:
            raise DimensionMismatch("framebuffer references faces beyond the mesh")

    unit_faces: dict = {}
    for view, (pm, fb) in enumerate(zip(pixel_maps, framebuffers)):
        covered = fb.face_id >= 0
        labs = pm[covered]
        faces = fb.face_id[covered]
        for local in np.unique(labs):
            if local == BACKGROUND:
                continue
            unit_faces[(view, int(local))] = set(faces[labs == local].tolist())

    merged_of = _merge_instances(unit_faces)
    n_instances = max(merged_of.values(), default=0)

    votes = np.zeros((mesh.n_faces, n_instances + 1), dtype=np.int64)
    for view, (pm, fb) in enumerate(zip(pixel_maps, framebuffers)):
        covered = fb.face_id >= 0
        labs = pm[covered]
        faces = fb.face_id[covered]
        merged = np.zeros_like(labs)
        for local in np.unique(labs):
            if local != BACKGROUND:
                merged[labs == local] = merged_of[(view, int(local))]
        np.add.at(votes, (faces, merged), 1)

    face_labels = votes.argmax(axis=1)  # argmax ties resolve to the smaller id
    face_labels[votes.sum(axis=1) == 0] = BACKGROUND
    return InstanceLabeling(
        face_labels=face_labels.astype(np.int64),
        votes=votes,
        filled=np.zeros(mesh.n_faces, dtype=bool),
    )


def fill_unseen(mesh: TriMesh, labeling: InstanceLabeling) -> InstanceLabeling:
    """Assign unvoted faces the label of the nearest voted face.

    Multi-source BFS over face adjacency; at equal distance the smaller
    label wins. Voted faces are never changed.
    """
    adj = face_adjacency(mesh)
    labels = labeling.face_labels.copy()
    filled = labeling.filled.copy()
    voted = labeling.voted
    if voted.all():
        return InstanceLabeling(labels, labeling.votes.copy(), filled)

    assigned = voted.copy()
    frontier = np.flatnonzero(voted).tolist()
    while frontier:
        candidates: dict[int, int] = {}
        for f in frontier:
            for g in adj[f]:
                if not assigned[g]:
                    lab = int(labels[f])
                    if g not in candidates or lab < candidates[g]:
                        candidates[g] = lab
        for g, lab in candidates.items():
            labels[g] = lab
            filled[g] = True
            assigned[g] = True
        frontier = sorted(candidates)
    return InstanceLabeling(labels, labeling.votes.copy(), filled)


def evaluate(pred_labels: np.ndarray, gt_labels: np.ndarray) -> dict:
    """mIoU over gt instances plus background, per-instance Dice, and
    instance precision/recall at IoU 0.5, under optimal instance matching."""
    pred_labels = np.asarray(pred_labels).ravel()
    gt_labels = np.asarray(gt_labels).ravel()
    if len(pred_labels) != len(gt_labels):
        raise LengthMismatch(f"{len(pred_labels)} predictions vs {len(gt_labels)} gt")

    pred_ids = sorted(set(pred_labels.tolist()) - {BACKGROUND})
    gt_ids = sorted(set(gt_labels.tolist()) - {BACKGROUND})

    iou = np.zeros((len(pred_ids), len(gt_ids)))
    dice_mat = np.zeros_like(iou)
    for a, pid in enumerate(pred_ids):
        pmask = pred_labels == pid
        for b, gid in enumerate(gt_ids):
            gmask = gt_labels == gid
            inter = np.count_nonzero(pmask & gmask)
            union = np.count_nonzero(pmask | gmask)
            iou[a, b] = inter / union if union else 0.0
            denom = np.count_nonzero(pmask) + np.count_nonzero(gmask)
            dice_mat[a, b] = 2.0 * inter / denom if denom else 0.0

    matches = hungarian(1.0 - iou) if iou.size else []
    matched_iou = {gt_ids[b]: iou[a, b] for a, b in matches}
    matched_dice = {gt_ids[b]: dice_mat[a, b] for a, b in matches}

    pb = pred_labels == BACKGROUND
    gb = gt_labels == BACKGROUND
    bg_union = np.count_nonzero(pb | gb)
    bg_iou = np.count_nonzero(pb & gb) / bg_union if bg_union else 1.0

    per_instance_iou = [matched_iou.get(g, 0.0) for g in gt_ids]
    miou = float(np.mean(per_instance_iou + [bg_iou])) if gt_ids else float(bg_iou)

    tp = sum(1 for a, b in matches if iou[a, b] >= 0.5)
    precision = tp / len(pred_ids) if pred_ids else (1.0 if not gt_ids else 0.0)
    recall = tp / len(gt_ids) if gt_ids else 1.0

    return {
        "miou": miou,
        "background_iou": float(bg_iou),
        "dice": {int(g): float(matched_dice.get(g, 0.0)) for g in gt_ids},
        "mean_dice": float(np.mean([matched_dice.get(g, 0.0) for g in gt_ids])) if gt_ids else 1.0,
        "precision": float(precision),
        "recall": float(recall),
        "n_pred_instances": len(pred_ids),
        "n_gt_instances": len(gt_ids),
    }
