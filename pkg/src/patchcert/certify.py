"""Vote aggregation, smoothed prediction, and patch certification.

A smoothed classifier predicts the most frequent class over an ablation
set and is certifiably robust when the top class leads the runner-up by
more than 2*Delta votes, where Delta is the maximum number of ablations
a single m*m patch can intersect. Delta comes in three flavours here:

* closed form, ``paper`` mode: the published threshold formulas;
* closed form, ``safe`` mode: exact integer interval arithmetic when
  the image dimensions are supplied (the published strided formulas
  under-count when the stride does not divide the width, because the
  strided start grid has one short wrap gap), falling back to
  ceil((m+b-1)/s) per dimension without them;
* ``delta_oracle``: brute-force enumeration of every placement against
  every generated ablation mask, exact by construction.

Certification uses integer arithmetic only and breaks argmax ties by
lowest class index everywhere.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context
from dataclasses import dataclass

import numpy as np

from .ablation import AblationSpec, ablation_anchors, ablation_set
from .errors import BudgetError, EmptyVotesError, InputError, ParameterError

__all__ = [
    "VoteCounts",
    "Certificate",
    "PatchThreatModel",
    "FlipSearchResult",
    "aggregate_votes",
    "smoothed_predict",
    "delta_closed_form",
    "delta_oracle",
    "certify_votes",
    "adversarial_flip_search",
    "certified_accuracy",
]

ORACLE_BUDGET = 10**8
DELTA_MODES = ("safe", "paper", "oracle")


@dataclass(frozen=True)
class VoteCounts:
    """Per-class ablation prediction counts."""

    counts: tuple
    total: int

    @property
    def k(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class Certificate:
    predicted: int
    runner_up: int
    margin: int
    delta: int
    patch_m: int
    certified: bool
    delta_mode: str


@dataclass(frozen=True)
class PatchThreatModel:
    """An m*m adversarial patch placed anywhere inside the image (no wrap)."""

    m: int

    def placements(self, h: int, w: int) -> list:
        if not 1 <= self.m <= min(h, w):
            raise ParameterError(f"patch side {self.m} outside [1, {min(h, w)}]")
        return [(t, l) for t in range(h - self.m + 1) for l in range(w - self.m + 1)]


@dataclass(frozen=True)
class FlipSearchResult:
    changed: bool
    worst_prediction: int
    placement: tuple
    rival: int
    original_prediction: int
    post_counts: tuple
    advantage: int


def aggregate_votes(predictions, k: int) -> VoteCounts:
    """Count per-class occurrences of a prediction sequence."""
    preds = np.asarray(list(predictions), dtype=np.int64)
    if preds.size and (preds.min() < 0 or preds.max() >= k):
        raise InputError(f"prediction outside [0, {k}) in vote aggregation")
    counts = np.bincount(preds, minlength=k) if preds.size else np.zeros(k, dtype=np.int64)
    return VoteCounts(counts=tuple(int(c) for c in counts), total=int(preds.size))


def smoothed_predict(v: VoteCounts) -> int:
    """Majority class; ties break to the lowest class index."""
    if v.total == 0:
        raise EmptyVotesError("cannot predict from an empty vote aggregate")
    return int(np.argmax(np.asarray(v.counts)))


def _paper_delta_1d(b: int, s: int, m: int) -> int:
    if s == 1:
        return m + b - 1
    return math.ceil((m + s - 1) / s)


def _literal_safe_1d(b: int, s: int, m: int) -> int:
    return math.ceil((m + b - 1) / s)


def _exact_hits_1d(size: int, b: int, s: int, m: int, offset: int) -> int:
    """Exact max count of strided starts hit by one patch, along one axis.

    Starts are {offset, offset+s, ...} within [0, size); a patch edge at
    position ``left`` intersects every start in the circular window
    [left-b+1, left+m-1]. Counting uses a prefix table over start
    positions, so wrap gaps in the strided grid are handled exactly.
    """
    length = m + b - 1
    q = math.ceil((size - offset) / s)
    if length >= size:
        return q
    ys = np.arange(size)
    cum = np.zeros(size + 1, dtype=np.int64)
    cum[1:] = np.where(ys >= offset, (ys - offset) // s + 1, 0)
    lefts = np.arange(size - m + 1)
    lo = (lefts - (b - 1)) % size
    hi = lefts + m - 1  # patch does not wrap, so hi < size always
    wraps = lo > hi
    plain = cum[hi + 1] - cum[lo]
    wrapped = q - (cum[lo] - cum[hi + 1])
    return int(np.max(np.where(wraps, wrapped, plain)))


def delta_closed_form(spec: AblationSpec, m: int, mode: str = "safe", dims=None) -> int:
    """Certification threshold Delta from arithmetic alone.

    ``paper`` reproduces the published formulas. ``safe`` is an exact
    count when ``dims=(h, w)`` is given, else the per-dimension bound
    ceil((m+b-1)/s); the bound matches the exact count whenever the
    stride divides the image width and m+b-1 fits inside it.
    """
    if m < 1:
        raise ParameterError(f"patch side must be >= 1, got {m}")
    if mode not in ("safe", "paper"):
        raise ParameterError(f"unknown delta mode {mode!r}; use safe or paper")
    b, s, off = spec.b, spec.s, spec.offset
    if mode == "paper":
        d1 = _paper_delta_1d(b, s, m)
        return d1 if spec.kind == "column" else d1 * d1
    if dims is None:
        d1 = _literal_safe_1d(b, s, m)
        return d1 if spec.kind == "column" else d1 * d1
    h, w = dims
    spec.validate_for(h, w)
    if m > min(h, w):
        raise ParameterError(f"patch side {m} exceeds image {h}x{w}")
    if spec.kind == "column":
        return _exact_hits_1d(w, b, s, m, off)
    return _exact_hits_1d(h, b, s, m, off) * _exact_hits_1d(w, b, s, m, off)


def _intersection_matrix(h: int, w: int, spec: AblationSpec, m: int):
    """(ablations x placements) boolean intersection table from real masks.

    Row j is ablation j of the set; column p is the patch placement in
    row-major (top, left) order. Entry true iff the patch square overlaps
    at least one retained pixel of that ablation's mask.
    """
    if not 1 <= m <= min(h, w):
        raise ParameterError(f"patch side {m} admits no placement in {h}x{w}")
    anchors = ablation_anchors(h, w, spec)
    q = len(anchors)
    n_place = (h - m + 1) * (w - m + 1)
    if q * n_place > ORACLE_BUDGET:
        raise BudgetError(
            f"enumeration of {q} ablations x {n_place} placements exceeds the "
            f"budget of {ORACLE_BUDGET}; use the closed form instead"
        )
    dummy = np.zeros((h, w, 1), dtype=np.float32)
    masks = np.stack([a.mask for a in ablation_set(dummy, spec)]).astype(np.int32)
    # prefix sums turn "any retained pixel in an m*m window" into O(1) lookups
    pref = np.zeros((q, h + 1, w + 1), dtype=np.int32)
    np.cumsum(masks, axis=1, out=pref[:, 1:, 1:])
    np.cumsum(pref[:, 1:, 1:], axis=2, out=pref[:, 1:, 1:])
    window = (
        pref[:, m:, m:] - pref[:, :-m, m:] - pref[:, m:, :-m] + pref[:, :-m, :-m]
    )
    placements = [(t, l) for t in range(h - m + 1) for l in range(w - m + 1)]
    return (window > 0).reshape(q, n_place), placements


def delta_oracle(h: int, w: int, spec: AblationSpec, m: int) -> int:
    """Exact Delta by enumerating every placement against every mask."""
    hits, _ = _intersection_matrix(h, w, spec, m)
    return int(hits.sum(axis=0).max())


def certify_votes(v: VoteCounts, delta: int, m: int, delta_mode: str = "safe") -> Certificate:
    """Apply the 2*Delta margin test to a vote aggregate."""
    if v.total == 0:
        raise EmptyVotesError("cannot certify an empty vote aggregate")
    if delta < 0:
        raise ParameterError(f"delta must be nonnegative, got {delta}")
    if v.k < 2:
        raise ParameterError("certification needs at least two classes")
    counts = np.asarray(v.counts)
    predicted = int(np.argmax(counts))
    others = counts.copy()
    others[predicted] = -1
    runner_up = int(np.argmax(others))
    margin = int(counts[predicted] - counts[runner_up])
    certified = counts[predicted] > counts[runner_up] + 2 * delta
    return Certificate(
        predicted=predicted,
        runner_up=runner_up,
        margin=margin,
        delta=int(delta),
        patch_m=int(m),
        certified=bool(certified),
        delta_mode=delta_mode,
    )


def adversarial_flip_search(
    per_ablation_predictions,
    spec: AblationSpec,
    h: int,
    w: int,
    m: int,
    true_class: int,
    k: int | None = None,
) -> FlipSearchResult:
    """Exhaustive worst-case adversary over placements and reassignments.

    For every patch placement the adversary may rewrite the predictions
    of every intersected ablation; moving them all onto a single rival
    class is optimal, so each (placement, rival) pair is scored and the
    most damaging one returned. A change of the smoothed prediction,
    including one forced through the lowest-index tie-break, counts as
    a successful attack.
    """
    preds = np.asarray(list(per_ablation_predictions), dtype=np.int64)
    if preds.size == 0:
        raise InputError("need at least one per-ablation prediction")
    if k is None:
        k = int(max(preds.max(), true_class)) + 1
    if preds.min() < 0 or preds.max() >= k:
        raise InputError(f"prediction outside [0, {k})")
    if k < 2:
        raise ParameterError("flip search needs at least two classes")
    hits, placements = _intersection_matrix(h, w, spec, m)
    if hits.shape[0] != preds.size:
        raise InputError(
            f"{preds.size} predictions but the ablation set has {hits.shape[0]} members"
        )
    base = np.bincount(preds, minlength=k).astype(np.int64)
    g0 = int(np.argmax(base))
    onehot = np.zeros((preds.size, k), dtype=np.int64)
    onehot[np.arange(preds.size), preds] = 1
    in_patch = hits.T.astype(np.int64) @ onehot  # (placements, k) votes intersected
    sizes = hits.sum(axis=0).astype(np.int64)

    best = None  # (changed, advantage, -placement, -rival) lexicographic max
    for r in range(k):
        if r == g0:
            continue
        post = base[None, :] - in_patch
        post[:, r] += sizes
        pred_after = np.argmax(post, axis=1)
        adv = post[:, r] - post[:, g0]
        for j in range(len(placements)):
            changed = int(pred_after[j]) != g0
            key = (changed, int(adv[j]), -j, -r)
            if best is None or key > best[0]:
                best = (
                    key,
                    FlipSearchResult(
                        changed=changed,
                        worst_prediction=int(pred_after[j]),
                        placement=placements[j],
                        rival=r,
                        original_prediction=g0,
                        post_counts=tuple(int(c) for c in post[j]),
                        advantage=int(adv[j]),
                    ),
                )
    return best[1]


def _delta_for(spec: AblationSpec, m: int, mode: str, h: int, w: int) -> int:
    if mode == "oracle":
        return delta_oracle(h, w, spec, m)
    return delta_closed_form(spec, m, mode, dims=(h, w))


def certified_accuracy(
    dataset,
    model,
    spec: AblationSpec,
    patch_sizes,
    delta_mode: str = "safe",
    workers: int = 1,
) -> dict:
    """Standard and certified accuracy of a smoothed model over a dataset.

    Returns the report record emitted by the CLI: one certified-accuracy
    entry per requested patch size plus a per-image certificate list.
    Images are independent, so evaluation fans out over a thread pool;
    aggregation is order-independent and bit-identical for any worker
    count.
    """
    from .vit import smoothed_vit_forward  # deferred: vit builds on this module

    if delta_mode not in DELTA_MODES:
        raise ParameterError(f"unknown delta mode {delta_mode!r}")
    images = dataset.images
    labels = dataset.labels
    n = len(labels)
    if n == 0:
        raise InputError("dataset is empty")
    h, w = model.cfg.h, model.cfg.w
    patch_sizes = [int(m) for m in patch_sizes]
    deltas = {m: _delta_for(spec, m, delta_mode, h, w) for m in patch_sizes}

    def vote(i: int):
        _, v = smoothed_vit_forward(images[i], spec, model.params, model.cfg)
        return v

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ctxs = [copy_context() for _ in range(n)]
            votes = list(pool.map(lambda a: a[0].run(vote, a[1]), zip(ctxs, range(n))))
    else:
        votes = [vote(i) for i in range(n)]

    per_image = []
    n_correct = 0
    n_cert = {m: 0 for m in patch_sizes}
    for i in range(n):
        v = votes[i]
        pred = smoothed_predict(v)
        correct = pred == int(labels[i])
        n_correct += correct
        cert_by_m = {}
        for m in patch_sizes:
            c = certify_votes(v, deltas[m], m, delta_mode)
            cert_by_m[str(m)] = c.certified
            if correct and c.certified:
                n_cert[m] += 1
        first = certify_votes(v, deltas[patch_sizes[0]], patch_sizes[0], delta_mode)
        per_image.append(
            {
                "index": i,
                "label": int(labels[i]),
                "predicted": pred,
                "runner_up": first.runner_up,
                "margin": first.margin,
                "certified": cert_by_m,
            }
        )
    return {
        "spec": spec.to_dict(),
        "delta_mode": delta_mode,
        "standard_accuracy": n_correct / n,
        "certified": [
            {"m": m, "delta": deltas[m], "accuracy": n_cert[m] / n} for m in patch_sizes
        ],
        "per_image": per_image,
    }
