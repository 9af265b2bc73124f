"""Re-identification evaluation.

Features are extracted per image (the fused descriptor, the gate
signature alone, or the pooled final map), matched across views with
plain Euclidean distance, and scored with CMC and mean average
precision.  Ranking ties are broken by gallery index via a stable sort,
so every metric here is deterministic and can be checked against a
brute-force enumeration.

Two lightweight diagnostic heads live here as well: a logistic pair
matcher that scores identity agreement from the absolute difference of
two gate signatures, and per-factor linear probes that measure how much
attribute information a feature matrix carries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import train as tr
from .data import ImageSet, ToyReIDDataset, split_gallery_probe
from .errors import ContractError, DegenerateBatchError, ShapeError
from .model import MLFNModel

FEATURE_KINDS = ("R", "FS", "YN")


@dataclass
class FeatureSet:
    """Per-image feature rows plus aligned identity and view labels."""

    features: np.ndarray
    ids: np.ndarray
    views: np.ndarray
    kind: str

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError(
                f"feature matrix must be 2-d, got {self.features.shape}")
        if len(self.features) != len(self.ids):
            raise ShapeError(
                f"{len(self.features)} feature rows vs {len(self.ids)} ids")


@dataclass
class EvalReport:
    feature_kind: str
    config_digest: str
    ranks: tuple
    cmc_values: np.ndarray
    mean_ap: float
    per_query_ap: np.ndarray


def extract_features(model: MLFNModel, subset: ImageSet, *, kind: str = "R",
                     batch_size: int = 64) -> FeatureSet:
    """Run the model in eval mode over a subset and collect one feature
    row per image.

    ``R`` is the fused descriptor, ``FS`` the concatenated gate vector,
    ``YN`` the pooled final convolutional map.
    """
    if kind not in FEATURE_KINDS:
        raise ContractError(
            f"unknown feature kind {kind!r}, expected one of {FEATURE_KINDS}")
    rows = []
    n = len(subset.ids)
    for start in range(0, n, max(1, batch_size)):
        batch = subset.images[start:start + batch_size]
        res = model.forward(ad.Tape(), batch, training=False)
        picked = {"R": res.fused, "FS": res.signature, "YN": res.pooled}[kind]
        rows.append(np.asarray(picked.value, dtype=np.float64))
    return FeatureSet(features=np.concatenate(rows, axis=0),
                      ids=subset.ids.copy(), views=subset.views.copy(),
                      kind=kind)


def raw_pixel_feature_set(subset: ImageSet) -> FeatureSet:
    """Flattened images as features; the sanity baseline for matching."""
    flat = subset.images.reshape(len(subset.ids), -1).astype(np.float64)
    return FeatureSet(features=flat, ids=subset.ids.copy(),
                      views=subset.views.copy(), kind="RAW")


def distance_matrix(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, probe rows by gallery columns."""
    p = np.asarray(probe, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2:
        raise ShapeError("distance_matrix expects 2-d feature matrices")
    if p.shape[1] != g.shape[1]:
        raise ShapeError(
            f"feature dims differ: {p.shape[1]} vs {g.shape[1]}")
    diff = p[:, None, :] - g[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _check_ranking_inputs(dist, probe_ids, gallery_ids):
    dist = np.asarray(dist, dtype=np.float64)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (len(probe_ids), len(gallery_ids)):
        raise ShapeError(
            f"distance matrix {dist.shape} does not match "
            f"{len(probe_ids)} probes x {len(gallery_ids)} gallery items")
    missing = sorted(set(probe_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ContractError(
            f"probe ids {missing} never occur in the gallery")
    return dist, probe_ids, gallery_ids


def _relevance_by_rank(dist, probe_ids, gallery_ids) -> np.ndarray:
    """Boolean (probe, rank) matrix: is the k-th nearest gallery item a
    correct match?  Stable sort keeps tied distances in gallery order."""
    order = np.argsort(dist, axis=1, kind="stable")
    return gallery_ids[order] == probe_ids[:, None]


def cmc(dist, probe_ids, gallery_ids, ranks) -> np.ndarray:
    """Cumulated matching accuracy at each requested rank."""
    dist, probe_ids, gallery_ids = _check_ranking_inputs(
        dist, probe_ids, gallery_ids)
    for r in ranks:
        if not 1 <= r <= len(gallery_ids):
            raise ContractError(f"rank {r} outside 1..{len(gallery_ids)}")
    hits = _relevance_by_rank(dist, probe_ids, gallery_ids)
    first = np.argmax(hits, axis=1)
    return np.array([np.mean(first < r) for r in ranks], dtype=np.float64)


def mean_average_precision(dist, probe_ids,
                           gallery_ids) -> tuple[float, np.ndarray]:
    """mAP plus the per-query average precisions it averages."""
    dist, probe_ids, gallery_ids = _check_ranking_inputs(
        dist, probe_ids, gallery_ids)
    hits = _relevance_by_rank(dist, probe_ids, gallery_ids)
    positions = np.arange(1, hits.shape[1] + 1, dtype=np.float64)
    precision = np.cumsum(hits, axis=1) / positions[None, :]
    n_rel = hits.sum(axis=1)
    aps = (precision * hits).sum(axis=1) / n_rel
    return float(np.mean(aps)), aps


def evaluate_features(probe: FeatureSet, gallery: FeatureSet,
                      ranks=(1, 5, 10), config_digest: str = "") -> EvalReport:
    """Match a probe set against a gallery set and score the ranking."""
    if probe.kind != gallery.kind:
        raise ContractError(
            f"feature kinds differ: probe {probe.kind!r} vs "
            f"gallery {gallery.kind!r}")
    dist = distance_matrix(probe.features, gallery.features)
    values = cmc(dist, probe.ids, gallery.ids, ranks)
    mean_ap, aps = mean_average_precision(dist, probe.ids, gallery.ids)
    return EvalReport(feature_kind=probe.kind, config_digest=config_digest,
                      ranks=tuple(ranks), cmc_values=values, mean_ap=mean_ap,
                      per_query_ap=aps)


def evaluate_model(model: MLFNModel, dataset: ToyReIDDataset, *,
                   kind: str = "R", ranks=(1, 5, 10), split_seed: int = 0,
                   batch_size: int = 64) -> EvalReport:
    """Cross-view evaluation of a trained model on the test identities."""
    gallery, probe = split_gallery_probe(dataset, seed=split_seed)
    gf = extract_features(model, gallery, kind=kind, batch_size=batch_size)
    pf = extract_features(model, probe, kind=kind, batch_size=batch_size)
    return evaluate_features(pf, gf, ranks=ranks,
                             config_digest=model.config.digest())


# ---------------------------------------------------------------------------
# linear heads trained on top of fixed features


def _fit_softmax(x: np.ndarray, labels: np.ndarray, n_classes: int, *,
                 lr: float, iters: int, l2: float) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch multinomial logistic regression with Adam.

    Zero initialization keeps the fit deterministic; the objective is
    convex so no symmetry breaking is needed.
    """
    x64 = np.ascontiguousarray(x, dtype=np.float64)
    w = ad.Variable(np.zeros((x64.shape[1], n_classes)), requires_grad=True,
                    name="probe.w")
    b = ad.Variable(np.zeros(n_classes), requires_grad=True, name="probe.b")
    params = {"w": w, "b": b}
    state = tr.init_optimizer("adam", params)
    xv = ad.Variable(x64)
    labels = np.asarray(labels, dtype=np.int64)
    for _ in range(iters):
        tape = ad.Tape()
        logits = ad.linear(tape, xv, w, b)
        loss = ad.softmax_cross_entropy(tape, logits, labels)
        w.zero_grad()
        b.zero_grad()
        ad.backward(tape, loss)
        tr.adam_step(params, state, lr=lr, weight_decay=l2)
    return w.value, b.value


@dataclass
class PairMatcher:
    """Linear scorer over |sig_a - sig_b|; positive means same identity."""

    w: np.ndarray
    b: float

    def score(self, sig_a: np.ndarray, sig_b: np.ndarray) -> np.ndarray:
        delta = np.abs(np.asarray(sig_a, dtype=np.float64)
                       - np.asarray(sig_b, dtype=np.float64))
        return delta @ self.w + self.b


def fs_pair_matcher(sig_a: np.ndarray, sig_b: np.ndarray,
                    labels: np.ndarray, *, lr: float = 0.1,
                    iters: int = 300, l2: float = 1e-3) -> PairMatcher:
    """Train the signature pair matcher with a logistic objective.

    `labels` holds 1 for same-identity pairs and 0 otherwise.  The
    two-class softmax fit collapses to a single weight vector, scoring
    ``w . |a - b| + b`` with higher values meaning "same".
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateBatchError(
            "pair matcher needs both positive and negative pairs, got "
            f"classes {classes.tolist()}")
    if not set(classes.tolist()) <= {0, 1}:
        raise ContractError(f"pair labels must be 0/1, got {classes.tolist()}")
    deltas = np.abs(np.asarray(sig_a, dtype=np.float64)
                    - np.asarray(sig_b, dtype=np.float64))
    w2, b2 = _fit_softmax(deltas, labels, 2, lr=lr, iters=iters, l2=l2)
    return PairMatcher(w=w2[:, 1] - w2[:, 0], b=float(b2[1] - b2[0]))


def make_pair_training_set(features: FeatureSet, n_pairs: int,
                           seed: int = 0) -> tuple:
    """Sample a balanced set of (row_a, row_b, same-id) training pairs."""
    ids = features.ids
    uniq, counts = np.unique(ids, return_counts=True)
    multi = uniq[counts >= 2]
    if len(multi) == 0:
        raise ContractError("no identity has two or more feature rows")
    if len(uniq) < 2:
        raise DegenerateBatchError(
            "pair sampling needs at least two identities")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    n_pos = n_pairs // 2
    a_rows, b_rows, labels = [], [], []
    for _ in range(n_pos):
        identity = multi[rng.integers(len(multi))]
        pick = rng.choice(np.where(ids == identity)[0], size=2, replace=False)
        a_rows.append(pick[0])
        b_rows.append(pick[1])
        labels.append(1)
    for _ in range(n_pairs - n_pos):
        ia, ib = rng.choice(len(uniq), size=2, replace=False)
        a_rows.append(rng.choice(np.where(ids == uniq[ia])[0]))
        b_rows.append(rng.choice(np.where(ids == uniq[ib])[0]))
        labels.append(0)
    feats = features.features
    return (feats[np.asarray(a_rows)], feats[np.asarray(b_rows)],
            np.asarray(labels, dtype=np.int64))


def pair_matcher_distances(matcher: PairMatcher, probe: np.ndarray,
                           gallery: np.ndarray) -> np.ndarray:
    """Negated matcher scores for every probe/gallery pair, so the
    ranking metrics can consume them like distances."""
    p = np.asarray(probe, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if p.shape[1] != g.shape[1]:
        raise ShapeError(f"feature dims differ: {p.shape[1]} vs {g.shape[1]}")
    delta = np.abs(p[:, None, :] - g[None, :, :])
    return -(delta @ matcher.w + matcher.b)


def majority_baseline(attrs: np.ndarray, attr_names: tuple,
                      train_mask: np.ndarray) -> dict:
    """Held-out accuracy of always predicting the most common train value."""
    attrs = np.asarray(attrs)
    train_mask = np.asarray(train_mask, dtype=bool)
    per_attr = {}
    for col, name in enumerate(attr_names):
        train_vals = attrs[train_mask, col]
        values, counts = np.unique(train_vals, return_counts=True)
        winner = values[np.argmax(counts)]
        per_attr[name] = float(np.mean(attrs[~train_mask, col] == winner))
    return per_attr


def attribute_probe(features: np.ndarray, attrs: np.ndarray,
                    attr_names: tuple, train_mask: np.ndarray, *,
                    lr: float = 0.1, iters: int = 300,
                    l2: float = 1e-3) -> tuple[dict, float]:
    """Train one linear classifier per attribute on the masked-in rows
    and report held-out accuracy.

    The caller is responsible for making `train_mask` identity-disjoint
    from its complement.  An attribute that is constant across the
    training rows cannot be probed; it is skipped with a warning and a
    NaN entry, and excluded from the mean.
    """
    features = np.asarray(features, dtype=np.float64)
    attrs = np.asarray(attrs)
    train_mask = np.asarray(train_mask, dtype=bool)
    if features.shape[0] != attrs.shape[0] or attrs.shape[1] != len(attr_names):
        raise ShapeError(
            f"features {features.shape}, attrs {attrs.shape}, "
            f"{len(attr_names)} names do not line up")
    if not train_mask.any() or train_mask.all():
        raise ContractError("train mask must split the rows in two")

    per_attr: dict[str, float] = {}
    kept = []
    for col, name in enumerate(attr_names):
        train_vals = attrs[train_mask, col]
        if len(np.unique(train_vals)) < 2:
            warnings.warn(
                f"attribute {name!r} is constant across the training "
                f"identities; probe skipped")
            per_attr[name] = float("nan")
            continue
        n_classes = int(attrs[:, col].max()) + 1
        w, b = _fit_softmax(features[train_mask], train_vals, n_classes,
                            lr=lr, iters=iters, l2=l2)
        logits = features[~train_mask] @ w + b
        pred = np.argmax(logits, axis=1)
        acc = float(np.mean(pred == attrs[~train_mask, col]))
        per_attr[name] = acc
        kept.append(acc)
    if not kept:
        raise ContractError("every attribute was constant; nothing to probe")
    return per_attr, float(np.mean(kept))


# ---------------------------------------------------------------------------
# report output


def report_csv_text(report: EvalReport) -> str:
    header = ["feature", "config_digest"] \
        + [f"cmc@{r}" for r in report.ranks] + ["mAP"]
    row = [report.feature_kind, report.config_digest] \
        + [repr(float(v)) for v in report.cmc_values] \
        + [repr(float(report.mean_ap))]
    return ",".join(header) + "\n" + ",".join(row) + "\n"


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(report_csv_text(report))


def format_report_text(report: EvalReport) -> str:
    lines = [
        f"feature   : {report.feature_kind}",
        f"digest    : {report.config_digest}",
        f"queries   : {len(report.per_query_ap)}",
    ]
    for r, v in zip(report.ranks, report.cmc_values):
        lines.append(f"CMC@{r:<5} : {v:.6f}")
    lines.append(f"mAP       : {report.mean_ap:.6f}")
    return "\n".join(lines)
