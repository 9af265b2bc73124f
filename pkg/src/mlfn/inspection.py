"""Qualitative analysis of the gate units.

Each gate unit produces one scalar per image.  Ranking a dataset by
that scalar and looking at the extremes shows what the unit responds
to; correlating every unit with the ground-truth generating factors
quantifies the same thing without eyeballing montages.  All forward
passes run in eval mode, so results do not depend on batch composition
or dataset order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageSet, ToyReIDDataset, write_ppm
from .errors import ContractError
from .evaluate import extract_features
from .model import MLFNModel


@dataclass
class UnitRanking:
    """Extremes of one gate unit's response over a dataset.

    Indices are dataset row positions, sorted by score descending with
    ties broken by row index, so the ranking is total and reproducible.
    """

    block: int
    unit: int
    top_indices: np.ndarray
    top_scores: np.ndarray
    bottom_indices: np.ndarray
    bottom_scores: np.ndarray


@dataclass
class CorrelationTable:
    """|association| between every gate unit and every attribute."""

    values: np.ndarray
    units: list
    attr_names: tuple
    best_unit: dict


def _signature_matrix(model: MLFNModel, dataset: ToyReIDDataset) -> np.ndarray:
    subset = ImageSet(images=dataset.images, ids=dataset.ids,
                      views=dataset.views,
                      indices=np.arange(len(dataset.ids)))
    return extract_features(model, subset, kind="FS").features


def _unit_column(config, n: int, i: int) -> int:
    if not 1 <= n <= config.n_blocks:
        raise ContractError(
            f"block index {n} outside 1..{config.n_blocks}")
    if not 1 <= i <= config.factor_counts[n - 1]:
        raise ContractError(
            f"unit index {i} outside 1..{config.factor_counts[n - 1]} "
            f"for block {n}")
    return sum(config.factor_counts[:n - 1]) + (i - 1)


def rank_by_unit(model: MLFNModel, dataset: ToyReIDDataset, n: int, i: int,
                 m: int, *, batch_size: int = 64) -> UnitRanking:
    """Sort the dataset by gate unit (n, i) and keep the m extremes.

    Both indices are 1-based.  Requires 2m <= dataset size so the top
    and bottom sets cannot overlap.
    """
    col = _unit_column(model.config, n, i)
    total = len(dataset.ids)
    if m < 1 or 2 * m > total:
        raise ContractError(
            f"m={m} must satisfy 1 <= 2m <= dataset size {total}")
    scores = _signature_matrix(model, dataset)[:, col]
    order = np.argsort(-scores, kind="stable")
    top = order[:m]
    bottom = order[total - m:]
    return UnitRanking(block=n, unit=i,
                       top_indices=top, top_scores=scores[top],
                       bottom_indices=bottom, bottom_scores=scores[bottom])


def _pearson_abs(scores: np.ndarray, indicator: np.ndarray) -> float:
    s = scores - scores.mean()
    b = indicator - indicator.mean()
    denom = np.sqrt((s * s).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return abs(float((s * b).sum() / denom))


def unit_attribute_association(scores: np.ndarray,
                               values: np.ndarray) -> float:
    """Association between a unit's scores and a discrete attribute.

    Point-biserial correlation against each one-vs-rest indicator, then
    the maximum over classes.  For a binary attribute the two classes
    give the same magnitude, so this reduces to plain point-biserial.
    A constant unit (or constant attribute) scores 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    values = np.asarray(values)
    best = 0.0
    for cls in np.unique(values):
        indicator = (values == cls).astype(np.float64)
        best = max(best, _pearson_abs(scores, indicator))
    return best


def correlate_units(model: MLFNModel,
                    dataset: ToyReIDDataset) -> CorrelationTable:
    """Associate every gate unit with every ground-truth attribute."""
    signatures = _signature_matrix(model, dataset)
    per_image_attrs = dataset.attrs[dataset.ids]
    config = model.config
    units = [(n, i)
             for n in range(1, config.n_blocks + 1)
             for i in range(1, config.factor_counts[n - 1] + 1)]
    values = np.zeros((len(units), len(dataset.attr_names)))
    for row, (n, i) in enumerate(units):
        scores = signatures[:, row]
        for col in range(len(dataset.attr_names)):
            values[row, col] = unit_attribute_association(
                scores, per_image_attrs[:, col])
    best = {name: units[int(np.argmax(values[:, col]))]
            for col, name in enumerate(dataset.attr_names)}
    return CorrelationTable(values=values, units=units,
                            attr_names=dataset.attr_names, best_unit=best)


def _montage_row(images: np.ndarray) -> np.ndarray:
    return np.concatenate(list(images), axis=2)


def export_report(rankings: list, dataset: ToyReIDDataset, out_dir) -> None:
    """Write one directory per ranking: top/bottom montages plus scores.

    Each montage is a single row of tiles, so a unit directory holds
    2m tiles across its two files.  Output depends only on the inputs;
    re-exporting an identical ranking reproduces identical bytes.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for ranking in rankings:
        unit_dir = root / f"{ranking.block}_{ranking.unit}"
        unit_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(unit_dir / "top.ppm",
                  _montage_row(dataset.images[ranking.top_indices]))
        write_ppm(unit_dir / "bottom.ppm",
                  _montage_row(dataset.images[ranking.bottom_indices]))
        with open(unit_dir / "scores.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["set", "rank", "image_index", "identity",
                             "score"])
            for label, idxs, scores in (
                    ("top", ranking.top_indices, ranking.top_scores),
                    ("bottom", ranking.bottom_indices,
                     ranking.bottom_scores)):
                for rank, (idx, score) in enumerate(zip(idxs, scores),
                                                    start=1):
                    writer.writerow([label, rank, int(idx),
                                     int(dataset.ids[idx]),
                                     repr(float(score))])


def write_correlations_csv(table: CorrelationTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "unit"] + list(table.attr_names))
        for row, (n, i) in enumerate(table.units):
            writer.writerow([n, i]
                            + [repr(float(v)) for v in table.values[row]])
