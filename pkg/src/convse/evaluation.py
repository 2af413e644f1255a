"""Cross-modal Recall@K, fold averaging and multi-run aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .data import PairedDataset
from .errors import ConfigError, DataError, ShapeError
from .model import EmbeddingNetwork, embed_images, embed_texts
from .numerics import row_l2_normalize

METRICS = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10")
KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    rsum: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "rsum", float(sum(getattr(self, m) for m in METRICS)))

    def values(self) -> list[float]:
        return [getattr(self, m) for m in METRICS]

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_mapping(S: np.ndarray, cap_to_img) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeError(f"similarity matrix must be 2-D, got {S.shape}")
    owner = np.asarray(cap_to_img, dtype=np.int64)
    if owner.shape != (S.shape[1],):
        raise ShapeError(f"need one image index per caption column ({S.shape[1]}), got {owner.shape}")
    bad = np.flatnonzero((owner < 0) | (owner >= S.shape[0]))
    if bad.size:
        raise DataError(f"caption column {int(bad[0])} maps to no valid image row")
    return owner


def _best_positive_rank(S: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """0-based rank of the best-placed positive in each row.

    Rows are ordered by descending score with ties broken by lower column
    index, so the best positive is the highest-scoring one, lowest index first.
    """
    cols = np.arange(S.shape[1])
    best = np.max(np.where(positive, S, -np.inf), axis=1)
    at_best = positive & (S == best[:, None])
    first = np.argmax(at_best, axis=1)
    above = (S > best[:, None]).sum(axis=1)
    tied_before = ((S == best[:, None]) & (cols[None, :] < first[:, None])).sum(axis=1)
    return above + tied_before


def i2t_ranks(S, cap_to_img) -> np.ndarray:
    owner = _check_mapping(S, cap_to_img)
    S = np.asarray(S, dtype=np.float64)
    positive = owner[None, :] == np.arange(S.shape[0])[:, None]
    if not positive.any(axis=1).all():
        raise DataError("every image query needs at least one caption")
    return _best_positive_rank(S, positive)


def t2i_ranks(S, cap_to_img) -> np.ndarray:
    owner = _check_mapping(S, cap_to_img)
    S = np.asarray(S, dtype=np.float64)
    positive = np.arange(S.shape[0])[None, :] == owner[:, None]
    return _best_positive_rank(S.T, positive)


def _percent_within(ranks: np.ndarray, k: int) -> float:
    # 100 * hits / n, in that order, so results match a plain counting loop bit for bit
    return 100.0 * int(np.count_nonzero(ranks < k)) / ranks.size


def recall_i2t(S, cap_to_img, k: int) -> float:
    """Percentage of image queries with any of their captions in the top ``k``."""
    return _percent_within(i2t_ranks(S, cap_to_img), k)


def recall_t2i(S, cap_to_img, k: int) -> float:
    """Percentage of caption queries whose image is in the top ``k``."""
    return _percent_within(t2i_ranks(S, cap_to_img), k)


def report_from_similarity(S, cap_to_img) -> RetrievalReport:
    ri = i2t_ranks(S, cap_to_img)
    rt = t2i_ranks(S, cap_to_img)
    i2t = [_percent_within(ri, k) for k in KS]
    t2i = [_percent_within(rt, k) for k in KS]
    return RetrievalReport(*i2t, *t2i)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ua, _ = row_l2_normalize(a, modality="image")
    ub, _ = row_l2_normalize(b, modality="caption")
    return ua @ ub.T


def evaluate(net: EmbeddingNetwork, ds: PairedDataset, split: str | None = "test") -> RetrievalReport:
    """Embed every image and caption of ``split`` and score retrieval both ways.

    ``split=None`` evaluates the whole dataset as given (used for folds).
    """
    view = ds if split is None else ds.split_view(split)
    S = cosine_matrix(embed_images(net, view.images.feats), embed_texts(net, view.captions.feats))
    return report_from_similarity(S, view.cap_img_rows)


def fold_average(reports: list[RetrievalReport]) -> RetrievalReport:
    if not reports:
        raise ConfigError("fold_average needs at least one report")
    means = np.mean([r.values() for r in reports], axis=0)
    return RetrievalReport(*map(float, means))


@dataclass
class RunAggregate:
    runs: list[RetrievalReport]
    mean: RetrievalReport
    std: dict[str, float]
    median_index: int

    @property
    def median(self) -> RetrievalReport:
        return self.runs[self.median_index]


def aggregate_runs(reports: list[RetrievalReport]) -> RunAggregate:
    """Mean, population std and the median-by-rsum run (ties -> lowest run index)."""
    if len(reports) < 2:
        raise ConfigError("aggregate_runs needs at least two runs")
    table = np.array([r.values() + [r.rsum] for r in reports])
    std = dict(zip(METRICS + ("rsum",), map(float, table.std(axis=0))))
    middle = sorted(r.rsum for r in reports)[(len(reports) - 1) // 2]
    median = min(i for i, r in enumerate(reports) if r.rsum == middle)
    return RunAggregate(list(reports), fold_average(reports), std, median)


# -- text emission -----------------------------------------------------------

_HEADER = ("R@1", "R@5", "R@10", "R@1", "R@5", "R@10", "R@sum")


def format_table(rows: list[tuple[str, RetrievalReport]], label: str = "run") -> str:
    """Aligned plain-text table: I2T R@1/5/10, T2I R@1/5/10, R@sum."""
    width = max([len(label)] + [len(str(name)) for name, _ in rows])
    lines = [
        f"{'':{width}}  {'Image-to-Text':^20}  {'Text-to-Image':^20}",
        f"{label:<{width}}  " + " ".join(f"{h:>6}" for h in _HEADER[:3]) + "  "
        + " ".join(f"{h:>6}" for h in _HEADER[3:6]) + f"  {_HEADER[6]:>7}",
    ]
    for name, r in rows:
        v = r.values()
        lines.append(f"{str(name):<{width}}  " + " ".join(f"{x:6.1f}" for x in v[:3]) + "  "
                     + " ".join(f"{x:6.1f}" for x in v[3:]) + f"  {r.rsum:7.1f}")
    return "\n".join(lines) + "\n"


def format_kv(report: RetrievalReport, prefix: str = "") -> str:
    """``name=value`` lines at one decimal, each followed by ``name.raw=`` at full precision."""
    out = []
    for name, value in report.as_dict().items():
        key = f"{prefix}{name}"
        out.append(f"{key}={value:.1f}")
        out.append(f"{key}.raw={value!r}")
    return "\n".join(out) + "\n"


def parse_kv(text: str, prefix: str = "") -> RetrievalReport:
    raw = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        if key.startswith(prefix) and key.endswith(".raw"):
            raw[key[len(prefix):-4]] = float(value)
    try:
        return RetrievalReport(*(raw[m] for m in METRICS))
    except KeyError as exc:
        raise DataError(f"report is missing metric {exc.args[0]}") from None
