"""Intrinsic quality scores: MTLD lexical diversity, min-max scaling and the composite average."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

from .corpus import count_tokens

MTLD_THRESHOLD = 0.72
MTLD_CAP = 200.0


@dataclass(frozen=True)
class MetricBounds:
    x_min: float
    x_max: float

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError(f"bounds need x_max > x_min, got ({self.x_min}, {self.x_max})")


DEFAULT_BOUNDS: Dict[str, MetricBounds] = {
    "mtld": MetricBounds(0.0, 200.0),
    "nat": MetricBounds(0.0, 1.0),
    "coh": MetricBounds(0.0, 1.0),
    "und": MetricBounds(0.0, 1.0),
    "ind": MetricBounds(0.0, 5.0),
    "deb": MetricBounds(0.0, 3.0),
}


@dataclass(frozen=True)
class ScoreRow:
    mtld: float
    nat: float
    coh: float
    und: float
    ind: float
    deb: float

    def __post_init__(self):
        for name in ("mtld", "nat", "coh", "und", "ind", "deb"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name}={v} outside [0, 100]")


@dataclass(frozen=True)
class CompositeScore:
    s_uni: float
    s_rew: float
    s_avg: float


def mtld_tokens(text: str) -> List[str]:
    """Case-fold, drop punctuation codepoints, split on whitespace."""
    folded = text.casefold()
    stripped = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in folded)
    return stripped.split()


def _mtld_pass(tokens: Sequence[str], threshold: float) -> float:
    factors = 0.0
    types: set = set()
    count = 0
    ttr = 1.0
    for tok in tokens:
        count += 1
        types.add(tok)
        ttr = len(types) / count
        if ttr < threshold:
            factors += 1
            types = set()
            count = 0
            ttr = 1.0
    if count:
        factors += (1 - ttr) / (1 - threshold)
    if factors == 0:
        return MTLD_CAP
    return len(tokens) / factors


def mtld_from_tokens(tokens: Sequence[str], threshold: float = MTLD_THRESHOLD) -> float:
    if not tokens:
        return 0.0
    forward = _mtld_pass(tokens, threshold)
    backward = _mtld_pass(tokens[::-1], threshold)
    return (forward + backward) / 2


def mtld(text: str, threshold: float = MTLD_THRESHOLD) -> float:
    """Bidirectional MTLD.

    A direction that never closes a factor (every token distinct) scores
    ``MTLD_CAP`` instead of dividing by zero.
    """
    return mtld_from_tokens(mtld_tokens(text), threshold)


def normalize(x: float, bounds: MetricBounds) -> float:
    scaled = (x - bounds.x_min) / (bounds.x_max - bounds.x_min) * 100
    return min(100.0, max(0.0, scaled))


def aggregate(row: ScoreRow) -> CompositeScore:
    s_uni = (row.nat + row.coh + row.und) / 3
    s_rew = (row.ind + row.deb) / 2
    return CompositeScore(s_uni, s_rew, (row.mtld + s_uni + s_rew) / 3)


def dataset_stats(answers: Iterable[str], counter: Callable[[str], int] = count_tokens) -> Tuple[int, float, int]:
    lengths = [counter(a) for a in answers]
    if not lengths:
        return 0, 0, 0
    return len(lengths), sum(lengths) / len(lengths), max(lengths)


def score_dataset(answers: Sequence[str], external: Sequence[Dict[str, float]] = (),
                  bounds: Dict[str, MetricBounds] = DEFAULT_BOUNDS) -> Dict[str, float]:
    """Dataset-level report row.

    MTLD is computed per answer and averaged; external scorer outputs
    (nat, coh, und, ind, deb) are averaged raw and then scaled. Metrics with
    no external values are reported as ``None`` and the composite is
    omitted.
    """
    n, avg_tokens, max_tokens = dataset_stats(answers)
    out: Dict[str, float] = {"samples": n, "avg_tokens": avg_tokens, "max_tokens": max_tokens}
    raw_mtld = sum(mtld(a) for a in answers) / n if n else 0.0
    out["mtld"] = normalize(raw_mtld, bounds["mtld"])
    complete = True
    for name in ("nat", "coh", "und", "ind", "deb"):
        vals = [float(e[name]) for e in external if e.get(name) is not None]
        if vals:
            out[name] = normalize(sum(vals) / len(vals), bounds[name])
        else:
            out[name] = None
            complete = False
    if complete:
        comp = aggregate(ScoreRow(out["mtld"], out["nat"], out["coh"], out["und"], out["ind"], out["deb"]))
        out.update(s_uni=comp.s_uni, s_rew=comp.s_rew, s_avg=comp.s_avg)
    else:
        out.update(s_uni=None, s_rew=None, s_avg=None)
    return out
