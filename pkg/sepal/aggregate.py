# aggregate.py
"""
Composers that turn several metric rankings into one selection: the metric
agnostic round robin, the voting ablation and the most-classes-first baseline.
"""

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

from .exceptions import UsageError
from .metrics import MetricId, Ranking

# Round-robin turn order when none is configured
DEFAULT_AG_METRICS = (
    MetricId.UNC, MetricId.ENT, MetricId.MM, MetricId.SEPMAX, MetricId.SEPMIN, MetricId.SEPSUM,
)


@dataclass(frozen=True)
class SelectionRequest:
    rankings: Tuple[Ranking, ...]
    n: int

    def __post_init__(self):
        object.__setattr__(self, "rankings", tuple(self.rankings))
        if self.n < 1:
            raise UsageError(f"Number of samples to select must be >= 1, got {self.n}")


@dataclass
class SelectionResult:
    sample_ids: List[str]
    contributions: Dict[str, int] = field(default_factory=dict)
    vote_histogram: Dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.sample_ids)


def _label(ranking: Ranking) -> str:
    return MetricId.parse(ranking.metric_id).value


def metric_agnostic(req: SelectionRequest) -> SelectionResult:
    """
    Round robin over the rankings in request order. Each turn moves that metric's
    cursor one step and adds the sample unless it is already chosen. Stops once n
    samples are chosen or every ranking is exhausted.
    """
    chosen: List[str] = []
    seen = set()
    cursors = [0] * len(req.rankings)
    contributions = {_label(r): 0 for r in req.rankings}

    while len(chosen) < req.n:
        advanced = False
        for t, ranking in enumerate(req.rankings):
            if cursors[t] < len(ranking):
                sample_id = ranking.sample_ids[cursors[t]]
                cursors[t] += 1
                advanced = True
                if sample_id not in seen:
                    seen.add(sample_id)
                    chosen.append(sample_id)
                    contributions[_label(ranking)] += 1
            if len(chosen) >= req.n:
                break
        if not advanced:
            break
    return SelectionResult(chosen, contributions)


def vote_select(rankings: Sequence[Ranking], n: int) -> SelectionResult:
    """
    Every metric votes for the samples in its top-n; the n samples with the most
    votes win, ties by ascending sample id.
    """
    req = SelectionRequest(tuple(rankings), n)
    candidate_sets = [(_label(r), set(r.sample_ids[:req.n])) for r in req.rankings]

    votes = Counter()
    for _, candidates in candidate_sets:
        votes.update(candidates)

    ordered = sorted(votes, key=lambda sid: (-votes[sid], sid))
    chosen = ordered[:req.n]

    contributions = {label: 0 for label, _ in candidate_sets}
    for label, candidates in candidate_sets:
        contributions[label] += sum(1 for sid in chosen if sid in candidates)
    histogram = dict(sorted(Counter(votes.values()).items()))
    return SelectionResult(chosen, contributions, histogram)


def adversarial_select(label_counts: Mapping[str, int], n: int) -> SelectionResult:
    """Samples with the most ground-truth classes first, ties by ascending sample id."""
    if n < 1:
        raise UsageError(f"Number of samples to select must be >= 1, got {n}")
    ordered = sorted(label_counts, key=lambda sid: (-int(label_counts[sid]), sid))
    return SelectionResult(ordered[:n])
