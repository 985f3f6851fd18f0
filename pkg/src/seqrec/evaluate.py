"""Leave-one-out ranking evaluation.

Each user's held-out item is ranked against popularity-sampled negatives
drawn from outside their history. Ties rank pessimistically: the target
falls below every candidate with an equal score. Candidate sets depend only
on (seed, split, user), so two scorers evaluated under the same seed see
identical candidates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, LeaveOneOutSplit, popularity_negatives
from .errors import ContractError
from .model import TransformerRecommender


def rank_target(scores, target_index: int) -> int:
    """1-based rank of the target among all candidates, ties pessimistic."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or not (0 <= target_index < arr.size):
        raise ContractError(
            f"rank_target needs a 1-d score vector containing target_index, "
            f"got shape {arr.shape} and index {target_index}"
        )
    if not np.all(np.isfinite(arr)):
        raise ContractError("scores must be finite")
    target = arr[target_index]
    greater = int((arr > target).sum())
    tied = int((arr == target).sum()) - 1  # exclude the target itself
    return 1 + greater + tied


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr(rank: int) -> float:
    return 1.0 / rank


@dataclass
class RankedCase:
    user: int
    candidates: list[int]   # target first, then the sampled negatives
    scores: np.ndarray
    rank: int

    @property
    def target(self) -> int:
        return self.candidates[0]


@dataclass
class EvalReport:
    metrics: dict[str, float]
    cases: list[RankedCase] = field(default_factory=list)
    split_name: str = "test"
    num_negatives: int = 100

    def to_json(self) -> str:
        payload = {
            "split": self.split_name,
            "num_negatives": self.num_negatives,
            "num_users": len(self.cases),
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write_ranks_tsv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("user\trank\n")
            for case in self.cases:
                fh.write(f"{case.user}\t{case.rank}\n")


class ModelScorer:
    """Scores candidates with a trained model at the appended mask slot."""

    def __init__(self, model: TransformerRecommender, chunk: int = 256):
        self.model = model
        self.chunk = chunk

    def score_candidates(self, histories, candidate_lists):
        logits = self.model.score_histories(histories, chunk=self.chunk)
        return [
            logits[i, np.asarray(cands, dtype=np.int64) - 1]
            for i, cands in enumerate(candidate_lists)
        ]


class PopScorer:
    """User-independent baseline: score items by interaction count."""

    def __init__(self, dataset: InteractionDataset):
        self.popularity = dataset.popularity.astype(np.float64)

    def score_candidates(self, histories, candidate_lists):
        return [
            self.popularity[np.asarray(cands, dtype=np.int64)]
            for cands in candidate_lists
        ]


def pop_scorer(dataset: InteractionDataset) -> PopScorer:
    return PopScorer(dataset)


def evaluate(
    scorer,
    split: LeaveOneOutSplit,
    dataset: InteractionDataset,
    *,
    seed: int,
    split_name: str = "test",
    num_negatives: int = 100,
    k_values: tuple[int, ...] = (1, 5, 10),
) -> EvalReport:
    """Rank each user's held-out item against sampled negatives.

    split_name "test" scores the final item given the training prefix plus
    the validation item; "val" scores the validation item given the prefix
    alone. NDCG@1 equals HR@1 identically: a rank-1 hit scores 1/log2(2).
    """
    if split_name not in ("val", "test"):
        raise ContractError(f"split_name must be 'val' or 'test', got {split_name!r}")
    num_users = len(split.train)
    histories = []
    targets = []
    for u in range(num_users):
        if split_name == "test":
            histories.append(split.train[u] + [split.val[u]])
            targets.append(split.test[u])
        else:
            histories.append(list(split.train[u]))
            targets.append(split.val[u])
    candidate_lists = []
    for u in range(num_users):
        negatives = popularity_negatives(
            dataset, u, num_negatives, seed=seed, split_name=split_name,
        )
        candidate_lists.append([targets[u]] + negatives)
    score_lists = scorer.score_candidates(histories, candidate_lists)

    ks = tuple(sorted(set(k_values)))
    cases = []
    hr_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    mrr_sum = 0.0
    for u in range(num_users):
        scores = np.asarray(score_lists[u], dtype=np.float64)
        rank = rank_target(scores, 0)
        cases.append(RankedCase(user=u, candidates=candidate_lists[u],
                                scores=scores, rank=rank))
        for k in ks:
            hr_sums[k] += hr_at_k(rank, k)
            ndcg_sums[k] += ndcg_at_k(rank, k)
        mrr_sum += mrr(rank)

    metrics: dict[str, float] = {}
    for k in ks:
        metrics[f"HR@{k}"] = hr_sums[k] / num_users
        metrics[f"NDCG@{k}"] = ndcg_sums[k] / num_users
    metrics["MRR"] = mrr_sum / num_users
    return EvalReport(
        metrics=metrics, cases=cases, split_name=split_name,
        num_negatives=num_negatives,
    )
