"""
Elo rating kernel.

Expected score:  E_a = 1 / (1 + 10^((R_b - R_a) / 400))
Rating change:   R_a' = R_a + K * (S_a - E_a)

Every function here is pure; callers own the rating maps.
"""

import math
from itertools import combinations
from typing import Dict, Mapping, Tuple

from errors import ArityError, InvalidRatingError

INITIAL_RATING = 1500.0
DEFAULT_K_FACTOR = 32.0
DEFAULT_CLONE_PENALTY = 200.0

WIN = 1.0
TIE = 0.5
LOSS = 0.0
OUTCOMES = (WIN, TIE, LOSS)

# Relative tolerance under which two continuous mean scores are a tie.
TIE_REL_TOL = 1e-9


def _check_rating(value: float) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise InvalidRatingError(f"Rating must be a finite real, got {value!r}.")
    return float(value)


def _check_k(k: float) -> float:
    if isinstance(k, bool) or not isinstance(k, (int, float)) or not math.isfinite(k) or k <= 0:
        raise InvalidRatingError(f"K-factor must be a positive real, got {k!r}.")
    return float(k)


def expected_score(r_a: float, r_b: float) -> float:
    """Probability-like expected score of a against b."""
    r_a = _check_rating(r_a)
    r_b = _check_rating(r_b)
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def update_pair(r_a: float, r_b: float, outcome_a: float,
                k: float = DEFAULT_K_FACTOR) -> Tuple[float, float]:
    """
    Update one pair of ratings after a single comparison.
    b's outcome is 1 - outcome_a, so the pair is zero-sum.
    """
    if outcome_a not in OUTCOMES:
        raise InvalidRatingError(f"Outcome must be one of win/tie/loss (1, 0.5, 0), got {outcome_a!r}.")
    k = _check_k(k)
    delta = k * (outcome_a - expected_score(r_a, r_b))
    return r_a + delta, r_b - delta


def outcome_from_means(mean_a: float, mean_b: float) -> float:
    """Outcome for a: win on a strictly larger mean, tie on equal means."""
    if mean_a == mean_b or math.isclose(mean_a, mean_b, rel_tol=TIE_REL_TOL, abs_tol=0.0):
        return TIE
    return WIN if mean_a > mean_b else LOSS


def apply_round(ratings: Mapping[str, float], mean_scores: Mapping[str, float],
                k: float = DEFAULT_K_FACTOR) -> Dict[str, float]:
    """
    Pairwise decomposition of one tournament round.

    Expected scores come from the pre-round ratings and all deltas are applied
    together. Pairs are visited in agent-id order so the float sums do not
    depend on how the caller ordered its maps.
    """
    agents = sorted(mean_scores)
    if len(agents) < 2:
        raise ArityError(f"A round needs at least 2 agents, got {len(agents)}.")
    missing = [a for a in agents if a not in ratings]
    if missing:
        raise ArityError(f"No rating for agents: {', '.join(missing)}.")
    k = _check_k(k)

    deltas = {a: 0.0 for a in agents}
    for a, b in combinations(agents, 2):
        s_a = outcome_from_means(mean_scores[a], mean_scores[b])
        delta = k * (s_a - expected_score(ratings[a], ratings[b]))
        deltas[a] += delta
        deltas[b] -= delta

    updated = dict(ratings)
    for a in mean_scores:
        updated[a] = ratings[a] + deltas[a]
    return updated


def apply_clone_penalty(rating: float, penalty: float = DEFAULT_CLONE_PENALTY) -> float:
    """One-time debit for an agent whose predictions copy a competitor's."""
    rating = _check_rating(rating)
    if penalty < 0:
        raise InvalidRatingError(f"Clone penalty must be non-negative, got {penalty!r}.")
    return rating - penalty
