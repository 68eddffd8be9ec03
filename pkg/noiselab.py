"""
Selection-noise lab.

How often does the truly best of a few near-equal agents come out on top?
Single-round quantities (tie rate, top-1 probability) are summed exactly over
binomial outcomes. Multi-round quantities (Elo accumulation versus a
single-elimination chain) are Monte Carlo.

Monte Carlo trials run in fixed blocks of BLOCK_SIZE. Each block draws its own
generator from (seed, block index) and one uniform per (trial, agent, task)
for the whole budget; round r uses tasks [r*n, (r+1)*n). Every depth/breadth
split of the same budget therefore sees the same task outcomes, and results do
not depend on the worker count.
"""

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binom

from errors import ArityError, ConfigError
from rating import DEFAULT_K_FACTOR, INITIAL_RATING

logger = logging.getLogger(__name__)

DEFAULT_ACCURACIES = (0.70, 0.69, 0.68)
DEFAULT_TRIALS = 50_000
BLOCK_SIZE = 1_000

TOP1_STRICT = "strict"
TOP1_RANDOM_TIE = "random_tie"
TOP1_INCLUSIVE = "inclusive"
TOP1_MODES = (TOP1_STRICT, TOP1_RANDOM_TIE, TOP1_INCLUSIVE)

BRACKET_CHAIN = "champion_chain"
BRACKET_FINAL_ROUND = "final_round"
BRACKETS = (BRACKET_CHAIN, BRACKET_FINAL_ROUND)
BRACKET_NOTES = {
    BRACKET_CHAIN: "champion-defense chain: random first champion, challengers rotate, "
                   "the champion keeps the title only on a strictly higher score",
    BRACKET_FINAL_ROUND: "final round only: the best agent must strictly outscore all others "
                         "in the last round",
}

# Reference values for accuracies 0.70/0.69/0.68 at a 600-evaluation
# budget: (rounds, n) -> (single elimination, Elo).
REFERENCE_BUDGET = 600
REFERENCE_TABLE = {
    (10, 60): (0.364, 0.522),
    (20, 30): (0.327, 0.495),
    (30, 20): (0.305, 0.470),
    (60, 10): (0.267, 0.437),
}
REFERENCE_TIE_N20 = 0.197
REFERENCE_TOP1_N20 = 0.450


def _check_probabilities(values: Sequence[float]) -> Tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ConfigError(f"Accuracies must lie in [0, 1], got {values}.")
    return values


@dataclass(frozen=True)
class NoiseLabConfig:
    accuracies: Tuple[float, ...] = DEFAULT_ACCURACIES
    n: int = 20
    rounds: int = 30
    k_factor: float = DEFAULT_K_FACTOR
    trials: int = DEFAULT_TRIALS
    rng_seed: int = 0
    workers: int = 1
    bracket: str = BRACKET_CHAIN

    def __post_init__(self):
        object.__setattr__(self, "accuracies", _check_probabilities(self.accuracies))
        if len(self.accuracies) < 2:
            raise ConfigError("At least two agents are needed.")
        if self.n < 1 or self.rounds < 1 or self.trials < 1 or self.workers < 1:
            raise ConfigError("n, rounds, trials and workers must be positive.")
        if not self.k_factor > 0:
            raise ConfigError("k_factor must be positive.")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be non-negative.")
        if self.bracket not in BRACKETS:
            raise ConfigError(f"bracket must be one of {', '.join(BRACKETS)}.")

    @property
    def budget(self) -> int:
        return self.n * self.rounds

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.accuracies))


@dataclass(frozen=True)
class Estimate:
    p: float
    se: float
    trials: int

    @classmethod
    def from_counts(cls, successes: int, trials: int) -> "Estimate":
        p = successes / trials
        return cls(p, math.sqrt(p * (1.0 - p) / trials), trials)


# ---- exact single-round probabilities ----------------------------------------

def binomial_pmf(n: int, p: float) -> np.ndarray:
    """P[Bin(n, p) = k] for k = 0..n."""
    return binom.pmf(np.arange(n + 1), n, p)


def exact_tie_probability(n: int, p1: float, p2: float) -> float:
    """Probability that two agents score the same number of n tasks."""
    if n < 1:
        raise ConfigError("n must be at least 1.")
    p1, p2 = _check_probabilities((p1, p2))
    return min(1.0, math.fsum(binomial_pmf(n, p1) * binomial_pmf(n, p2)))


def exact_top1_probability(n: int, accuracies: Sequence[float], mode: str = TOP1_STRICT) -> float:
    """
    Probability that the first-listed agent ranks #1 on one round of n tasks.

    strict:      it must outscore every other agent.
    random_tie:  tied leaders share first place uniformly.
    inclusive:   a tie at the top still counts as ranked #1.
    """
    if n < 1:
        raise ConfigError("n must be at least 1.")
    if mode not in TOP1_MODES:
        raise ConfigError(f"mode must be one of {', '.join(TOP1_MODES)}.")
    accuracies = _check_probabilities(accuracies)
    if len(accuracies) < 2:
        raise ArityError("At least two accuracies are needed.")

    first = binomial_pmf(n, accuracies[0])
    others = [binomial_pmf(n, p) for p in accuracies[1:]]
    below = [np.concatenate(([0.0], np.cumsum(pmf)[:-1])) for pmf in others]

    terms = []
    for x in range(n + 1):
        if first[x] == 0.0:
            continue
        if mode == TOP1_STRICT:
            share = math.prod(b[x] for b in below)
        elif mode == TOP1_INCLUSIVE:
            share = math.prod(b[x] + pmf[x] for b, pmf in zip(below, others))
        else:
            # coefficient t: exactly t other agents tie at x, the rest score lower
            poly = np.array([1.0])
            for b, pmf in zip(below, others):
                poly = np.convolve(poly, [b[x], pmf[x]])
            share = math.fsum(c / (t + 1) for t, c in enumerate(poly))
        terms.append(first[x] * share)
    return min(1.0, max(0.0, math.fsum(terms)))


# ---- Monte Carlo ---------------------------------------------------------------

def elo_round(ratings: np.ndarray, scores: np.ndarray, k: float) -> np.ndarray:
    """
    Vectorised batch Elo round over many trials: ratings and scores are
    (trials, agents). Mirrors rating.apply_round.
    """
    delta = np.zeros_like(ratings)
    for i, j in combinations(range(ratings.shape[1]), 2):
        outcome = np.where(scores[:, i] > scores[:, j], 1.0,
                           np.where(scores[:, i] == scores[:, j], 0.5, 0.0))
        expected = 1.0 / (1.0 + 10.0 ** ((ratings[:, j] - ratings[:, i]) / 400.0))
        d = k * (outcome - expected)
        delta[:, i] += d
        delta[:, j] -= d
    return ratings + delta


def _strictly_best(values: np.ndarray, best: int) -> np.ndarray:
    others = np.delete(values, best, axis=1)
    return values[:, best] > others.max(axis=1)


def _elo_successes(scores: np.ndarray, k: float, best: int) -> int:
    trials, agents, rounds = scores.shape
    ratings = np.full((trials, agents), INITIAL_RATING)
    for r in range(rounds):
        ratings = elo_round(ratings, scores[:, :, r], k)
    return int(np.count_nonzero(_strictly_best(ratings, best)))


def _chain_successes(scores: np.ndarray, rng: np.random.Generator, best: int) -> int:
    trials, agents, rounds = scores.shape
    rows = np.arange(trials)
    start = rng.integers(agents, size=trials)
    # column 0 holds the champion, the rest is the challenger queue
    order = (np.arange(agents)[None, :] + start[:, None]) % agents
    for r in range(rounds):
        champion, challenger = order[:, 0], order[:, 1]
        keeps = scores[rows, champion, r] > scores[rows, challenger, r]
        order = np.column_stack([
            np.where(keeps, champion, challenger),
            order[:, 2:],
            np.where(keeps, challenger, champion),
        ])
    return int(np.count_nonzero(order[:, 0] == best))


def _final_round_successes(scores: np.ndarray, best: int) -> int:
    return int(np.count_nonzero(_strictly_best(scores[:, :, -1], best)))


def _simulate_block(args: Tuple) -> Tuple[int, int]:
    """(Elo successes, single-elimination successes) for one block of trials."""
    accuracies, n, rounds, k, seed, block, size, bracket = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, block]))
    acc = np.asarray(accuracies)
    correct = rng.random((size, len(acc), rounds * n)) < acc[None, :, None]
    scores = correct.reshape(size, len(acc), rounds, n).sum(axis=3)
    best = int(np.argmax(acc))
    elo = _elo_successes(scores, k, best)
    if bracket == BRACKET_CHAIN:
        single = _chain_successes(scores, rng, best)
    else:
        single = _final_round_successes(scores, best)
    return elo, single


def _simulate(config: NoiseLabConfig) -> Tuple[Estimate, Estimate]:
    blocks = []
    for block, start in enumerate(range(0, config.trials, BLOCK_SIZE)):
        size = min(BLOCK_SIZE, config.trials - start)
        blocks.append((config.accuracies, config.n, config.rounds, config.k_factor,
                       config.rng_seed, block, size, config.bracket))
    if config.workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_simulate_block, blocks))
    else:
        results = [_simulate_block(b) for b in blocks]
    elo = sum(r[0] for r in results)
    single = sum(r[1] for r in results)
    logger.debug("Simulated %d trials of %d x %d: elo=%d single=%d",
                 config.trials, config.rounds, config.n, elo, single)
    return Estimate.from_counts(elo, config.trials), Estimate.from_counts(single, config.trials)


def elo_ranking_accuracy(config: NoiseLabConfig) -> Estimate:
    """P(true-best agent holds the strictly highest Elo rating after all rounds)."""
    return _simulate(config)[0]


def single_elim_accuracy(config: NoiseLabConfig) -> Estimate:
    """P(true-best agent ends as champion under the configured bracket)."""
    return _simulate(config)[1]


# ---- budget sweeps ---------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    rounds: int
    n: int
    single_elim: Estimate
    elo: Estimate


def parse_splits(text: str) -> List[Tuple[int, int]]:
    """'10x60,20x30' -> [(10, 60), (20, 30)] as (rounds, n)."""
    splits = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            rounds, n = (int(part) for part in item.split("x"))
        except ValueError:
            raise ConfigError(f"Bad split {item!r}; expected ROUNDSxN.")
        splits.append((rounds, n))
    if not splits:
        raise ConfigError("No splits given.")
    return splits


def budget_sweep(budget: int, splits: Sequence[Tuple[int, int]],
                 accuracies: Sequence[float] = DEFAULT_ACCURACIES, trials: int = DEFAULT_TRIALS,
                 rng_seed: int = 0, k_factor: float = DEFAULT_K_FACTOR, workers: int = 1,
                 bracket: str = BRACKET_CHAIN) -> List[SweepRow]:
    """One row per (rounds, n) split of the budget, both estimators side by side."""
    for rounds, n in splits:
        if rounds * n != budget:
            raise ConfigError(f"Split {rounds}x{n} uses {rounds * n} evaluations, not the budget {budget}.")
    rows = []
    for rounds, n in splits:
        config = NoiseLabConfig(tuple(accuracies), n, rounds, k_factor, trials, rng_seed, workers, bracket)
        elo, single = _simulate(config)
        rows.append(SweepRow(rounds, n, single, elo))
    return rows


def reference_deviations(rows: Sequence[SweepRow], budget: int,
                         accuracies: Sequence[float]) -> List[str]:
    """Differences from the reference table, when the setup matches it."""
    if budget != REFERENCE_BUDGET or tuple(accuracies) != DEFAULT_ACCURACIES:
        return []
    notes = []
    for row in rows:
        reference = REFERENCE_TABLE.get((row.rounds, row.n))
        if reference is None:
            continue
        single_ref, elo_ref = reference
        notes.append(f"{row.rounds}x{row.n}: single_elim {row.single_elim.p:.3f} vs {single_ref:.3f} "
                     f"({row.single_elim.p - single_ref:+.3f}), elo {row.elo.p:.3f} vs {elo_ref:.3f} "
                     f"({row.elo.p - elo_ref:+.3f})")
    return notes


COLUMNS = ("rounds", "n", "single_elim", "single_elim_se", "elo", "elo_se")


def _row_values(row: SweepRow) -> List[str]:
    return [str(row.rounds), str(row.n), f"{row.single_elim.p:.4f}", f"{row.single_elim.se:.4f}",
            f"{row.elo.p:.4f}", f"{row.elo.se:.4f}"]


def render_sweep_text(rows: Sequence[SweepRow], bracket: str = BRACKET_CHAIN,
                      deviations: Optional[Sequence[str]] = None) -> str:
    table = [list(COLUMNS)] + [_row_values(r) for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(COLUMNS))]
    lines = [f"# single elimination: {BRACKET_NOTES[bracket]}"]
    lines += ["  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in table]
    if deviations:
        lines.append("# deviation from the reference table:")
        lines += [f"#   {d}" for d in deviations]
    return "\n".join(lines)


def render_sweep_csv(rows: Sequence[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow(_row_values(row))
    return buffer.getvalue()


def exact_summary(n: int, accuracies: Sequence[float]) -> Dict[str, float]:
    """Tie rate of the top two agents and top-1 probability of the first, in every mode."""
    accuracies = _check_probabilities(accuracies)
    if len(accuracies) < 2:
        raise ArityError("At least two accuracies are needed.")
    summary = {"tie": exact_tie_probability(n, accuracies[0], accuracies[1])}
    for mode in TOP1_MODES:
        summary[f"top1_{mode}"] = exact_top1_probability(n, accuracies, mode)
    return summary
