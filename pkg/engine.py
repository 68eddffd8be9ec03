"""
Evolution engine.

Each iteration samples fresh examples, evaluates the competitors on them,
updates Elo ratings pairwise, picks a winner and writes a comparative report.
Between iterations a new agent is evolved from the report, optionally
refined on the previous iteration's examples (Deep Focus), and enters the
next tournament next to the previous winner and a random pick from the top
two of the remaining population. The King-of-the-Hill mode runs the same
loop with only the champion and one challenger.
"""

import hashlib
import json
import logging
import os
import shutil
import stat
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ArityError, ConfigError, MutationError
from evaluation import (PHASE_DEEP_FOCUS, PHASE_TOURNAMENT, BudgetLedger, EvalOutcome,
                        EvaluationRunner, ExampleRef, mean_score)
from rating import (DEFAULT_CLONE_PENALTY, DEFAULT_K_FACTOR, INITIAL_RATING, TIE, WIN,
                    apply_clone_penalty, apply_round, outcome_from_means)
from reports import (DEFAULT_BYTE_CAP, DEFAULT_DIVERGENCE_CAP, KIND_BINARY, KINDS,
                     build_report, diagnostics_text, render_text)
from store import RunStore, write_json

logger = logging.getLogger(__name__)

MODE_DEFAULT = "default_3agent"
MODE_KOTH = "koth"
MODES = (MODE_DEFAULT, MODE_KOTH)

DEFAULT_SAMPLE_SIZE = 20
DEFAULT_BUDGET = 1500

STOP_BUDGET = "budget"
STOP_MUTATION_FAILURES = "mutation_failures"


def agent_id_for(number: int) -> str:
    return f"agent-{number:03d}"


@dataclass(frozen=True)
class EngineConfig:
    mode: str = MODE_DEFAULT
    sample_size: int = DEFAULT_SAMPLE_SIZE
    deep_focus_rounds: int = 1
    k_factor: float = DEFAULT_K_FACTOR
    clone_penalty: float = DEFAULT_CLONE_PENALTY
    budget: int = DEFAULT_BUDGET
    rng_seed: int = 0
    parallelism: int = 1
    max_mutation_failures: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}.")
        if not isinstance(self.sample_size, int) or self.sample_size < 1:
            raise ConfigError("sample_size must be a positive integer.")
        if self.deep_focus_rounds not in (0, 1):
            raise ConfigError("deep_focus_rounds must be 0 or 1.")
        if not self.k_factor > 0:
            raise ConfigError("k_factor must be positive.")
        if self.clone_penalty < 0:
            raise ConfigError("clone_penalty must be non-negative.")
        if not isinstance(self.parallelism, int) or self.parallelism < 1:
            raise ConfigError("parallelism must be a positive integer.")
        if self.max_mutation_failures < 1:
            raise ConfigError("max_mutation_failures must be at least 1.")
        minimum = self.sample_size * self.competitor_count
        if not isinstance(self.budget, int) or self.budget < minimum:
            raise ConfigError(f"Budget {self.budget} is below one iteration "
                              f"({self.competitor_count} x {self.sample_size} = {minimum}).")

    @property
    def competitor_count(self) -> int:
        return 2 if self.mode == MODE_KOTH else 3

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EngineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown engine settings: {', '.join(sorted(unknown))}.")
        return cls(**data)


@dataclass
class AgentRecord:
    agent_id: str
    artifact_dir: str
    parent_ids: List[str] = field(default_factory=list)
    created_iteration: int = 0
    rating: float = INITIAL_RATING
    clone: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "AgentRecord":
        return cls(
            agent_id=data["agent_id"],
            artifact_dir=data["artifact_dir"],
            parent_ids=list(data.get("parent_ids", [])),
            created_iteration=int(data.get("created_iteration", 0)),
            rating=float(data.get("rating", INITIAL_RATING)),
            clone=bool(data.get("clone", False)),
        )


@dataclass
class IterationRecord:
    index: int
    example_ids: List[str]
    competitor_ids: List[str]
    mean_scores: Dict[str, float]
    elo_before: Dict[str, float]
    elo_after: Dict[str, float]
    winner_id: str
    report_ref: str
    deep_focus_ref: Optional[str] = None
    clone_ids: List[str] = field(default_factory=list)
    with_replacement: bool = False
    mutation_failed: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "IterationRecord":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class TaskSettings:
    """Task-level knobs that shape reports and the mutator workspace."""

    score_kind: str = KIND_BINARY
    divergence_cap: int = DEFAULT_DIVERGENCE_CAP
    byte_cap: int = DEFAULT_BYTE_CAP
    documents: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.score_kind not in KINDS:
            raise ConfigError(f"score_kind must be one of {', '.join(KINDS)}.")


@dataclass
class RunResult:
    best: AgentRecord
    agents: Dict[str, AgentRecord]
    iterations: List[IterationRecord]
    ledger: BudgetLedger
    stop_reason: str


# ---- selection rules ---------------------------------------------------------

def rng_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for example sampling, tie-breaking and slot-3 selection."""
    sample_ss, tie_ss, select_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(sample_ss), np.random.default_rng(tie_ss), np.random.default_rng(select_ss)


def worst_case_cost(competitor_count: int, sample_size: int, deep_focus: bool) -> int:
    return sample_size * competitor_count + (sample_size if deep_focus else 0)


def sample_examples(pool: Sequence[ExampleRef], n: int, rng: np.random.Generator) -> List[ExampleRef]:
    """n distinct examples, or draws with replacement when the pool is smaller than n."""
    if not pool:
        raise ArityError("Cannot sample from an empty pool.")
    indices = rng.choice(len(pool), size=n, replace=n > len(pool))
    return [pool[int(i)] for i in indices]


def pick_winner(mean_scores: Mapping[str, float], rng: np.random.Generator) -> str:
    """An argmax of the mean scores; ties are broken uniformly at random."""
    if not mean_scores:
        raise ArityError("pick_winner needs at least one agent.")
    best = max(mean_scores.values())
    winners = [a for a, m in mean_scores.items() if outcome_from_means(m, best) == TIE]
    if len(winners) == 1:
        return winners[0]
    return winners[int(rng.integers(len(winners)))]


def select_competitors(population: Mapping[str, AgentRecord], winner_id: str,
                       new_agent_id: Optional[str], rng: np.random.Generator) -> List[str]:
    """Slots: previous winner, new agent, random pick from the top two non-clones."""
    candidates = sorted(
        (a for a in population.values()
         if not a.clone and a.agent_id not in (winner_id, new_agent_id)),
        key=lambda a: (-a.rating, a.created_iteration, a.agent_id),
    )[:2]
    slots = [winner_id] + ([new_agent_id] if new_agent_id else [])
    if len(candidates) == 2:
        slots.append(candidates[int(rng.integers(2))].agent_id)
    elif candidates:
        slots.append(candidates[0].agent_id)
    return slots


def detect_clone(new_outcomes: Sequence[EvalOutcome],
                 competitor_outcomes: Sequence[Sequence[EvalOutcome]]) -> bool:
    """True iff the new agent's fingerprints equal some competitor's on every example."""
    vectors = [list(new_outcomes)] + [list(outs) for outs in competitor_outcomes]
    if any(o.fingerprint is None for outs in vectors for o in outs):
        logger.warning("Fingerprints missing; clone check skipped.")
        return False
    new_prints = [(o.example_id, o.fingerprint) for o in new_outcomes]
    return any(new_prints == [(o.example_id, o.fingerprint) for o in outs]
               for outs in competitor_outcomes)


def koth_winner(champion_id: str, challenger_id: str, mean_scores: Mapping[str, float]) -> str:
    """The challenger takes the hill only on a strictly greater mean; ties stay with the champion."""
    if outcome_from_means(mean_scores[challenger_id], mean_scores[champion_id]) == WIN:
        return challenger_id
    return champion_id


def koth_step(champion: AgentRecord, challenger: AgentRecord, examples: Sequence[ExampleRef],
              runner: EvaluationRunner, ledger: BudgetLedger, iteration: int = 0,
              k: float = DEFAULT_K_FACTOR,
              screen: Optional[Callable[[Dict[str, List[EvalOutcome]]], None]] = None) -> str:
    """
    Evaluate champion and challenger on one sample, update both ratings, return the winner.
    screen sees the outcomes before the rating update; the engine uses it for clone checks.
    """
    outcomes = runner.evaluate_competitors([champion, challenger], examples, ledger, iteration)
    if screen is not None:
        screen(outcomes)
    means = {a.agent_id: mean_score(outcomes[a.agent_id]) for a in (champion, challenger)}
    after = apply_round({champion.agent_id: champion.rating, challenger.agent_id: challenger.rating}, means, k)
    champion.rating = after[champion.agent_id]
    challenger.rating = after[challenger.agent_id]
    pair = {champion.agent_id: champion, challenger.agent_id: challenger}
    return decide_winner(MODE_KOTH, list(pair), means, pair, rng=None)


def decide_winner(mode: str, competitor_ids: Sequence[str], mean_scores: Mapping[str, float],
                  agents: Mapping[str, AgentRecord], rng: Optional[np.random.Generator]) -> str:
    """Iteration winner: the KotH rule for champion/challenger, otherwise a non-clone argmax."""
    if mode == MODE_KOTH and len(competitor_ids) == 2:
        champion, challenger = competitor_ids
        if agents[challenger].clone:
            return champion
        return koth_winner(champion, challenger, mean_scores)
    eligible = {c: mean_scores[c] for c in competitor_ids if not agents[c].clone}
    return pick_winner(eligible, rng)


def best_agent(agents: Mapping[str, AgentRecord]) -> AgentRecord:
    """Highest-rated non-clone agent; equal ratings go to the earliest created."""
    eligible = [a for a in agents.values() if not a.clone]
    if not eligible:
        raise ArityError("No non-clone agent to return.")
    return min(eligible, key=lambda a: (-a.rating, a.created_iteration, a.agent_id))


def artifact_digest(path: Path) -> str:
    digest = hashlib.sha256()
    for file in sorted(p for p in Path(path).rglob("*") if p.is_file()):
        digest.update(file.relative_to(path).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(file.read_bytes())
    return digest.hexdigest()


def _copy_read_only(source: Path, target: Path) -> None:
    shutil.copytree(source, target)
    for file in target.rglob("*"):
        if file.is_file():
            os.chmod(file, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)


# ---- the loop ----------------------------------------------------------------

class EvolutionEngine:
    """Runs one evolution over a single run store."""

    def __init__(self, config: EngineConfig, pool: Sequence[ExampleRef], store: RunStore,
                 evaluator, mutator, task: Optional[TaskSettings] = None):
        if not pool:
            raise ConfigError("The example pool is empty.")
        self.config = config
        self.pool = list(pool)
        self.pool_by_id = {e.example_id: e for e in self.pool}
        self.store = store
        self.mutator = mutator
        self.task = task or TaskSettings()
        self.runner = EvaluationRunner(evaluator, store, config.parallelism)
        self.ledger = BudgetLedger(config.budget)
        self.agents: Dict[str, AgentRecord] = {}
        self.iterations: List[IterationRecord] = []
        self._outcomes: Dict[int, Dict[str, List[EvalOutcome]]] = {}
        self._deep_focus_refs: Dict[str, str] = {}
        self._agent_counter = 0
        self.sample_rng, self.tie_rng, self.select_rng = rng_streams(config.rng_seed)

    # -- agents --

    def _next_agent_id(self) -> str:
        agent_id = agent_id_for(self._agent_counter)
        self._agent_counter += 1
        return agent_id

    def _register(self, record: AgentRecord) -> AgentRecord:
        self.agents[record.agent_id] = record
        self.store.write_agent(record.to_dict())
        self.store.append_event({"type": "agent_created", "agent": record.to_dict()})
        return record

    def _register_seed(self, seed_artifact: Path) -> AgentRecord:
        agent_id = self._next_agent_id()
        locator = self.store.install_artifact(agent_id, Path(seed_artifact))
        return self._register(AgentRecord(agent_id, locator, [], 0))

    def _prepare_session(self, agent_id: str, iteration: int, presented: List[str],
                         previous: IterationRecord) -> Path:
        session = self.store.session_dir(agent_id)
        session.mkdir(parents=True, exist_ok=True)
        write_json(session / "session.json", {
            "agent_id": agent_id,
            "iteration": iteration,
            "competitor_ids": presented,
            "previous_iteration": previous.index,
        })
        standings = sorted(self.agents.values(), key=lambda a: (-a.rating, a.created_iteration, a.agent_id))
        write_json(session / "elo_standings.json", [
            {"agent_id": a.agent_id, "rating": a.rating, "clone": a.clone,
             "created_iteration": a.created_iteration} for a in standings
        ])
        report_dir = self.store.iteration_dir(previous.index)
        for name in ("report.md", "report.json"):
            if (report_dir / name).is_file():
                shutil.copyfile(report_dir / name, session / f"previous_{name}")
        for competitor in presented:
            _copy_read_only(self.store.resolve(self.agents[competitor].artifact_dir),
                            session / "competitors" / competitor)
        for competitor, outcomes in self._outcomes[previous.index].items():
            for outcome in outcomes:
                path = session / "diagnostics" / competitor / f"{outcome.example_id}.txt"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(diagnostics_text(outcome), encoding="utf-8")
        for name, text in self.task.documents.items():
            (session / name).write_text(text, encoding="utf-8")
        return session

    def _create_agent(self, agent_id: str, iteration: int, presented: List[str],
                      previous: IterationRecord) -> Tuple[AgentRecord, Path]:
        session = self._prepare_session(agent_id, iteration, presented, previous)
        self.mutator.run(session, "create")
        artifact = session / "artifact"
        if not artifact.is_dir() or not any(artifact.iterdir()):
            raise MutationError("mutator wrote no artifact")
        locator = self.store.install_artifact(agent_id, artifact)
        return self._register(AgentRecord(agent_id, locator, list(presented), iteration)), session

    # -- Deep Focus --

    def deep_focus(self, draft: AgentRecord, previous: IterationRecord, session: Path) -> AgentRecord:
        """Test the draft on the previous iteration's examples, report, and let the mutator revise it."""
        if self.config.deep_focus_rounds == 0:
            return draft
        n = len(previous.example_ids)
        if self.ledger.remaining() < n:
            logger.warning("Skipping Deep Focus for %s: %d evaluations left, %d needed.",
                           draft.agent_id, self.ledger.remaining(), n)
            self.store.append_event({"type": "deep_focus_skipped", "agent_id": draft.agent_id,
                                     "iteration": draft.created_iteration})
            return draft

        examples = [self.pool_by_id[e] for e in previous.example_ids]
        agents = [draft] + [self.agents[c] for c in previous.competitor_ids]
        outcomes = self.runner.evaluate_competitors(agents, examples, self.ledger,
                                                    draft.created_iteration, PHASE_DEEP_FOCUS)
        df_dir = self.store.iteration_dir(draft.created_iteration) / "deep_focus"
        report = build_report(outcomes, self.task.score_kind, previous.index, self.task.divergence_cap,
                              {a.agent_id: a.rating for a in agents}, self.store.diagnostics_root(df_dir))
        text = render_text(report, self.task.byte_cap)
        write_json(session / "deep_focus_report.json", report.to_dict())
        (session / "deep_focus_report.md").write_text(text, encoding="utf-8")
        self.store.write_outcomes(df_dir, outcomes)
        self.store.write_diagnostics(df_dir, outcomes)
        write_json(df_dir / "report.json", report.to_dict())
        (df_dir / "report.md").write_text(text, encoding="utf-8")
        self._deep_focus_refs[draft.agent_id] = f"iterations/{draft.created_iteration:04d}/deep_focus/report.md"

        artifact = session / "artifact"
        before = artifact_digest(artifact)
        revised = False
        try:
            self.mutator.run(session, "refine")
        except MutationError as exc:
            logger.warning("Refine phase failed for %s; keeping the draft: %s", draft.agent_id, exc)
        else:
            if artifact.is_dir() and any(artifact.iterdir()) and artifact_digest(artifact) != before:
                self.store.install_artifact(draft.agent_id, artifact)
                self.runner.invalidate(draft.agent_id)
                revised = True
        self.store.append_event({
            "type": "deep_focus",
            "agent_id": draft.agent_id,
            "iteration": draft.created_iteration,
            "examples_from": previous.index,
            "revised": revised,
        })
        return draft

    # -- one tournament --

    def _screen_clones(self, index: int, competitor_ids: Sequence[str], new_id: Optional[str],
                       outcomes: Mapping[str, List[EvalOutcome]]) -> List[str]:
        """Flag and penalise the new agent if it reproduces a competitor's fingerprints."""
        if new_id not in competitor_ids:
            return []
        for other in (c for c in competitor_ids if c != new_id):
            if detect_clone(outcomes[new_id], [outcomes[other]]):
                agent = self.agents[new_id]
                agent.rating = apply_clone_penalty(agent.rating, self.config.clone_penalty)
                agent.clone = True
                logger.info("%s copies %s; rating penalised to %.2f", new_id, other, agent.rating)
                self.store.append_event({"type": "clone_detected", "iteration": index,
                                         "agent_id": new_id, "matched": other,
                                         "penalty": self.config.clone_penalty, "rating_after": agent.rating})
                return [new_id]
        return []

    def _tournament(self, index: int, competitor_ids: List[str], new_id: Optional[str],
                    mutation_failed: bool) -> IterationRecord:
        cfg = self.config
        examples = sample_examples(self.pool, cfg.sample_size, self.sample_rng)
        with_replacement = cfg.sample_size > len(self.pool)
        if with_replacement:
            logger.warning("Pool has %d examples, fewer than n=%d; sampling with replacement.",
                           len(self.pool), cfg.sample_size)

        agents = [self.agents[c] for c in competitor_ids]
        outcomes: Dict[str, List[EvalOutcome]] = {}
        clone_ids: List[str] = []
        elo_before: Dict[str, float] = {}

        def screen(evaluated: Dict[str, List[EvalOutcome]]) -> None:
            outcomes.update(evaluated)
            clone_ids.extend(self._screen_clones(index, competitor_ids, new_id, evaluated))
            elo_before.update({c: self.agents[c].rating for c in competitor_ids})

        if cfg.mode == MODE_KOTH and len(competitor_ids) == 2:
            champion, challenger = agents
            winner = koth_step(champion, challenger, examples, self.runner, self.ledger, index,
                               cfg.k_factor, screen)
            means = {c: mean_score(outcomes[c]) for c in competitor_ids}
            elo_after = {c: self.agents[c].rating for c in competitor_ids}
        else:
            screen(self.runner.evaluate_competitors(agents, examples, self.ledger, index, PHASE_TOURNAMENT))
            means = {c: mean_score(outcomes[c]) for c in competitor_ids}
            elo_after = dict(elo_before)
            if len(competitor_ids) >= 2:
                elo_after = apply_round(elo_before, means, cfg.k_factor)
                for c in competitor_ids:
                    self.agents[c].rating = elo_after[c]
            winner = decide_winner(cfg.mode, competitor_ids, means, self.agents, self.tie_rng)

        report = build_report(outcomes, self.task.score_kind, index, self.task.divergence_cap, elo_after,
                              self.store.diagnostics_root(self.store.iteration_dir(index)))
        text = render_text(report, self.task.byte_cap)
        record = IterationRecord(
            index=index,
            example_ids=[e.example_id for e in examples],
            competitor_ids=list(competitor_ids),
            mean_scores=means,
            elo_before=elo_before,
            elo_after=elo_after,
            winner_id=winner,
            report_ref=f"iterations/{index:04d}/report.md",
            deep_focus_ref=self._deep_focus_refs.get(new_id) if new_id else None,
            clone_ids=clone_ids,
            with_replacement=with_replacement,
            mutation_failed=mutation_failed,
        )
        self._outcomes[index] = outcomes
        self.iterations.append(record)

        self.store.write_iteration(record.to_dict(), outcomes, report.to_dict(), text,
                                   {a.agent_id: a.rating for a in self.agents.values()})
        for c in competitor_ids:
            self.store.write_agent(self.agents[c].to_dict())
        self.store.write_ledger(self.ledger)
        self.store.append_event({"type": "iteration_completed", "record": record.to_dict()})
        logger.info("Iteration %d: %s won (%s)", index, winner,
                    ", ".join(f"{c}={means[c]:.3f}" for c in competitor_ids))
        return record

    # -- run --

    def run(self, seed_artifact: Path) -> RunResult:
        cfg = self.config
        deep_focus_on = cfg.deep_focus_rounds == 1
        self.store.append_event({"type": "run_started", "config": cfg.to_dict(), "pool_size": len(self.pool)})
        seed = self._register_seed(seed_artifact)

        index = 0
        competitors = [seed.agent_id]
        new_id: Optional[str] = None
        mutation_failed = False
        failures = 0
        previous: Optional[IterationRecord] = None
        run_tournament = True
        stop_reason = STOP_BUDGET

        while True:
            if run_tournament:
                previous = self._tournament(index, competitors, new_id, mutation_failed)
                index += 1
            winner = previous.winner_id

            has_third = cfg.mode == MODE_DEFAULT and any(
                not a.clone and a.agent_id != winner for a in self.agents.values())
            cost = worst_case_cost(2 + int(has_third), cfg.sample_size, deep_focus_on)
            if self.ledger.remaining() < cost:
                logger.info("Stopping: %d evaluations left, next iteration needs up to %d.",
                            self.ledger.remaining(), cost)
                break

            new_id = self._next_agent_id()
            if cfg.mode == MODE_KOTH:
                upcoming = [winner, new_id]
            else:
                upcoming = select_competitors(self.agents, winner, new_id, self.select_rng)
                self.store.append_event({"type": "competitors_selected", "iteration": index,
                                         "winner_id": winner, "new_agent_id": new_id,
                                         "competitor_ids": upcoming})
            presented = [c for c in upcoming if c != new_id]

            try:
                draft, session = self._create_agent(new_id, index, presented, previous)
            except MutationError as exc:
                failures += 1
                logger.warning("Mutation failed for %s (%d in a row): %s", new_id, failures, exc)
                self.store.append_event({"type": "mutation_failed", "iteration": index,
                                         "agent_id": new_id, "reason": str(exc)})
                if failures >= cfg.max_mutation_failures:
                    stop_reason = STOP_MUTATION_FAILURES
                    break
                competitors, new_id, mutation_failed = presented, None, True
                run_tournament = len(competitors) >= 2
                continue

            failures = 0
            self.deep_focus(draft, previous, session)
            competitors, mutation_failed, run_tournament = upcoming, False, True

        best = best_agent(self.agents)
        self.store.write_ledger(self.ledger)
        self.store.append_event({"type": "run_finished", "best_agent_id": best.agent_id,
                                 "spent": self.ledger.spent, "iterations": len(self.iterations),
                                 "stop_reason": stop_reason})
        return RunResult(best, dict(self.agents), list(self.iterations), self.ledger, stop_reason)


def run(config: EngineConfig, pool: Sequence[ExampleRef], seed_artifact: Path, evaluator, mutator,
        store: RunStore, task: Optional[TaskSettings] = None) -> RunResult:
    """Evolve from a seed artifact until the budget cannot cover another iteration."""
    return EvolutionEngine(config, pool, store, evaluator, mutator, task).run(seed_artifact)
