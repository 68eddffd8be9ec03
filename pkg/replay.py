"""
Replay verification of a run store.

Rebuilds ratings, example samples, winner choices, slot-3 picks and the budget
ledger from the event log plus the run seed, and compares each step with the
records and snapshots the engine persisted.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from engine import (AgentRecord, EngineConfig, IterationRecord, best_agent, decide_winner,
                    rng_streams, sample_examples, select_competitors)
from errors import BudgetExhaustedError, IntegrityError
from evaluation import BudgetLedger, mean_score
from rating import INITIAL_RATING, apply_clone_penalty, apply_round
from store import RunStore

TOLERANCE = 1e-9


@dataclass
class ReplayReport:
    ok: bool
    iterations: int
    spent: int
    divergences: List[str] = field(default_factory=list)

    @property
    def first_divergence(self) -> Optional[str]:
        return self.divergences[0] if self.divergences else None

    def summary(self) -> str:
        if self.ok:
            return f"replay OK ({self.iterations} iterations, {self.spent} evaluations)"
        return f"replay diverged: {self.first_divergence}"


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=TOLERANCE, abs_tol=TOLERANCE)


def _same_map(a: Mapping[str, float], b: Mapping[str, float]) -> bool:
    return set(a) == set(b) and all(_close(float(a[k]), float(b[k])) for k in a)


def replay_run(root: Path) -> ReplayReport:
    """Raises IntegrityError for stores that cannot be read at all."""
    store = RunStore.open(Path(root))
    config = EngineConfig.from_dict(store.read_config()["engine"])
    pool = store.read_pool()
    events = store.read_events()
    if not events or events[0].get("type") != "run_started":
        raise IntegrityError("Event log does not start with run_started.")
    for position, event in enumerate(events):
        if event.get("seq") != position:
            raise IntegrityError(f"Event {position} is out of sequence: {event}")

    sample_rng, tie_rng, select_rng = rng_streams(config.rng_seed)
    agents: Dict[str, AgentRecord] = {}
    ledger = BudgetLedger(config.budget)
    divergences: List[str] = []
    previous_winner: Optional[str] = None
    iterations = 0

    for event in events:
        kind = event["type"]
        if kind == "agent_created":
            agent = AgentRecord.from_dict(event["agent"])
            if not store.resolve(agent.artifact_dir).is_dir():
                raise IntegrityError(f"Artifact of {agent.agent_id} is missing from the store.")
            if agent.rating != INITIAL_RATING:
                divergences.append(f"{agent.agent_id} was created at {agent.rating}, not {INITIAL_RATING}")
            agents[agent.agent_id] = agent

        elif kind == "evaluation":
            try:
                ledger.debit(event["iteration"], event["phase"], event["debited"])
            except BudgetExhaustedError:
                divergences.append(f"iteration {event['iteration']}: ledger overspent")
            ledger.record_cache_hits(event["cache_hits"])

        elif kind == "clone_detected":
            agent = agents.get(event["agent_id"])
            if agent is None:
                raise IntegrityError(f"Clone event for unknown agent: {event}")
            if agent.clone:
                divergences.append(f"iteration {event['iteration']}: {agent.agent_id} penalised twice")
            agent.rating = apply_clone_penalty(agent.rating, config.clone_penalty)
            agent.clone = True
            if not _close(agent.rating, event["rating_after"]):
                divergences.append(f"iteration {event['iteration']}: clone penalty for {agent.agent_id} differs")

        elif kind == "competitors_selected":
            prefix = f"iteration {event['iteration']}"
            if event["winner_id"] != previous_winner:
                divergences.append(f"{prefix}: slot 1 is not the previous winner")
            expected = select_competitors(agents, event["winner_id"], event["new_agent_id"], select_rng)
            if expected != event["competitor_ids"]:
                divergences.append(f"{prefix}: competitor selection {event['competitor_ids']} != {expected}")

        elif kind == "iteration_completed":
            record = IterationRecord.from_dict(event["record"])
            prefix = f"iteration {record.index}"
            unknown = [c for c in record.competitor_ids if c not in agents]
            if unknown:
                raise IntegrityError(f"{prefix} references unknown agents: {', '.join(unknown)}")

            sample = [e.example_id for e in sample_examples(pool, config.sample_size, sample_rng)]
            if sample != record.example_ids:
                divergences.append(f"{prefix}: example sample differs from the seeded draw")
            if previous_winner is not None and record.competitor_ids[0] != previous_winner:
                divergences.append(f"{prefix}: slot 1 is not the previous winner")

            before = {c: agents[c].rating for c in record.competitor_ids}
            if not _same_map(before, record.elo_before):
                divergences.append(f"{prefix}: pre-round ratings differ")

            try:
                outcomes = store.read_outcomes(store.iteration_dir(record.index))
                means = {c: mean_score(outcomes[c]) for c in record.competitor_ids}
            except KeyError as exc:
                raise IntegrityError(f"{prefix}: no stored outcomes for {exc}")
            if not _same_map(means, record.mean_scores):
                divergences.append(f"{prefix}: stored outcomes do not give the recorded means")

            after = apply_round(before, means, config.k_factor) if len(before) >= 2 else dict(before)
            if not _same_map(after, record.elo_after):
                divergences.append(f"{prefix}: Elo update differs")
            for c in record.competitor_ids:
                agents[c].rating = after[c]

            snapshot = store.read_elo_snapshot(record.index)
            population = {a.agent_id: a.rating for a in agents.values()}
            if not (_same_map(snapshot.get("after", {}), after)
                    and _same_map(snapshot.get("population", {}), population)):
                divergences.append(f"{prefix}: stored Elo snapshot differs")

            winner = decide_winner(config.mode, record.competitor_ids, means, agents, tie_rng)
            if winner != record.winner_id:
                divergences.append(f"{prefix}: winner {record.winner_id} != replayed {winner}")
            if store.read_iteration(record.index) != event["record"]:
                divergences.append(f"{prefix}: stored iteration record differs from the event log")
            previous_winner = record.winner_id
            iterations += 1

        elif kind == "run_finished":
            best = best_agent(agents)
            if best.agent_id != event["best_agent_id"]:
                divergences.append(f"final selection {event['best_agent_id']} != replayed {best.agent_id}")
            if event["spent"] != ledger.spent:
                divergences.append(f"final spend {event['spent']} != replayed {ledger.spent}")

    stored = store.read_ledger()
    if stored.to_dict() != ledger.to_dict():
        divergences.append(f"ledger document differs (stored spent {stored.spent}, replayed {ledger.spent})")

    return ReplayReport(not divergences, iterations, ledger.spent, divergences)
