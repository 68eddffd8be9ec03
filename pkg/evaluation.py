"""
Evaluation orchestration.

Runs the evaluator plugin over (agent, example) pairs, caches every outcome by
(agent_id, example_id), persists outcomes to the run store and debits the
global budget ledger. A crashing plugin never aborts an iteration: the
affected pairs become score-0 outcomes whose diagnostics carry the reason.
"""

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple

from errors import ArityError, BudgetExhaustedError, EvaluatorError

if TYPE_CHECKING:
    from engine import AgentRecord
    from store import RunStore

logger = logging.getLogger(__name__)

PHASE_TOURNAMENT = "tournament"
PHASE_DEEP_FOCUS = "deep_focus"
PHASES = (PHASE_TOURNAMENT, PHASE_DEEP_FOCUS)


@dataclass(frozen=True)
class ExampleRef:
    example_id: str
    payload_ref: str = ""

    def __post_init__(self):
        if not isinstance(self.example_id, str) or not self.example_id:
            raise ValueError("example_id must be a non-empty string.")

    def to_dict(self) -> Dict:
        return {"example_id": self.example_id, "payload_ref": self.payload_ref}

    @classmethod
    def from_dict(cls, data: Dict) -> "ExampleRef":
        return cls(str(data["example_id"]), str(data.get("payload_ref", "")))


@dataclass(frozen=True)
class EvalOutcome:
    agent_id: str
    example_id: str
    score: float
    fingerprint: Optional[str] = None
    diagnostics: str = ""
    agent_stdout: str = ""
    failed: bool = False

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score!r}.")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalOutcome":
        return cls(
            agent_id=data["agent_id"],
            example_id=data["example_id"],
            score=float(data["score"]),
            fingerprint=data.get("fingerprint"),
            diagnostics=data.get("diagnostics", ""),
            agent_stdout=data.get("agent_stdout", ""),
            failed=bool(data.get("failed", False)),
        )

    @classmethod
    def failure(cls, agent_id: str, example_id: str, reason: str) -> "EvalOutcome":
        return cls(agent_id, example_id, 0.0, None, f"evaluation failed: {reason}", "", True)


@dataclass
class PhaseDebit:
    iteration: int
    phase: str
    count: int


@dataclass
class BudgetLedger:
    """Authoritative count of (agent, example) evaluations against the budget."""

    total: int
    spent: int = 0
    per_phase: List[PhaseDebit] = field(default_factory=list)
    cache_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.total < 0 or self.spent < 0:
            raise ValueError("Ledger totals must be non-negative.")
        if self.spent > self.total:
            raise ValueError(f"Ledger overspent: {self.spent} > {self.total}.")

    def remaining(self) -> int:
        return self.total - self.spent

    def debit(self, iteration: int, phase: str, count: int) -> None:
        if phase not in PHASES:
            raise ValueError(f"Unknown phase {phase!r}.")
        if count <= 0:
            return
        with self._lock:
            if count > self.remaining():
                raise BudgetExhaustedError(count, self.remaining())
            self.spent += count
            last = self.per_phase[-1] if self.per_phase else None
            if last is not None and last.iteration == iteration and last.phase == phase:
                last.count += count
            else:
                self.per_phase.append(PhaseDebit(iteration, phase, count))

    def record_cache_hits(self, count: int) -> None:
        with self._lock:
            self.cache_hits += count

    def to_dict(self) -> Dict:
        return {
            "total": self.total,
            "spent": self.spent,
            "cache_hits": self.cache_hits,
            "per_phase": [asdict(d) for d in self.per_phase],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "BudgetLedger":
        return cls(
            total=int(data["total"]),
            spent=int(data["spent"]),
            per_phase=[PhaseDebit(int(d["iteration"]), d["phase"], int(d["count"]))
                       for d in data.get("per_phase", [])],
            cache_hits=int(data.get("cache_hits", 0)),
        )


def remaining(ledger: BudgetLedger) -> int:
    """Evaluations still available: total - spent."""
    return ledger.remaining()


def mean_score(outcomes: Sequence[EvalOutcome]) -> float:
    if not outcomes:
        raise ArityError("mean_score needs at least one outcome.")
    return math.fsum(o.score for o in outcomes) / len(outcomes)


def _parse_reply(agent_id: str, reply: Dict) -> Tuple[Optional[str], Optional[EvalOutcome], str]:
    """Turn one plugin reply line into an outcome; returns (example_id, outcome, error)."""
    example_id = reply.get("example_id") if isinstance(reply, dict) else None
    if not isinstance(example_id, str) or not example_id:
        return None, None, "reply without example_id"
    score = reply.get("score")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        return example_id, None, f"malformed score {score!r}"
    try:
        score = float(score)
    except OverflowError:
        return example_id, None, "malformed score (out of float range)"
    if not math.isfinite(score):
        return example_id, None, f"malformed score {score!r}"
    fingerprint = reply.get("fingerprint")
    if fingerprint is not None:
        fingerprint = str(fingerprint)
    outcome = EvalOutcome(
        agent_id=agent_id,
        example_id=example_id,
        score=float(score),
        fingerprint=fingerprint,
        diagnostics=str(reply.get("diagnostics") or ""),
        agent_stdout=str(reply.get("agent_stdout") or ""),
    )
    return example_id, outcome, ""


class EvaluationRunner:
    """
    Caching, budget-enforcing front end to an evaluator plugin.

    Plugin calls for different agents may run on a thread pool; debits, cache
    writes, persistence and events happen afterwards in slot order under one lock.
    """

    def __init__(self, evaluator, store: Optional["RunStore"] = None, parallelism: int = 1):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1.")
        self.evaluator = evaluator
        self.store = store
        self.parallelism = parallelism
        self._lock = threading.RLock()
        self._cache: Dict[Tuple[str, str], EvalOutcome] = {}
        if store is not None:
            self._cache.update(store.load_outcome_cache())

    def cached(self, agent_id: str, example_id: str) -> Optional[EvalOutcome]:
        return self._cache.get((agent_id, example_id))

    def invalidate(self, agent_id: str) -> None:
        """Forget a draft's outcomes after its artifact was revised."""
        with self._lock:
            for key in [key for key in self._cache if key[0] == agent_id]:
                del self._cache[key]
            if self.store is not None:
                self.store.discard_outcomes(agent_id)

    def _pending(self, agent_id: str, examples: Iterable[ExampleRef]) -> List[ExampleRef]:
        pending, seen = [], set()
        for example in examples:
            if (agent_id, example.example_id) in self._cache or example.example_id in seen:
                continue
            seen.add(example.example_id)
            pending.append(example)
        return pending

    def uncached_count(self, agents: Sequence["AgentRecord"], examples: Sequence[ExampleRef]) -> int:
        return sum(len(self._pending(a.agent_id, examples)) for a in agents)

    def _invoke(self, agent: "AgentRecord", pending: List[ExampleRef]) -> Dict[str, EvalOutcome]:
        artifact_dir = self.store.resolve(agent.artifact_dir) if self.store else agent.artifact_dir
        wanted = {e.example_id for e in pending}
        results: Dict[str, EvalOutcome] = {}
        try:
            replies = self.evaluator.evaluate(agent.agent_id, artifact_dir, pending)
        except EvaluatorError as exc:
            logger.warning("Evaluator batch failed for %s: %s", agent.agent_id, exc)
            return {e.example_id: EvalOutcome.failure(agent.agent_id, e.example_id, str(exc))
                    for e in pending}

        for reply in replies:
            example_id, outcome, error = _parse_reply(agent.agent_id, reply)
            if example_id not in wanted or example_id in results:
                logger.warning("Ignoring reply for unexpected example %r from %s", example_id, agent.agent_id)
                continue
            if outcome is None:
                logger.warning("Malformed reply for %s/%s: %s", agent.agent_id, example_id, error)
                outcome = EvalOutcome.failure(agent.agent_id, example_id, error)
            results[example_id] = outcome

        for example_id in sorted(wanted - set(results)):
            logger.warning("No reply for %s/%s", agent.agent_id, example_id)
            results[example_id] = EvalOutcome.failure(agent.agent_id, example_id, "no reply for example")
        return results

    def _record(self, agent: "AgentRecord", examples: Sequence[ExampleRef], pending: List[ExampleRef],
                fresh: Dict[str, EvalOutcome], ledger: BudgetLedger, iteration: int,
                phase: str) -> List[EvalOutcome]:
        new_outcomes = [fresh[e.example_id] for e in pending]
        for outcome in new_outcomes:
            self._cache[(agent.agent_id, outcome.example_id)] = outcome
        if self.store is not None and new_outcomes:
            self.store.append_outcomes(agent.agent_id, new_outcomes)
        ledger.debit(iteration, phase, len(pending))
        hits = len(examples) - len(pending)
        ledger.record_cache_hits(hits)
        if self.store is not None:
            self.store.append_event({
                "type": "evaluation",
                "iteration": iteration,
                "phase": phase,
                "agent_id": agent.agent_id,
                "example_ids": [e.example_id for e in examples],
                "debited": len(pending),
                "cache_hits": hits,
                "failures": sum(1 for o in new_outcomes if o.failed),
            })
        return [self._cache[(agent.agent_id, e.example_id)] for e in examples]

    def evaluate_competitors(self, agents: Sequence["AgentRecord"], examples: Sequence[ExampleRef],
                             ledger: BudgetLedger, iteration: int,
                             phase: str = PHASE_TOURNAMENT) -> Dict[str, List[EvalOutcome]]:
        """
        Evaluate several agents on one example set.
        The budget precondition covers every agent before anything is invoked.
        """
        with self._lock:
            plans = {a.agent_id: self._pending(a.agent_id, examples) for a in agents}
            needed = sum(len(p) for p in plans.values())
            if needed > ledger.remaining():
                raise BudgetExhaustedError(needed, ledger.remaining())

            jobs = [a for a in agents if plans[a.agent_id]]
            if self.parallelism > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                    futures = {a.agent_id: pool.submit(self._invoke, a, plans[a.agent_id]) for a in jobs}
                    fresh = {agent_id: f.result() for agent_id, f in futures.items()}
            else:
                fresh = {a.agent_id: self._invoke(a, plans[a.agent_id]) for a in jobs}

            return {
                a.agent_id: self._record(a, examples, plans[a.agent_id], fresh.get(a.agent_id, {}),
                                         ledger, iteration, phase)
                for a in agents
            }

    def evaluate_batch(self, agent: "AgentRecord", examples: Sequence[ExampleRef], ledger: BudgetLedger,
                       iteration: int = 0, phase: str = PHASE_TOURNAMENT) -> List[EvalOutcome]:
        """One outcome per example, in input order; cache hits cost nothing."""
        return self.evaluate_competitors([agent], examples, ledger, iteration, phase)[agent.agent_id]
