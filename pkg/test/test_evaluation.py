import importlib
import threading
import pytest

evaluation = importlib.import_module("evaluation")
engine = importlib.import_module("engine")
errors = importlib.import_module("errors")
store_mod = importlib.import_module("store")
plugins = importlib.import_module("plugins")

BudgetLedger = getattr(evaluation, "BudgetLedger")
EvaluationRunner = getattr(evaluation, "EvaluationRunner")
EvalOutcome = getattr(evaluation, "EvalOutcome")
mean_score = getattr(evaluation, "mean_score")
remaining = getattr(evaluation, "remaining")
AgentRecord = getattr(engine, "AgentRecord")


class CountingEvaluator:
    """Scores 1.0 on even-numbered examples; records every call."""

    def __init__(self):
        self.calls = []
        self._lock = threading.Lock()

    def evaluate(self, agent_id, artifact_dir, examples):
        with self._lock:
            self.calls.append((agent_id, [e.example_id for e in examples]))
        return [{"example_id": e.example_id, "score": float(int(e.example_id[-1]) % 2 == 0),
                 "fingerprint": e.example_id[-1], "diagnostics": f"{agent_id} on {e.example_id}"}
                for e in examples]


class CrashingEvaluator:
    def evaluate(self, agent_id, artifact_dir, examples):
        raise errors.EvaluatorError("exit code 1: boom")


class PartialEvaluator:
    """Answers only the first example, and that one with a malformed score."""

    def evaluate(self, agent_id, artifact_dir, examples):
        return [{"example_id": examples[0].example_id, "score": "high"}]


def _agent(agent_id="agent-000"):
    return AgentRecord(agent_id, f"agents/{agent_id}/artifact")


@pytest.mark.parametrize("total, spent, expected", [(1500, 0, 1500), (1500, 1500, 0), (1500, 80, 1420)])
def test_remaining(total, spent, expected):
    assert remaining(BudgetLedger(total, spent)) == expected


def test_ledger_rejects_overspend():
    ledger = BudgetLedger(10)
    ledger.debit(0, evaluation.PHASE_TOURNAMENT, 10)
    with pytest.raises(errors.BudgetExhaustedError):
        ledger.debit(1, evaluation.PHASE_TOURNAMENT, 1)
    assert ledger.spent == 10


def test_ledger_conservation_over_phases():
    ledger = BudgetLedger(100)
    ledger.debit(0, evaluation.PHASE_TOURNAMENT, 20)
    ledger.debit(1, evaluation.PHASE_DEEP_FOCUS, 20)
    ledger.debit(1, evaluation.PHASE_TOURNAMENT, 20)
    ledger.debit(1, evaluation.PHASE_TOURNAMENT, 5)
    assert ledger.spent == sum(d.count for d in ledger.per_phase) == 65
    assert [(d.iteration, d.phase, d.count) for d in ledger.per_phase] == [
        (0, "tournament", 20), (1, "deep_focus", 20), (1, "tournament", 25)]
    assert BudgetLedger.from_dict(ledger.to_dict()).to_dict() == ledger.to_dict()


@pytest.mark.parametrize("scores, expected", [
    ([1, 0, 1, 0], 0.5),
    ([1] * 20, 1.0),
    ([0.9, 1.0, 0.0], 0.6333333333333333),
])
def test_mean_score(scores, expected):
    outcomes = [EvalOutcome("a", f"e{i}", float(s)) for i, s in enumerate(scores)]
    assert mean_score(outcomes) == pytest.approx(expected, abs=1e-15)


def test_mean_score_empty_is_arity_error():
    with pytest.raises(errors.ArityError):
        mean_score([])


def test_evaluate_batch_debits_each_uncached_pair_once(pool):
    fake = CountingEvaluator()
    runner = EvaluationRunner(fake)
    ledger = BudgetLedger(1500)
    examples = pool[:20]

    first = runner.evaluate_batch(_agent(), examples, ledger)
    assert [o.example_id for o in first] == [e.example_id for e in examples]
    assert ledger.spent == 20

    again = runner.evaluate_batch(_agent(), examples, ledger, iteration=1)
    assert again == first, "cached outcomes should be returned unchanged"
    assert ledger.spent == 20
    assert ledger.cache_hits == 20
    assert len(fake.calls) == 1


def test_evaluate_batch_budget_precondition(pool):
    fake = CountingEvaluator()
    runner = EvaluationRunner(fake)
    ledger = BudgetLedger(1500, 1495)
    with pytest.raises(errors.BudgetExhaustedError):
        runner.evaluate_batch(_agent(), pool[:20], ledger)
    assert ledger.spent == 1495
    assert fake.calls == [], "nothing should be invoked when the budget cannot cover the batch"


def test_competitor_precondition_is_checked_for_all_agents(pool):
    fake = CountingEvaluator()
    runner = EvaluationRunner(fake)
    ledger = BudgetLedger(50)
    with pytest.raises(errors.BudgetExhaustedError):
        runner.evaluate_competitors([_agent("a"), _agent("b"), _agent("c")], pool[:20], ledger, 0)
    assert fake.calls == [] and ledger.spent == 0


def test_crashing_evaluator_yields_scored_failures(pool):
    runner = EvaluationRunner(CrashingEvaluator())
    ledger = BudgetLedger(100)
    outcomes = runner.evaluate_batch(_agent(), pool[:5], ledger)
    assert ledger.spent == 5, "attempted evaluations are still debited"
    assert all(o.failed and o.score == 0.0 for o in outcomes)
    assert all("boom" in o.diagnostics for o in outcomes)


def test_malformed_and_missing_replies_become_failures(pool):
    runner = EvaluationRunner(PartialEvaluator())
    ledger = BudgetLedger(100)
    outcomes = runner.evaluate_batch(_agent(), pool[:3], ledger)
    assert [o.failed for o in outcomes] == [True, True, True]
    assert "malformed score" in outcomes[0].diagnostics
    assert "no reply" in outcomes[1].diagnostics
    assert ledger.spent == 3


def test_parallel_evaluation_matches_serial(pool):
    agents = [_agent("a"), _agent("b"), _agent("c")]
    serial = EvaluationRunner(CountingEvaluator(), parallelism=1)
    parallel = EvaluationRunner(CountingEvaluator(), parallelism=3)
    ledger_s, ledger_p = BudgetLedger(200), BudgetLedger(200)
    out_s = serial.evaluate_competitors(agents, pool[:10], ledger_s, 0)
    out_p = parallel.evaluate_competitors(agents, pool[:10], ledger_p, 0)
    assert out_s == out_p
    assert ledger_s.to_dict() == ledger_p.to_dict()


def test_outcomes_persist_and_reload(tmp_path, pool):
    store = store_mod.RunStore.create(tmp_path / "run", {"engine": {}}, pool)
    runner = EvaluationRunner(CountingEvaluator(), store)
    ledger = BudgetLedger(100)
    first = runner.evaluate_batch(_agent(), pool[:4], ledger)

    reloaded = EvaluationRunner(CountingEvaluator(), store)
    assert reloaded.cached("agent-000", pool[0].example_id) == first[0]
    events = store.read_events()
    assert events[-1]["type"] == "evaluation" and events[-1]["debited"] == 4


def test_invalidate_forgets_a_revised_draft(tmp_path, pool):
    store = store_mod.RunStore.create(tmp_path / "run", {"engine": {}}, pool)
    fake = CountingEvaluator()
    runner = EvaluationRunner(fake, store)
    ledger = BudgetLedger(100)
    runner.evaluate_batch(_agent(), pool[:4], ledger)
    runner.invalidate("agent-000")
    assert runner.cached("agent-000", pool[0].example_id) is None
    assert store.load_outcome_cache() == {}
    runner.evaluate_batch(_agent(), pool[:4], ledger)
    assert ledger.spent == 8 and len(fake.calls) == 2


def test_duplicate_examples_cost_once(pool):
    runner = EvaluationRunner(CountingEvaluator())
    ledger = BudgetLedger(100)
    outcomes = runner.evaluate_batch(_agent(), [pool[0], pool[0], pool[1]], ledger)
    assert len(outcomes) == 3
    assert ledger.spent == 2


class FixedReplyEvaluator:
    def __init__(self, score):
        self.score = score

    def evaluate(self, agent_id, artifact_dir, examples):
        return [{"example_id": e.example_id, "score": self.score} for e in examples]


@pytest.mark.parametrize("score", [10 ** 400, -(10 ** 400), float("inf"), float("nan"), True, None])
def test_unusable_scores_become_failures(pool, score):
    runner = EvaluationRunner(FixedReplyEvaluator(score))
    ledger = BudgetLedger(10)
    outcomes = runner.evaluate_batch(_agent(), pool[:2], ledger)
    assert all(o.failed and o.score == 0.0 for o in outcomes)
    assert all("malformed score" in o.diagnostics for o in outcomes)
    assert ledger.spent == 2
