import importlib
import json
import stat
from collections import Counter

import numpy as np
import pytest

engine = importlib.import_module("engine")
evaluation = importlib.import_module("evaluation")
errors = importlib.import_module("errors")
config_mod = importlib.import_module("config")
plugins = importlib.import_module("plugins")
run_service = importlib.import_module("run_service")
store_mod = importlib.import_module("store")

AgentRecord = getattr(engine, "AgentRecord")
EngineConfig = getattr(engine, "EngineConfig")
IterationRecord = getattr(engine, "IterationRecord")
RunConfig = getattr(config_mod, "RunConfig")
with_engine = getattr(config_mod, "with_engine")
BUILTIN = plugins.BUILTIN_SYNTHETIC


def _launch(run_dir, pool="builtin:synthetic:2000", clone_rate=0.0, **engine_changes):
    config = with_engine(RunConfig(clone_rate=clone_rate), **engine_changes)
    return run_service.launch_run(run_dir, config, pool, BUILTIN, BUILTIN)


def _population(**ratings):
    return {name: AgentRecord(name, f"agents/{name}/artifact", rating=r, created_iteration=i)
            for i, (name, r) in enumerate(ratings.items())}


# ---- selection rules -----------------------------------------------------------

def test_sample_distinct_when_pool_is_large():
    pool = plugins.synthetic_pool(400)
    sample = engine.sample_examples(pool, 20, np.random.default_rng(1))
    assert len(sample) == 20
    assert len({e.example_id for e in sample}) == 20


def test_sample_with_replacement_when_pool_is_small():
    pool = plugins.synthetic_pool(5)
    sample = engine.sample_examples(pool, 20, np.random.default_rng(1))
    assert len(sample) == 20
    assert {e.example_id for e in sample} <= {e.example_id for e in pool}


def test_sample_is_reproducible():
    pool = plugins.synthetic_pool(400)
    first = engine.sample_examples(pool, 20, np.random.default_rng(9))
    second = engine.sample_examples(pool, 20, np.random.default_rng(9))
    assert first == second


def test_consecutive_samples_differ_across_seeds():
    """Fresh examples every iteration: no seed repeats an example set back to back."""
    pool = plugins.synthetic_pool(100)
    for seed in range(1_000):
        sample_rng = engine.rng_streams(seed)[0]
        first = {e.example_id for e in engine.sample_examples(pool, 20, sample_rng)}
        second = {e.example_id for e in engine.sample_examples(pool, 20, sample_rng)}
        assert first != second, f"seed {seed} drew the same example set twice"


def test_pick_winner_unique_argmax():
    assert engine.pick_winner({"A": 0.8, "B": 0.6, "C": 0.6}, np.random.default_rng(0)) == "A"


def test_pick_winner_two_way_tie():
    rng = np.random.default_rng(0)
    picks = {engine.pick_winner({"A": 0.7, "B": 0.7, "C": 0.5}, rng) for _ in range(200)}
    assert picks == {"A", "B"}


def test_pick_winner_three_way_tie_is_uniform():
    rng = np.random.default_rng(12345)
    counts = Counter(engine.pick_winner({"A": 0.7, "B": 0.7, "C": 0.7}, rng) for _ in range(30_000))
    for agent in "ABC":
        assert abs(counts[agent] / 30_000 - 1 / 3) < 0.01, counts


def test_select_competitors_draws_slot_three_from_top_two():
    population = _population(W=1550, X=1520, Y=1510, Z=1400)
    rng = np.random.default_rng(3)
    thirds = Counter()
    for _ in range(2_000):
        slots = engine.select_competitors(population, "W", "N", rng)
        assert slots[:2] == ["W", "N"]
        thirds[slots[2]] += 1
    assert set(thirds) == {"X", "Y"}
    assert abs(thirds["X"] / 2_000 - 0.5) < 0.05


def test_select_competitors_with_only_the_winner():
    population = _population(W=1500)
    assert engine.select_competitors(population, "W", "N", np.random.default_rng(0)) == ["W", "N"]


def test_select_competitors_skips_clones():
    population = _population(W=1550, X=1520, Y=1510, Z=1400)
    population["X"].clone = True
    rng = np.random.default_rng(5)
    thirds = {engine.select_competitors(population, "W", "N", rng)[2] for _ in range(500)}
    assert thirds == {"Y", "Z"}


def _outcomes(agent, prints):
    return [evaluation.EvalOutcome(agent, f"e{i}", float(p), None if p is None else str(p))
            for i, p in enumerate(prints)]


def test_detect_clone_on_identical_fingerprints():
    base = [1, 0] * 10
    assert engine.detect_clone(_outcomes("N", base), [_outcomes("A", base), _outcomes("B", [0] * 20)])


def test_detect_clone_single_difference():
    base = [1, 0] * 10
    other = list(base)
    other[7] = 1 - other[7]
    assert not engine.detect_clone(_outcomes("N", base), [_outcomes("A", other)])


def test_detect_clone_without_fingerprints_warns(caplog):
    new = [evaluation.EvalOutcome("N", f"e{i}", 1.0) for i in range(3)]
    old = [evaluation.EvalOutcome("A", f"e{i}", 1.0) for i in range(3)]
    with caplog.at_level("WARNING"):
        assert engine.detect_clone(new, [old]) is False
    assert "Fingerprints missing" in caplog.text


@pytest.mark.parametrize("champion, challenger, expected", [
    (0.70, 0.75, "challenger"),
    (0.70, 0.70, "champion"),
    (0.70, 0.65, "champion"),
])
def test_koth_ties_stay_with_the_champion(champion, challenger, expected):
    winner = engine.koth_winner("champ", "chall", {"champ": champion, "chall": challenger})
    assert winner == {"challenger": "chall", "champion": "champ"}[expected]


class FixedSkillEvaluator:
    """Agent solves the first `skill[agent]` examples of every batch."""

    def __init__(self, skill):
        self.skill = skill

    def evaluate(self, agent_id, artifact_dir, examples):
        return [{"example_id": e.example_id, "score": float(i < self.skill[agent_id]), "fingerprint": str(i)}
                for i, e in enumerate(examples)]


def test_koth_step_updates_both_ratings():
    champ = AgentRecord("champ", "a", rating=1500.0)
    chall = AgentRecord("chall", "b", rating=1500.0)
    runner = evaluation.EvaluationRunner(FixedSkillEvaluator({"champ": 14, "chall": 15}))
    ledger = evaluation.BudgetLedger(100)
    winner = engine.koth_step(champ, chall, plugins.synthetic_pool(20), runner, ledger)
    assert winner == "chall"
    assert (champ.rating, chall.rating) == pytest.approx((1484.0, 1516.0))
    assert ledger.spent == 40


def test_koth_step_tie_stays_with_the_champion():
    champ = AgentRecord("champ", "a", rating=1500.0)
    chall = AgentRecord("chall", "b", rating=1500.0)
    runner = evaluation.EvaluationRunner(FixedSkillEvaluator({"champ": 12, "chall": 12}))
    winner = engine.koth_step(champ, chall, plugins.synthetic_pool(20), runner, evaluation.BudgetLedger(100))
    assert winner == "champ"
    assert (champ.rating, chall.rating) == (1500.0, 1500.0)


def test_koth_step_screen_can_disqualify_the_challenger():
    champ = AgentRecord("champ", "a", rating=1500.0)
    chall = AgentRecord("chall", "b", rating=1500.0)
    runner = evaluation.EvaluationRunner(FixedSkillEvaluator({"champ": 10, "chall": 15}))
    seen = []

    def screen(outcomes):
        seen.append(sorted(outcomes))
        chall.clone = True
        chall.rating -= 200.0

    winner = engine.koth_step(champ, chall, plugins.synthetic_pool(20), runner,
                              evaluation.BudgetLedger(100), screen=screen)
    assert seen == [["chall", "champ"]]
    assert winner == "champ", "a clone never takes the hill"
    assert chall.rating > 1300.0, "the rating update runs after the screen's penalty"


def test_koth_runs_route_every_duel_through_koth_step(tmp_path, monkeypatch):
    calls = []
    original = engine.koth_step

    def counting(*args, **kwargs):
        calls.append(args[0].agent_id)
        return original(*args, **kwargs)

    monkeypatch.setattr(engine, "koth_step", counting)
    result = _launch(tmp_path / "koth", mode=engine.MODE_KOTH, budget=400, rng_seed=4)
    duels = [r for r in result.iterations if len(r.competitor_ids) == 2]
    assert len(calls) == len(duels) == len(result.iterations) - 1
    assert calls == [r.competitor_ids[0] for r in duels]
    ok, message = run_service.verify_run(tmp_path / "koth")
    assert ok, message


def test_config_refuses_budget_below_one_iteration():
    with pytest.raises(errors.ConfigError):
        EngineConfig(budget=59, sample_size=20)
    assert EngineConfig(budget=40, sample_size=20, mode=engine.MODE_KOTH).budget == 40


@pytest.mark.parametrize("changes", [
    {"mode": "tournament"}, {"sample_size": 0}, {"deep_focus_rounds": 2}, {"k_factor": 0},
    {"parallelism": 0}, {"clone_penalty": -1},
])
def test_config_validation(changes):
    with pytest.raises(errors.ConfigError):
        EngineConfig(**changes)


def test_config_rejects_unknown_keys():
    with pytest.raises(errors.ConfigError):
        EngineConfig.from_dict({"budget": 1500, "temperature": 0.3})


def test_worst_case_cost_differs_by_one_sample_with_deep_focus():
    assert engine.worst_case_cost(3, 20, True) == 80
    assert engine.worst_case_cost(3, 20, True) - engine.worst_case_cost(3, 20, False) == 20
    assert engine.worst_case_cost(2, 20, True) == 60


def test_best_agent_skips_clones_and_prefers_earliest():
    agents = _population(A=1500, B=1600, C=1600)
    agents["B"].clone = True
    assert engine.best_agent(agents).agent_id == "C"
    agents["A"].rating = 1600
    assert engine.best_agent(agents).agent_id == "A"


# ---- whole runs --------------------------------------------------------------------

@pytest.mark.parametrize("changes, low, high", [
    ({"mode": engine.MODE_DEFAULT}, 18, 21),
    ({"mode": engine.MODE_KOTH}, 23, 27),
])
def test_iteration_counts_at_default_budget(tmp_path, changes, low, high):
    result = _launch(tmp_path / "run", pool="builtin:synthetic:20000", rng_seed=4, **changes)
    assert low <= len(result.iterations) <= high
    assert result.ledger.spent <= 1500
    assert result.stop_reason == engine.STOP_BUDGET


def test_deep_focus_ablation_plumbing(tmp_path):
    """k=0 drops exactly n deep-focus evaluations per iteration and affords at least as many iterations."""
    with_df = _launch(tmp_path / "k1", pool="builtin:synthetic:20000", rng_seed=11, deep_focus_rounds=1)
    without = _launch(tmp_path / "k0", pool="builtin:synthetic:20000", rng_seed=11, deep_focus_rounds=0)

    df_debits = [d for d in with_df.ledger.per_phase if d.phase == evaluation.PHASE_DEEP_FOCUS]
    assert df_debits and all(d.count == 20 for d in df_debits)
    assert not [d for d in without.ledger.per_phase if d.phase == evaluation.PHASE_DEEP_FOCUS]
    assert len(without.iterations) >= len(with_df.iterations)


def test_run_invariants_across_seeds(tmp_path):
    """Budget, slot order, clone exclusion and replay over 50 seeded runs."""
    for seed in range(50):
        run_dir = tmp_path / f"seed-{seed}"
        result = _launch(run_dir, clone_rate=0.2, rng_seed=seed)
        assert result.ledger.spent <= 1500

        clones = set()
        for previous, current in zip(result.iterations, result.iterations[1:]):
            assert current.competitor_ids[0] == previous.winner_id, f"seed {seed}: slot 1 moved"
            assert not clones & set(current.competitor_ids), f"seed {seed}: clone re-selected"
            clones.update(current.clone_ids)
            assert current.winner_id not in clones

        ok, message = run_service.verify_run(run_dir)
        assert ok, f"seed {seed}: {message}"


def test_equal_seeds_give_identical_event_logs(tmp_path):
    _launch(tmp_path / "a", clone_rate=0.2, rng_seed=21)
    _launch(tmp_path / "b", clone_rate=0.2, rng_seed=21)
    first = (tmp_path / "a" / store_mod.EVENTS_FILE).read_bytes()
    second = (tmp_path / "b" / store_mod.EVENTS_FILE).read_bytes()
    assert first == second


def test_synthetic_evolution_improves_on_the_seed(tmp_path):
    accuracies = []
    for seed in range(20):
        result = _launch(tmp_path / f"run-{seed}", rng_seed=100 + seed)
        artifact = tmp_path / f"run-{seed}" / result.best.artifact_dir / plugins.AGENT_FILE
        accuracies.append(json.loads(artifact.read_text())["true_accuracy"])
    assert np.mean(accuracies) > 0.55, accuracies


def test_session_workspace_contents(tmp_path):
    run_dir = tmp_path / "run"
    _launch(run_dir, budget=300, sample_size=10, rng_seed=2)
    session = run_dir / "sessions" / "agent-001"
    for name in ("session.json", "elo_standings.json", "previous_report.md", "previous_report.json",
                 "strategy.md", "reasoning.md", "deep_focus_report.md"):
        assert (session / name).is_file(), f"{name} missing from the session workspace"
    copy = session / "competitors" / "agent-000" / plugins.AGENT_FILE
    assert stat.S_IMODE(copy.stat().st_mode) & 0o222 == 0, "competitor copies must be read-only"
    assert len(list((session / "diagnostics" / "agent-000").glob("*.txt"))) == 10


def test_deep_focus_records_its_report(tmp_path):
    run_dir = tmp_path / "run"
    result = _launch(run_dir, budget=300, sample_size=10, rng_seed=2)
    later = [r for r in result.iterations if r.deep_focus_ref]
    assert later, "every iteration after the first should carry a deep-focus report"
    assert all((run_dir / r.deep_focus_ref).is_file() for r in later)
    events = store_mod.RunStore.open(run_dir).read_events()
    assert any(e["type"] == "deep_focus" for e in events)


def test_deep_focus_skipped_when_budget_is_short(tmp_path, pool):
    store = store_mod.RunStore.create(tmp_path / "run", {"engine": {}}, pool)
    config = EngineConfig(budget=100, sample_size=20)
    evolution = engine.EvolutionEngine(config, pool, store, plugins.SyntheticEvaluator(0),
                                       plugins.SyntheticMutator(0))
    evolution.ledger.debit(0, evaluation.PHASE_TOURNAMENT, 95)
    draft = AgentRecord("agent-001", "agents/agent-001/artifact", created_iteration=1)
    previous = IterationRecord(0, [e.example_id for e in pool[:20]], ["agent-000"], {"agent-000": 0.5},
                               {"agent-000": 1500.0}, {"agent-000": 1500.0}, "agent-000", "")
    assert evolution.deep_focus(draft, previous, tmp_path / "session") is draft
    assert evolution.ledger.spent == 95
    assert store.read_events()[-1]["type"] == "deep_focus_skipped"


class FlakyMutator(plugins.SyntheticMutator):
    """Fails the create phase on the listed calls."""

    def __init__(self, run_seed, fail_on):
        super().__init__(run_seed)
        self.fail_on = set(fail_on)
        self.creates = 0

    def run(self, session_dir, phase):
        if phase == plugins.PHASE_CREATE:
            self.creates += 1
            if self.creates in self.fail_on:
                raise errors.MutationError("injected create failure")
        super().run(session_dir, phase)


def test_mutation_failure_carries_competitors_forward(tmp_path, pool):
    store = store_mod.RunStore.create(tmp_path / "run", {"engine": EngineConfig(budget=400).to_dict()}, pool)
    seed = plugins.write_synthetic_seed(tmp_path / "seed", 0.5)
    result = engine.run(EngineConfig(budget=400), pool, seed, plugins.SyntheticEvaluator(0),
                        FlakyMutator(0, fail_on={3}), store)
    store.write_ledger(result.ledger)
    carried = [r for r in result.iterations if r.mutation_failed]
    assert len(carried) == 1
    assert len(carried[0].competitor_ids) == 2
    assert result.stop_reason == engine.STOP_BUDGET
    store.release_lock()
    ok, message = run_service.verify_run(tmp_path / "run")
    assert ok, message


def test_repeated_mutation_failures_stop_the_run(tmp_path, pool):
    store = store_mod.RunStore.create(tmp_path / "run", {"engine": {}}, pool)
    seed = plugins.write_synthetic_seed(tmp_path / "seed", 0.5)
    config = EngineConfig(budget=1500, max_mutation_failures=3)
    result = engine.run(config, pool, seed, plugins.SyntheticEvaluator(0),
                        FlakyMutator(0, fail_on={1, 2, 3}), store)
    assert result.stop_reason == engine.STOP_MUTATION_FAILURES
    assert len(result.iterations) == 1
    assert result.best.agent_id == "agent-000"
