import pytest


def test_runs_index_lists_stored_runs(finished_run, client):
    resp = client.get("/api/runs")
    assert resp.status_code == 200
    data = resp.get_json()
    assert data == {"runs": ["demo"], "count": 1}


def test_runs_index_is_empty_without_runs(client):
    data = client.get("/api/runs").get_json()
    assert data["count"] == 0 and data["runs"] == []


def test_client_serves_the_fixture_runs_root(client, runs_root):
    assert client.application.config["RUNS_ROOT"] == runs_root, "create_app should use the given runs root"


def test_standings_are_ordered_by_rating(finished_run, client):
    _, result = finished_run
    resp = client.get("/api/runs/demo/standings")
    assert resp.status_code == 200
    data = resp.get_json()
    ratings = [a["rating"] for a in data["agents"]]
    assert ratings == sorted(ratings, reverse=True)
    assert data["best_agent_id"] == result.best.agent_id
    assert {a["agent_id"] for a in data["agents"]} == set(result.agents)


def test_iteration_detail(finished_run, client):
    resp = client.get("/api/runs/demo/iterations/1")
    assert resp.status_code == 200
    data = resp.get_json()
    assert data["record"]["index"] == 1
    assert set(data["elo"]) == {"before", "after", "population"}
    assert data["report"]["iteration"] == 1


def test_ledger_matches_the_run(finished_run, client):
    _, result = finished_run
    data = client.get("/api/runs/demo/ledger").get_json()
    assert data["spent"] == result.ledger.spent
    assert data["total"] == 300
    assert sum(d["count"] for d in data["per_phase"]) == data["spent"]


@pytest.mark.parametrize("path", [
    "/api/runs/nope/standings",
    "/api/runs/nope/ledger",
    "/api/runs/demo/iterations/999",
    "/api/runs/..%2Fdemo/ledger",
    "/api/nothing-here",
])
def test_unknown_resources_are_404_json(finished_run, client, path):
    resp = client.get(path)
    assert resp.status_code == 404
    assert "error" in resp.get_json()


def test_exact_endpoint_defaults(client):
    resp = client.get("/api/noiselab/exact?n=20&acc=0.70,0.69,0.68")
    assert resp.status_code == 200
    data = resp.get_json()
    assert data["tie"] == pytest.approx(0.197, abs=0.0005)
    assert data["top1_strict"] < data["top1_random_tie"] < data["top1_inclusive"]
    assert data["accuracies"] == [0.70, 0.69, 0.68]


def test_exact_endpoint_single_mode(client):
    data = client.get("/api/noiselab/exact?n=1&acc=0.5,0.5&mode=random_tie").get_json()
    assert data["top1"] == pytest.approx(0.5)
    assert data["mode"] == "random_tie"


@pytest.mark.parametrize("query", ["n=abc", "n=0", "acc=0.5", "acc=0.5,2.0", "mode=majority"])
def test_exact_endpoint_rejects_bad_input(client, query):
    resp = client.get(f"/api/noiselab/exact?{query}")
    assert resp.status_code == 400
    assert "error" in resp.get_json()
