"""
Comparative error reports.

Each iteration's report points the mutator at the examples where competitors
diverge: for binary tasks, who uniquely solved or failed what; for continuous
tasks, the examples with the largest score gaps.
"""

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from errors import AlignmentError, ArityError
from evaluation import EvalOutcome, mean_score

KIND_BINARY = "binary"
KIND_CONTINUOUS = "continuous"
KINDS = (KIND_BINARY, KIND_CONTINUOUS)

# Correct-but-over-budget answers score 0.9 and still count as solved.
SOLVED_THRESHOLD = 0.9
DEFAULT_DIVERGENCE_CAP = 10
DEFAULT_BYTE_CAP = 4096
TRUNCATION_MARKER = " ...[truncated {} bytes]"


@dataclass
class DeltaEntry:
    example_id: str
    scores: Dict[str, float]
    delta: float

    def to_dict(self) -> Dict:
        return {"example_id": self.example_id, "scores": dict(self.scores), "delta": self.delta}


@dataclass
class ComparativeReport:
    iteration: int
    kind: str
    per_agent_means: Dict[str, float]
    unique_solved: Dict[str, List[str]] = field(default_factory=dict)
    unique_failed: Dict[str, List[str]] = field(default_factory=dict)
    top_deltas: List[DeltaEntry] = field(default_factory=list)
    diagnostics_index: Dict[Tuple[str, str], str] = field(default_factory=dict)
    excerpts: Dict[Tuple[str, str], str] = field(default_factory=dict)
    ratings: Dict[str, float] = field(default_factory=dict)
    divergence_cap: int = DEFAULT_DIVERGENCE_CAP

    def divergent_examples(self) -> List[str]:
        seen: List[str] = []
        if self.kind == KIND_BINARY:
            for ids in list(self.unique_solved.values()) + list(self.unique_failed.values()):
                seen.extend(i for i in ids if i not in seen)
        else:
            seen = [d.example_id for d in self.top_deltas]
        return seen

    def to_dict(self) -> Dict:
        return {
            "iteration": self.iteration,
            "kind": self.kind,
            "per_agent_means": dict(self.per_agent_means),
            "unique_solved": {a: list(ids) for a, ids in self.unique_solved.items()},
            "unique_failed": {a: list(ids) for a, ids in self.unique_failed.items()},
            "top_deltas": [d.to_dict() for d in self.top_deltas],
            "diagnostics_index": [{"agent_id": a, "example_id": e, "locator": loc}
                                  for (a, e), loc in self.diagnostics_index.items()],
            "excerpts": [{"agent_id": a, "example_id": e, "text": text}
                         for (a, e), text in self.excerpts.items()],
            "ratings": dict(self.ratings),
            "divergence_cap": self.divergence_cap,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ComparativeReport":
        return cls(
            iteration=int(data["iteration"]),
            kind=data["kind"],
            per_agent_means={a: float(m) for a, m in data["per_agent_means"].items()},
            unique_solved={a: list(ids) for a, ids in data.get("unique_solved", {}).items()},
            unique_failed={a: list(ids) for a, ids in data.get("unique_failed", {}).items()},
            top_deltas=[DeltaEntry(d["example_id"], dict(d["scores"]), float(d["delta"]))
                        for d in data.get("top_deltas", [])],
            diagnostics_index={(d["agent_id"], d["example_id"]): d["locator"]
                               for d in data.get("diagnostics_index", [])},
            excerpts={(d["agent_id"], d["example_id"]): d["text"] for d in data.get("excerpts", [])},
            ratings={a: float(r) for a, r in data.get("ratings", {}).items()},
            divergence_cap=int(data.get("divergence_cap", DEFAULT_DIVERGENCE_CAP)),
        )


DIAGNOSTICS_DIR = "diagnostics"


def diagnostics_locator(agent_id: str, example_id: str, root: str = DIAGNOSTICS_DIR) -> str:
    return f"{root}/{agent_id}/{example_id}.txt"


def diagnostics_text(outcome: EvalOutcome) -> str:
    text = outcome.diagnostics or ""
    if outcome.agent_stdout:
        text += f"\n--- agent_stdout ---\n{outcome.agent_stdout}"
    return text


def _aligned_examples(outcomes: Mapping[str, Sequence[EvalOutcome]]) -> List[str]:
    sequences = {agent: [o.example_id for o in outs] for agent, outs in outcomes.items()}
    reference = next(iter(sequences.values()))
    for agent, ids in sequences.items():
        if ids != reference:
            raise AlignmentError(f"Agent {agent} was evaluated on a different example set.")
    ordered: List[str] = []
    for example_id in reference:
        if example_id not in ordered:
            ordered.append(example_id)
    return ordered


def build_report(outcomes: Mapping[str, Sequence[EvalOutcome]], kind: str = KIND_BINARY,
                 iteration: int = 0, divergence_cap: int = DEFAULT_DIVERGENCE_CAP,
                 ratings: Optional[Mapping[str, float]] = None,
                 diagnostics_root: str = DIAGNOSTICS_DIR) -> ComparativeReport:
    """
    Comparative analysis of competitors evaluated on the same examples.
    Diagnostics locators are diagnostics_root/<agent>/<example>.txt.
    """
    if kind not in KINDS:
        raise ValueError(f"Unknown report kind {kind!r}.")
    if not outcomes:
        raise ArityError("build_report needs at least one agent.")
    examples = _aligned_examples(outcomes)
    agents = list(outcomes)
    by_example = {agent: {o.example_id: o for o in outs} for agent, outs in outcomes.items()}

    report = ComparativeReport(
        iteration=iteration,
        kind=kind,
        per_agent_means={agent: mean_score(outs) for agent, outs in outcomes.items()},
        ratings=dict(ratings or {}),
        divergence_cap=divergence_cap,
    )

    if kind == KIND_BINARY:
        report.unique_solved = {a: [] for a in agents}
        report.unique_failed = {a: [] for a in agents}
        for example_id in examples:
            solved = {a for a in agents if by_example[a][example_id].score >= SOLVED_THRESHOLD}
            for a in agents:
                others_solved = solved - {a}
                if a in solved and not others_solved:
                    report.unique_solved[a].append(example_id)
                elif a not in solved and others_solved:
                    report.unique_failed[a].append(example_id)
    else:
        entries = []
        for example_id in examples:
            scores = {a: by_example[a][example_id].score for a in agents}
            delta = max((abs(scores[a] - scores[b]) for a, b in combinations(agents, 2)), default=0.0)
            if delta > 0:
                entries.append(DeltaEntry(example_id, scores, delta))
        entries.sort(key=lambda d: d.delta, reverse=True)
        report.top_deltas = entries[:divergence_cap]

    for example_id in report.divergent_examples():
        for a in agents:
            outcome = by_example[a][example_id]
            report.diagnostics_index[(a, example_id)] = diagnostics_locator(a, example_id, diagnostics_root)
            text = diagnostics_text(outcome)
            if text:
                report.excerpts[(a, example_id)] = text
    return report


def truncate_bytes(text: str, byte_cap: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= byte_cap:
        return text
    kept = raw[:byte_cap].decode("utf-8", errors="ignore")
    return kept + TRUNCATION_MARKER.format(len(raw) - byte_cap)


def _render_ids(lines: List[str], label: str, ids: List[str], cap: int) -> None:
    shown = ids[:cap]
    extra = f" (+{len(ids) - cap} more)" if len(ids) > cap else ""
    lines.append(f"  {label}: {', '.join(shown) if shown else '-'}{extra}")


def render_text(report: ComparativeReport, byte_cap: int = DEFAULT_BYTE_CAP) -> str:
    """Stable plain-text rendering handed to the mutator."""
    lines = [f"# Comparative report, iteration {report.iteration} ({report.kind})", ""]

    lines.append("## Standings")
    if report.ratings:
        for agent, rating in sorted(report.ratings.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"  {agent}: {rating:.2f}")
    else:
        lines.append("  (no ratings)")
    lines.append("")

    lines.append("## Mean scores")
    for agent, mean in report.per_agent_means.items():
        lines.append(f"  {agent}: {mean:.4f}")
    lines.append("")

    divergent = report.divergent_examples()
    if not divergent:
        lines.append("## No divergence")
        lines.append("  All competitors produced the same results on every example.")
        lines.append("")
    elif report.kind == KIND_BINARY:
        lines.append("## Divergence")
        for agent in report.per_agent_means:
            lines.append(f"{agent}:")
            _render_ids(lines, "uniquely solved", report.unique_solved.get(agent, []), report.divergence_cap)
            _render_ids(lines, "failed where others solved", report.unique_failed.get(agent, []),
                        report.divergence_cap)
        lines.append("")
    else:
        lines.append("## Largest score deltas")
        for entry in report.top_deltas:
            scores = ", ".join(f"{a}={s:g}" for a, s in entry.scores.items())
            lines.append(f"  {entry.example_id}: delta {entry.delta:g} ({scores})")
        lines.append("")

    if report.excerpts:
        lines.append("## Diagnostics")
        for example_id in divergent[:report.divergence_cap]:
            for agent in report.per_agent_means:
                text = report.excerpts.get((agent, example_id))
                if not text:
                    continue
                lines.append(f"### {agent} / {example_id}")
                lines.append(truncate_bytes(text, byte_cap))
        lines.append("")
    return "\n".join(lines)
