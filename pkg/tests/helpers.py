"""Shared builders for the test suite."""

from __future__ import annotations

import json
import random

from machina.actions import builtin_registry
from machina.belief import new_belief
from machina.engine import Agent, RunLimits
from machina.harness import builtin_machine, builtin_scene
from machina.machine_io import parse_machine
from machina.model import StateMachine
from machina.providers import ScriptedProvider


def machine_from(doc: dict) -> StateMachine:
    """Build a machine through the JSON parser, as production code would."""
    return parse_machine(json.dumps(doc))


def state(name: str, **extra) -> dict:
    return {"name": name, "description": "", **extra}


MINIMAL_DOC = {
    "name": "m",
    "states": [{"name": "a", "description": "", "tags": ["start", "end"]}],
    "transitions": [],
}


def budget_cycle_doc() -> dict:
    """Two states looping internally forever, plus an unreachable end."""
    return {
        "name": "cycle",
        "states": [
            state("A", tags=["start"]),
            state("B"),
            state("C", tags=["end"]),
        ],
        "transitions": [
            {"source": "A", "target": "B", "event": "go"},
            {"source": "B", "target": "A", "event": "back"},
        ],
    }


def linear_doc(n: int = 5) -> dict:
    """A straight chain of n states with one internal transition each."""
    states = [state(f"s{i}", tags=(["start"] if i == 1 else [])) for i in range(1, n + 1)]
    states[-1]["tags"] = ["end"]
    transitions = [
        {"source": f"s{i}", "target": f"s{i + 1}", "event": "next"} for i in range(1, n)
    ]
    return {"name": "linear", "states": states, "transitions": transitions}


def h3_agent(limits: RunLimits | None = None) -> Agent:
    return Agent(
        machine=builtin_machine("h3"),
        belief=new_belief(),
        policy=(),
        registry=builtin_registry(),
        provider=ScriptedProvider.from_replies([]),
        limits=limits or RunLimits(),
    )


def agent_for(doc_or_machine, provider=None, policy=(), limits=None, belief=None) -> Agent:
    machine = (
        doc_or_machine
        if isinstance(doc_or_machine, StateMachine)
        else machine_from(doc_or_machine)
    )
    return Agent(
        machine=machine,
        belief=belief if belief is not None else new_belief(),
        policy=tuple(policy),
        registry=builtin_registry(),
        provider=provider or ScriptedProvider.from_replies([]),
        limits=limits or RunLimits(),
    )


def s1_scene():
    return builtin_scene("s1")


# ---------------------------------------------------------------------------
# Random flat machines and the 20-line reference interpreter


def random_flat_machine_doc(rnd: random.Random, index: int) -> dict:
    n_states = rnd.randint(2, 6)
    names = [f"s{i}" for i in range(n_states)]
    ends = set(rnd.sample(names[1:], rnd.randint(1, n_states - 1)))
    states = []
    for i, name in enumerate(names):
        tags = []
        if i == 0:
            tags.append("start")
        if name in ends:
            tags.append("end")
        states.append({"name": name, "description": "", "tags": tags})
    sources = [n for n in names if n not in ends]
    events = [f"e{i}" for i in range(4)]
    transitions = [
        {
            "source": rnd.choice(sources),
            "target": rnd.choice(names),
            "event": rnd.choice(events),
            "trigger": "external",
        }
        for _ in range(rnd.randint(1, 10))
    ]
    return {"name": f"flat{index}", "states": states, "transitions": transitions}


def reference_trajectory(doc: dict, events: list[str]) -> list[tuple[str, str, str]]:
    """Independent interpreter for flat, guardless machines: first declared
    transition of the current state matching the event fires; anything else
    is dropped."""
    table: dict[str, list[tuple[str, str]]] = {}
    for t in doc["transitions"]:
        table.setdefault(t["source"], []).append((t["event"], t["target"]))
    current = next(s["name"] for s in doc["states"] if "start" in s.get("tags", []))
    out = []
    for ev in events:
        for event, target in table.get(current, []):
            if event == ev:
                out.append((current, ev, target))
                current = target
                break
    return out
