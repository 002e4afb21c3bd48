"""The agent's mutable task memory.

A belief holds the task context (messages that started the task), the
trajectory store (every fired transition), the execution log (every executed
action with its inputs and output) and a key-value store for intermediate
results. :func:`render_history` produces the bounded text block that
LLM-facing prompts embed.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

from .errors import MachinaError
from .keypath import ABSENT, JsonValue, resolve, split_path
from .model import is_identifier

ROLE_USER = "user"
ROLE_SYSTEM = "system"
ROLES = (ROLE_USER, ROLE_SYSTEM)

PHASE_EXIT = "exit"
PHASE_TRANSITION = "transition"
PHASE_ENTRY = "entry"
PHASES = (PHASE_EXIT, PHASE_TRANSITION, PHASE_ENTRY)

TRUNCATION_MARKER = "..."


class StepOutOfOrder(MachinaError):
    """A record's step number does not fit the current trajectory length."""


@dataclass
class TransitionRecord:
    """One fired transition. ``source`` and ``target`` are the active leaf
    states before and after the step (self-transitions repeat the name)."""

    step: int
    source: str
    target: str
    event: str
    event_payload: JsonValue = None


@dataclass
class ActionRecord:
    """One executed action. ``step`` is the trajectory step it belongs to;
    step 0 marks actions that ran while entering the initial state."""

    step: int
    action: str
    inputs: dict[str, JsonValue]
    output: JsonValue
    phase: str


@dataclass
class Belief:
    task_context: list[tuple[str, str]] = field(default_factory=list)
    trajectory: list[TransitionRecord] = field(default_factory=list)
    execution_log: list[ActionRecord] = field(default_factory=list)
    kv: dict[str, JsonValue] = field(default_factory=dict)
    current_state: str | None = None


def new_belief(task_context: Iterable[tuple[str, str]] = ()) -> Belief:
    """Fresh belief with empty stores and no current state."""
    context = []
    for role, text in task_context:
        if role not in ROLES:
            raise MachinaError(f"task context role must be one of {ROLES}, got {role!r}")
        context.append((role, str(text)))
    return Belief(task_context=context)


def record_transition(belief: Belief, rec: TransitionRecord) -> Belief:
    """Append a transition; steps must arrive in order, starting at 1."""
    expected = len(belief.trajectory) + 1
    if rec.step != expected:
        raise StepOutOfOrder(f"transition step {rec.step}, expected {expected}")
    belief.trajectory.append(rec)
    belief.current_state = rec.target
    return belief


def record_action(belief: Belief, rec: ActionRecord) -> Belief:
    """Append an action record.

    The step may reference an existing trajectory step, step 0 (pre-run), or
    the step currently in flight (one past the trajectory length): actions
    execute before their transition record lands.
    """
    if rec.phase not in PHASES:
        raise MachinaError(f"action phase must be one of {PHASES}, got {rec.phase!r}")
    if not 0 <= rec.step <= len(belief.trajectory) + 1:
        raise StepOutOfOrder(
            f"action step {rec.step} does not reference an existing step"
        )
    belief.execution_log.append(rec)
    return belief


def kv_set(belief: Belief, key: str, value: JsonValue) -> Belief:
    if not is_identifier(key):
        raise MachinaError(f"kv key must be an identifier, got {key!r}")
    belief.kv[key] = value
    return belief


def kv_get(belief: Belief, path: str):
    """Resolve a dotted path into the store; ``ABSENT`` when missing."""
    return resolve(belief.kv, split_path(path))


def snapshot(belief: Belief) -> Belief:
    return copy.deepcopy(belief)


def belief_to_trace(belief: Belief) -> dict:
    """JSON-ready trace document (the CLI ``--trace`` payload)."""
    return {
        "task_context": [{"role": r, "text": t} for r, t in belief.task_context],
        "trajectory": [
            {
                "step": r.step,
                "source": r.source,
                "target": r.target,
                "event": r.event,
                "event_payload": r.event_payload,
            }
            for r in belief.trajectory
        ],
        "execution_log": [
            {
                "step": r.step,
                "action": r.action,
                "inputs": r.inputs,
                "output": r.output,
                "phase": r.phase,
            }
            for r in belief.execution_log
        ],
        "kv": belief.kv,
        "current_state": belief.current_state,
    }


# ---------------------------------------------------------------------------
# History rendering


def estimate_tokens(text: str) -> int:
    """Provider-agnostic token estimate: one token per four UTF-8 bytes."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def _dump(value: JsonValue) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _record_lines(belief: Belief) -> list[str]:
    """All records interleaved in step order, oldest first.

    Within a step the transition line leads and its action records follow;
    step 0 actions (initial entry) come before everything else.
    """
    by_step: dict[int, list[str]] = {}
    for rec in belief.execution_log:
        line = (
            f"[step {rec.step}] {rec.phase} action {rec.action}"
            f" inputs={_dump(rec.inputs)} output={_dump(rec.output)}"
        )
        by_step.setdefault(rec.step, []).append(line)

    lines = list(by_step.get(0, []))
    for rec in belief.trajectory:
        line = f"[step {rec.step}] transition {rec.source} --{rec.event}--> {rec.target}"
        if rec.event_payload:
            line += f" payload={_dump(rec.event_payload)}"
        lines.append(line)
        lines.extend(by_step.get(rec.step, []))
    max_step = len(belief.trajectory)
    for step in sorted(s for s in by_step if s > max_step):
        lines.extend(by_step[step])
    return lines


def _truncate_tail(line: str, budget: int) -> str:
    """Keep the newest tail of ``line`` within ``budget`` estimated tokens,
    dropping bytes from the head and prefixing a marker."""
    max_bytes = budget * 4
    encoded = line.encode("utf-8")
    tail = encoded[-max_bytes:]
    # avoid splitting a multi-byte sequence at the cut point
    text = tail.decode("utf-8", errors="ignore")
    return TRUNCATION_MARKER + text


def render_history(belief: Belief, token_budget: int) -> str:
    """Newest-last rendering of the interleaved record history.

    Includes the maximal chronological suffix of records whose estimated
    size fits ``token_budget``; when even the newest record alone exceeds
    the budget, that record is included truncated head-first.
    """
    if token_budget < 1:
        raise MachinaError("token budget must be at least 1")
    lines = _record_lines(belief)
    if not lines:
        return ""
    selected: list[str] = []
    total = 0
    for line in reversed(lines):
        cost = estimate_tokens(line + "\n")
        if not selected and cost > token_budget:
            return _truncate_tail(line, token_budget)
        if total + cost > token_budget:
            break
        selected.append(line)
        total += cost
    return "\n".join(reversed(selected))
