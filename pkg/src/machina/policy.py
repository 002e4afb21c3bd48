"""Transition selection: fast-forward, rule-based and LLM-based policies.

A policy receives the current state, the candidate transitions (with guards
already evaluated) and the belief, and yields an :class:`EventSelection`.
Policies are stacked: the fast-forward shortcut always runs first, then each
stage in order until one selects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

from .actions import ArgumentTypeError, coerce_argument
from .belief import Belief, kv_get, render_history
from .errors import MachinaError, SchemaError
from .guards import GuardExpr, evaluate, parse_guard
from .json_extract import first_json_object
from .keypath import ABSENT, JsonValue
from .model import TRIGGER_INTERNAL, ParameterSpec, State, Transition
from .providers import CompletionProvider, CompletionRequest

DEFAULT_HISTORY_BUDGET = 3000
DEFAULT_PARSE_RETRIES = 1


class PolicyError(MachinaError):
    """Base class for selection failures."""


class NoCandidates(PolicyError):
    def __init__(self):
        super().__init__("no guard-passed candidate transitions")


class Unparseable(PolicyError):
    def __init__(self, reply: str):
        super().__init__(f"reply contains no usable JSON object: {reply[:120]!r}")


class UnknownEvent(PolicyError):
    def __init__(self, event: str):
        super().__init__(f"event {event!r} is not among the candidates")
        self.event = event


class MissingArgument(PolicyError):
    def __init__(self, name: str):
        super().__init__(f"missing required argument {name!r}")
        self.name = name


class BadArgumentType(PolicyError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"argument {name!r}: {detail}")
        self.name = name


class RuleArgumentUnresolvable(PolicyError):
    def __init__(self, path: str):
        super().__init__(f"rule argument references absent belief path {path!r}")
        self.path = path


class PolicyFailure(PolicyError):
    """The LLM policy could not produce a usable selection after retries."""


class PolicyExhausted(PolicyError):
    def __init__(self):
        super().__init__("no policy stage produced a selection")


@dataclass(frozen=True)
class CandidateTransition:
    """One enabled transition with its evaluated guard and the external
    parameters that would have to be supplied to select it (union over the
    transition's actions and the exit/entry actions the step would run).
    ``target_description`` feeds the policy prompt."""

    transition: Transition
    guard_passed: bool
    required_external_params: tuple[ParameterSpec, ...] = ()
    target_description: str = ""


@dataclass(frozen=True)
class EventSelection:
    event: str
    arguments: Mapping[str, JsonValue] = field(default_factory=dict)


@dataclass(frozen=True)
class PathRef:
    """Marks a rule argument resolved from the belief at selection time."""

    path: str


@dataclass(frozen=True)
class Rule:
    emit_event: str
    when_state: str | None = None
    when_guard: GuardExpr | None = None
    emit_arguments: Mapping[str, Union[PathRef, JsonValue]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.when_state is None and self.when_guard is None:
            raise MachinaError("a rule needs when_state and/or when_guard")


@dataclass(frozen=True)
class LlmPolicyConfig:
    task_description: str
    output_instruction: str = (
        "Choose the next transition. Reply with exactly one JSON object of the form "
        '{"event": "<event name>", "arguments": {<param name>: <value>}}.'
    )
    history_token_budget: int = DEFAULT_HISTORY_BUDGET
    max_parse_retries: int = DEFAULT_PARSE_RETRIES

    def __post_init__(self) -> None:
        if self.history_token_budget < 1:
            raise MachinaError("history_token_budget must be at least 1")
        if self.max_parse_retries < 0:
            raise MachinaError("max_parse_retries must not be negative")


@dataclass(frozen=True)
class RulePolicy:
    rules: tuple[Rule, ...]


@dataclass(frozen=True)
class LlmPolicy:
    config: LlmPolicyConfig


PolicyStage = Union[RulePolicy, LlmPolicy]


def _selectable(candidates: Sequence[CandidateTransition]) -> list[CandidateTransition]:
    """Candidates a policy may fire: guard passed and internally triggered."""
    return [
        c
        for c in candidates
        if c.guard_passed and c.transition.trigger == TRIGGER_INTERNAL
    ]


def fast_forward(candidates: Sequence[CandidateTransition]) -> EventSelection | None:
    """Skip the policy when the choice is forced.

    Fires only when exactly one guard-passed, internally triggered candidate
    exists and it needs no external parameters (the shortcut cannot invent
    arguments).
    """
    eligible = _selectable(candidates)
    if len(eligible) == 1 and not eligible[0].required_external_params:
        return EventSelection(eligible[0].transition.event, {})
    return None


def rule_decide(
    rules: Sequence[Rule],
    state: State,
    candidates: Sequence[CandidateTransition],
    belief: Belief,
) -> EventSelection | None:
    """First rule that matches the state, passes its guard and emits an
    event present among the guard-passed candidates wins.

    Rules whose event is not a candidate here, or whose arguments do not
    cover the candidate's required parameters, are skipped so one rule list
    can serve many states.
    """
    passing = [c for c in candidates if c.guard_passed]
    for rule in rules:
        if rule.when_state is not None and rule.when_state != state.name:
            continue
        if rule.when_guard is not None and not evaluate(rule.when_guard, belief.kv):
            continue
        candidate = next(
            (c for c in passing if c.transition.event == rule.emit_event), None
        )
        if candidate is None:
            continue
        arguments: dict[str, JsonValue] = {}
        for name, source in rule.emit_arguments.items():
            if isinstance(source, PathRef):
                value = kv_get(belief, source.path)
                if value is ABSENT:
                    raise RuleArgumentUnresolvable(source.path)
                arguments[name] = value
            else:
                arguments[name] = source
        if any(p.name not in arguments for p in candidate.required_external_params):
            continue
        return EventSelection(rule.emit_event, arguments)
    return None


def build_policy_prompt(
    cfg: LlmPolicyConfig,
    state: State,
    candidates: Sequence[CandidateTransition],
    belief: Belief,
) -> str:
    """Deterministic five-section prompt: task description, execution
    history, current state, available transitions, output instruction."""
    passing = [c for c in candidates if c.guard_passed]
    if not passing:
        raise NoCandidates()
    lines = ["# Task", cfg.task_description, ""]
    lines += ["# Execution history", render_history(belief, cfg.history_token_budget), ""]
    lines += ["# Current state", f"{state.name}: {state.description}", ""]
    lines.append("# Available transitions")
    for c in passing:
        t = c.transition
        if c.required_external_params:
            params = ", ".join(
                f"{p.name}: {p.datatype}" + (f" ({p.description})" if p.description else "")
                for p in c.required_external_params
            )
        else:
            params = "none"
        lines.append(f"- {t.event} -> {t.target}: {c.target_description} | params: {params}")
    lines += ["", "# Output instruction", cfg.output_instruction]
    return "\n".join(lines)


def parse_policy_response(
    text: str, candidates: Sequence[CandidateTransition]
) -> EventSelection:
    """Extract the first JSON object from a reply and validate it.

    Expected shape: ``{"event": str, "arguments": {..}?}``. The event must
    belong to a guard-passed candidate and the arguments must cover that
    candidate's required external parameters at their declared datatypes.
    """
    doc = first_json_object(text)
    if doc is None or not isinstance(doc.get("event"), str):
        raise Unparseable(text)
    arguments = doc.get("arguments", {})
    if not isinstance(arguments, dict):
        raise Unparseable(text)
    event = doc["event"]
    candidate = next(
        (c for c in candidates if c.guard_passed and c.transition.event == event), None
    )
    if candidate is None:
        raise UnknownEvent(event)
    coerced = dict(arguments)
    for param in candidate.required_external_params:
        if param.name not in arguments:
            raise MissingArgument(param.name)
        try:
            coerced[param.name] = coerce_argument(arguments[param.name], param.datatype)
        except ArgumentTypeError as exc:
            raise BadArgumentType(param.name, str(exc)) from None
    return EventSelection(event, coerced)


def llm_decide(
    cfg: LlmPolicyConfig,
    provider: CompletionProvider,
    state: State,
    candidates: Sequence[CandidateTransition],
    belief: Belief,
) -> EventSelection:
    """Prompt, complete, parse; on a bad reply retry with the error appended."""
    prompt = build_policy_prompt(cfg, state, candidates, belief)
    last_error: PolicyError | None = None
    for _ in range(cfg.max_parse_retries + 1):
        reply = provider.complete(CompletionRequest(prompt=prompt))
        try:
            return parse_policy_response(reply, candidates)
        except (Unparseable, UnknownEvent, MissingArgument, BadArgumentType) as exc:
            last_error = exc
            prompt += (
                "\n\n# Correction\n"
                f"Your previous reply could not be used: {exc}. "
                "Reply again with exactly one JSON object."
            )
    raise PolicyFailure(str(last_error)) from last_error


def decide(
    stack: Sequence[PolicyStage],
    state: State,
    candidates: Sequence[CandidateTransition],
    belief: Belief,
    provider: CompletionProvider,
) -> EventSelection:
    """Fast-forward, then each stage in order; the first selection wins.

    An empty stack is allowed for machines whose every step fast-forwards;
    any step that actually needs a decision then exhausts the policy.
    """
    shortcut = fast_forward(candidates)
    if shortcut is not None:
        return shortcut
    selectable = _selectable(candidates)
    for stage in stack:
        if isinstance(stage, RulePolicy):
            selection = rule_decide(stage.rules, state, selectable, belief)
            if selection is not None:
                return selection
        elif isinstance(stage, LlmPolicy):
            if selectable:
                return llm_decide(stage.config, provider, state, selectable, belief)
        else:
            raise MachinaError(f"unknown policy stage: {stage!r}")
    raise PolicyExhausted()


# ---------------------------------------------------------------------------
# Rule file loading


def rules_from_value(doc: JsonValue) -> tuple[Rule, ...]:
    """Rules from a decoded JSON array.

    Each entry is ``{"emit_event": str, "when_state": str?, "when_guard":
    <DSL text>?, "emit_arguments": {name: value}?}``; an argument value of
    the form ``{"$ref": "<dotted path>"}`` is resolved from the belief when
    the rule fires, anything else is a literal.
    """
    if not isinstance(doc, list):
        raise SchemaError("", "rules document must be an array")
    rules = []
    for i, raw in enumerate(doc):
        pointer = f"/{i}"
        if not isinstance(raw, dict):
            raise SchemaError(pointer, "rule must be an object")
        unknown = set(raw) - {"emit_event", "when_state", "when_guard", "emit_arguments"}
        if unknown:
            raise SchemaError(pointer, f"unknown keys: {sorted(unknown)}")
        if not isinstance(raw.get("emit_event"), str):
            raise SchemaError(pointer, "rule needs a string 'emit_event'")
        when_state = raw.get("when_state")
        if when_state is not None and not isinstance(when_state, str):
            raise SchemaError(f"{pointer}/when_state", "expected a string")
        when_guard = None
        if "when_guard" in raw:
            if not isinstance(raw["when_guard"], str):
                raise SchemaError(f"{pointer}/when_guard", "expected guard DSL text")
            when_guard = parse_guard(raw["when_guard"])
        arguments: dict[str, Union[PathRef, JsonValue]] = {}
        raw_args = raw.get("emit_arguments", {})
        if not isinstance(raw_args, dict):
            raise SchemaError(f"{pointer}/emit_arguments", "expected an object")
        for name, value in raw_args.items():
            if isinstance(value, dict) and set(value) == {"$ref"} and isinstance(value["$ref"], str):
                arguments[name] = PathRef(value["$ref"])
            else:
                arguments[name] = value
        if when_state is None and when_guard is None:
            raise SchemaError(pointer, "rule needs when_state and/or when_guard")
        rules.append(Rule(raw["emit_event"], when_state, when_guard, arguments))
    return tuple(rules)


def load_rules(path: str | Path) -> tuple[Rule, ...]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"rules file is not valid JSON: {exc.msg}") from None
    return rules_from_value(doc)
