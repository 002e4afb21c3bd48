"""Agent execution: event dispatch, hierarchical transition resolution,
exit/transition/entry action ordering and the policy-driven run loop.

Step semantics follow statechart convention. Resolving an event walks the
active leaf's own transitions first, then each ancestor's, innermost first,
taking the first declaration whose guard passes. A step exits the active
states innermost-out up to (excluding) the least common ancestor of source
and target, runs the transition's actions in declaration order, then enters
the target chain outermost-in, descending composite ``initial`` links to a
leaf. A self-transition therefore exits and re-enters its state. The event
payload is offered as external arguments to every action the step fires.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .actions import ActionContext, ActionRegistry, ArgumentTypeError, coerce_argument
from .belief import (
    PHASE_ENTRY,
    PHASE_EXIT,
    PHASE_TRANSITION,
    ActionRecord,
    Belief,
    TransitionRecord,
    kv_get,
    kv_set,
    record_action,
    record_transition,
    snapshot,
)
from .errors import MachinaError
from .guards import evaluate_text, truthy
from .keypath import ABSENT, JsonValue
from .model import (
    GUARD_ACTION,
    GUARD_EXPRESSION,
    TRIGGER_EXTERNAL,
    ActionSpec,
    Condition,
    State,
    StateMachine,
    Transition,
    ValidationReport,
    enabled_transitions,
    initial_entry_path,
    is_end,
    parent_chain,
    start_state,
    validate_machine,
)
from .policy import CandidateTransition, EventSelection, PolicyStage, decide
from .providers import CallStats, CompletionProvider

STATUS_COMPLETED = "completed"
STATUS_WAITING = "waiting"
STATUS_BUDGET_EXHAUSTED = "budget_exhausted"
STATUS_FAILED = "failed"

DEFAULT_MAX_TRANSITIONS = 10

UNHANDLED_ERROR = "error"
UNHANDLED_IGNORE = "ignore"


class UnhandledEvent(MachinaError):
    def __init__(self, event: str, state: str):
        super().__init__(f"no transition for event {event!r} at state {state!r}")
        self.event = event
        self.state = state


class MissingExternalArgument(MachinaError):
    def __init__(self, name: str):
        super().__init__(f"missing external argument {name!r}")
        self.name = name


class MissingInternalValue(MachinaError):
    def __init__(self, key: str):
        super().__init__(f"belief has no value under {key!r}")
        self.key = key


class ActionFailure(MachinaError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"action {name!r} failed: {detail}")
        self.action = name
        self.detail = detail


class UnknownGuardAction(MachinaError):
    def __init__(self, name: str):
        super().__init__(f"guard action {name!r} is not registered")
        self.name = name


class InvalidMachine(MachinaError):
    def __init__(self, report: ValidationReport):
        details = "; ".join(str(v) for v in report.errors)
        super().__init__(f"machine failed validation: {details}")
        self.report = report


class AgentNotStarted(MachinaError):
    def __init__(self):
        super().__init__("agent has no current state; run it first")


@dataclass(frozen=True)
class EventInstance:
    """A named trigger with an optional JSON payload."""

    name: str
    payload: Mapping[str, JsonValue] = field(default_factory=dict)


@dataclass(frozen=True)
class RunLimits:
    max_transitions: int = DEFAULT_MAX_TRANSITIONS
    unhandled_event: str = UNHANDLED_ERROR

    def __post_init__(self) -> None:
        if self.max_transitions < 1:
            raise MachinaError("max_transitions must be at least 1")
        if self.unhandled_event not in (UNHANDLED_ERROR, UNHANDLED_IGNORE):
            raise MachinaError("unhandled_event must be 'error' or 'ignore'")


@dataclass(frozen=True)
class RunResult:
    status: str
    output: JsonValue
    belief_snapshot: Belief
    stats: CallStats
    reason: str | None = None


@dataclass(frozen=True)
class StepOutcome:
    event: EventInstance
    transition: Transition
    source_leaf: str
    target_leaf: str
    records: tuple[ActionRecord, ...]


@dataclass
class Agent:
    """A machine bound to a belief, a policy stack, actions and a provider."""

    machine: StateMachine
    belief: Belief
    policy: tuple[PolicyStage, ...]
    registry: ActionRegistry
    provider: CompletionProvider
    limits: RunLimits = RunLimits()

    def __post_init__(self) -> None:
        report = validate_machine(self.machine, self.registry.names())
        if not report.ok:
            raise InvalidMachine(report)

    @property
    def started(self) -> bool:
        return self.belief.current_state is not None


# ---------------------------------------------------------------------------
# Guards


def eval_guard(
    guard: Condition,
    belief: Belief,
    registry: ActionRegistry,
    provider: CompletionProvider,
) -> bool:
    """Evaluate a transition guard against the belief.

    Expression guards run over the key-value store. Action guards invoke the
    named registered action, binding its internal parameters from the
    belief, and coerce the output by guard truthiness. Guard evaluation is
    not logged as an executed action; any provider calls it makes still
    count in the provider's stats.
    """
    if guard.kind == GUARD_EXPRESSION:
        return evaluate_text(guard.expression or "", belief.kv)
    if guard.kind != GUARD_ACTION:
        raise MachinaError(f"unknown guard kind {guard.kind!r}")
    name = guard.action_name or ""
    registered = registry.lookup(name)
    if registered is None:
        raise UnknownGuardAction(name)
    inputs: dict[str, JsonValue] = {}
    for param in registered.params:
        if param.source != "internal":
            continue
        value = kv_get(belief, param.resolved_source_key)
        if value is ABSENT:
            raise MissingInternalValue(param.resolved_source_key)
        inputs[param.name] = value
    context = ActionContext(provider=provider, spec=ActionSpec(name))
    try:
        output = registered.impl(inputs, context)
    except MachinaError:
        raise
    except Exception as exc:
        raise ActionFailure(name, str(exc)) from exc
    return truthy(output)


# ---------------------------------------------------------------------------
# Step planning


@dataclass(frozen=True)
class _StepPlan:
    exit_states: tuple[State, ...]
    entry_states: tuple[State, ...]
    target_leaf: str


def _step_plan(sm: StateMachine, leaf: str, transition: Transition) -> _StepPlan:
    source_chain = [leaf] + parent_chain(sm, leaf)
    target_ancestors = parent_chain(sm, transition.target)
    chain_set = set(source_chain)
    lca = next((a for a in target_ancestors if a in chain_set), None)

    exits = []
    for name in source_chain:
        if name == lca:
            break
        exits.append(sm.state(name))

    entry_names = []
    for name in target_ancestors:
        if name == lca:
            break
        entry_names.append(name)
    entry_names.reverse()
    entry_names.extend(initial_entry_path(sm, transition.target))
    entries = tuple(sm.state(n) for n in entry_names)
    return _StepPlan(tuple(exits), entries, entry_names[-1])


def _step_action_specs(plan: _StepPlan, transition: Transition) -> list[tuple[str, ActionSpec]]:
    specs = []
    for st in plan.exit_states:
        if st.exit_action:
            specs.append((PHASE_EXIT, st.exit_action))
    for spec in transition.actions:
        specs.append((PHASE_TRANSITION, spec))
    for st in plan.entry_states:
        if st.entry_action:
            specs.append((PHASE_ENTRY, st.entry_action))
    return specs


def candidate_transitions(agent: Agent) -> list[CandidateTransition]:
    """All transitions enabled at the active leaf, each with its guard
    evaluated exactly once and its required external parameters computed
    from the actions the step would fire."""
    leaf = agent.belief.current_state
    if leaf is None:
        raise AgentNotStarted()
    sm = agent.machine
    candidates = []
    for t in enabled_transitions(sm, leaf):
        passed = (
            eval_guard(t.guard, agent.belief, agent.registry, agent.provider)
            if t.guard is not None
            else True
        )
        plan = _step_plan(sm, leaf, t)
        required: dict[str, object] = {}
        for _, spec in _step_action_specs(plan, t):
            for param in spec.external_params():
                required.setdefault(param.name, param)
        candidates.append(
            CandidateTransition(
                transition=t,
                guard_passed=passed,
                required_external_params=tuple(required.values()),
                target_description=sm.state(t.target).description,
            )
        )
    return candidates


def resolve_transition(
    sm: StateMachine,
    active_leaf: str,
    event: str,
    belief: Belief,
    registry: ActionRegistry,
    provider: CompletionProvider,
) -> Transition:
    """First enabled transition for ``event`` whose guard passes.

    Guards are evaluated lazily in resolution order, each at most once.
    """
    for t in enabled_transitions(sm, active_leaf):
        if t.event != event:
            continue
        if t.guard is None or eval_guard(t.guard, belief, registry, provider):
            return t
    raise UnhandledEvent(event, active_leaf)


# ---------------------------------------------------------------------------
# Action execution


def execute_action(
    registry: ActionRegistry,
    spec: ActionSpec,
    external_args: Mapping[str, JsonValue],
    belief: Belief,
    provider: CompletionProvider,
    *,
    phase: str = PHASE_TRANSITION,
    step: int = 0,
) -> ActionRecord:
    """Bind parameters, run the action, store its output, log the record.

    External parameters come from ``external_args`` and are datatype
    checked; internal parameters are read from the key-value store under
    their source keys. The output lands in the store under the
    action's output key.
    """
    registered = registry.lookup(spec.name)
    if registered is None:
        raise ActionFailure(spec.name, "not registered")
    inputs: dict[str, JsonValue] = {}
    for param in spec.params:
        if param.source == "external":
            if param.name not in external_args:
                raise MissingExternalArgument(param.name)
            try:
                inputs[param.name] = coerce_argument(external_args[param.name], param.datatype)
            except ArgumentTypeError as exc:
                raise ActionFailure(spec.name, f"argument {param.name!r}: {exc}") from None
        else:
            value = kv_get(belief, param.resolved_source_key)
            if value is ABSENT:
                raise MissingInternalValue(param.resolved_source_key)
            inputs[param.name] = value
    context = ActionContext(provider=provider, spec=spec)
    try:
        output = registered.impl(inputs, context)
    except MachinaError as exc:
        raise ActionFailure(spec.name, str(exc)) from exc
    except Exception as exc:
        raise ActionFailure(spec.name, str(exc)) from exc
    kv_set(belief, spec.resolved_output_key, output)
    record = ActionRecord(step=step, action=spec.name, inputs=inputs, output=output, phase=phase)
    record_action(belief, record)
    return record


# ---------------------------------------------------------------------------
# Dispatch and run


def dispatch(
    agent: Agent,
    event: EventInstance,
    _candidates: Optional[Sequence[CandidateTransition]] = None,
) -> StepOutcome | None:
    """Apply one event to the agent's machine.

    Returns ``None`` when the event is unhandled and the limits say to
    ignore it. If an action fails mid-step the transition record is still
    appended (the log keeps referencing valid steps) and the failure
    propagates.
    """
    leaf = agent.belief.current_state
    if leaf is None:
        raise AgentNotStarted()

    transition: Transition | None = None
    if _candidates is not None:
        for c in _candidates:
            if c.transition.event == event.name and c.guard_passed:
                transition = c.transition
                break
    else:
        try:
            transition = resolve_transition(
                agent.machine, leaf, event.name, agent.belief, agent.registry, agent.provider
            )
        except UnhandledEvent:
            transition = None
    if transition is None:
        if agent.limits.unhandled_event == UNHANDLED_IGNORE:
            return None
        raise UnhandledEvent(event.name, leaf)

    plan = _step_plan(agent.machine, leaf, transition)
    step = len(agent.belief.trajectory) + 1
    payload = dict(event.payload)
    records: list[ActionRecord] = []
    try:
        for phase, spec in _step_action_specs(plan, transition):
            records.append(
                execute_action(
                    agent.registry,
                    spec,
                    payload,
                    agent.belief,
                    agent.provider,
                    phase=phase,
                    step=step,
                )
            )
    finally:
        record_transition(
            agent.belief,
            TransitionRecord(
                step=step,
                source=leaf,
                target=plan.target_leaf,
                event=event.name,
                event_payload=payload or None,
            ),
        )
    return StepOutcome(event, transition, leaf, plan.target_leaf, tuple(records))


def _enter_initial(agent: Agent) -> None:
    path = initial_entry_path(agent.machine, start_state(agent.machine))
    agent.belief.current_state = path[-1]
    for name in path:
        state = agent.machine.state(name)
        if state.entry_action:
            execute_action(
                agent.registry,
                state.entry_action,
                {},
                agent.belief,
                agent.provider,
                phase=PHASE_ENTRY,
                step=0,
            )


def start(agent: Agent) -> None:
    """Enter the start state's initial path once, firing entry actions.

    ``run`` calls this implicitly; it is public for callers that drive the
    machine through :func:`dispatch` directly.
    """
    if not agent.started:
        _enter_initial(agent)


def _last_output(belief: Belief) -> JsonValue:
    return belief.execution_log[-1].output if belief.execution_log else None


def _result(agent: Agent, status: str, reason: str | None = None) -> RunResult:
    return RunResult(
        status=status,
        output=_last_output(agent.belief),
        belief_snapshot=snapshot(agent.belief),
        stats=agent.provider.snapshot_stats(),
        reason=reason,
    )


def run(agent: Agent, initial_event: EventInstance | None = None) -> RunResult:
    """Drive the agent until it completes, waits, exhausts its budget or fails.

    A fresh agent first enters the start state's initial path, firing entry
    actions along it. The loop then repeats: an end state completes the run;
    if every guard-passed candidate needs an external trigger the run waits
    (the belief is preserved, so a later ``run(agent, event)`` resumes); the
    transition budget ends the run once the trajectory reaches the limit;
    otherwise the policy picks an event and the step is dispatched. The
    result carries the output of the last executed action.
    """
    try:
        if not agent.started:
            _enter_initial(agent)
        pending = initial_event
        while True:
            leaf = agent.belief.current_state
            assert leaf is not None
            if is_end(agent.machine, leaf):
                return _result(agent, STATUS_COMPLETED)
            candidates = candidate_transitions(agent)
            passing = [c for c in candidates if c.guard_passed]
            if pending is not None:
                event, pending = pending, None
                if len(agent.belief.trajectory) >= agent.limits.max_transitions:
                    return _result(agent, STATUS_BUDGET_EXHAUSTED)
                dispatch(agent, event, candidates)
                continue
            if all(c.transition.trigger == TRIGGER_EXTERNAL for c in passing):
                return _result(agent, STATUS_WAITING)
            if len(agent.belief.trajectory) >= agent.limits.max_transitions:
                return _result(agent, STATUS_BUDGET_EXHAUSTED)
            selection: EventSelection = decide(
                agent.policy,
                agent.machine.state(leaf),
                candidates,
                agent.belief,
                agent.provider,
            )
            dispatch(agent, EventInstance(selection.event, dict(selection.arguments)), candidates)
    except MachinaError as exc:
        return _result(agent, STATUS_FAILED, reason=str(exc))
