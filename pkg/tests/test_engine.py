import random

import pytest

from machina.actions import builtin_registry
from machina.belief import kv_get, kv_set, new_belief
from machina.engine import (
    ActionFailure,
    Agent,
    EventInstance,
    InvalidMachine,
    MissingExternalArgument,
    MissingInternalValue,
    RunLimits,
    UnhandledEvent,
    UnknownGuardAction,
    candidate_transitions,
    dispatch,
    eval_guard,
    execute_action,
    resolve_transition,
    run,
    start,
)
from machina.guards import GuardTypeError
from machina.harness import make_qa_agent
from machina.model import (
    ActionSpec,
    Condition,
    ParameterSpec,
)
from machina.policy import LlmPolicy, LlmPolicyConfig
from machina.providers import ScriptedProvider
from machina.scene import scene_to_json_value
from helpers import (
    agent_for,
    budget_cycle_doc,
    h3_agent,
    linear_doc,
    machine_from,
    random_flat_machine_doc,
    reference_trajectory,
    s1_scene,
    state,
)


def seeded_s1_belief():
    belief = new_belief()
    kv_set(belief, "scene", scene_to_json_value(s1_scene()))
    return belief


def scene_registry_with_guard():
    registry = builtin_registry()

    def has_metal(inputs, ctx):
        return any(o["material"] == "metal" for o in inputs["scene"]["objects"])

    registry.register(
        "has_metal",
        (ParameterSpec("scene", "internal", "json"),),
        has_metal,
        output_datatype="boolean",
    )
    return registry


class TestEvalGuard:
    def test_expression_true(self):
        belief = new_belief()
        kv_set(belief, "retries", 1)
        guard = Condition("expression", expression="retries < 2")
        assert eval_guard(guard, belief, builtin_registry(), ScriptedProvider.from_replies([]))

    def test_exists_missing_key(self):
        guard = Condition("expression", expression="exists answer")
        assert not eval_guard(
            guard, new_belief(), builtin_registry(), ScriptedProvider.from_replies([])
        )

    def test_action_guard_over_scene(self):
        guard = Condition("action", action_name="has_metal")
        assert eval_guard(
            guard,
            seeded_s1_belief(),
            scene_registry_with_guard(),
            ScriptedProvider.from_replies([]),
        )

    def test_unknown_guard_action(self):
        guard = Condition("action", action_name="missing")
        with pytest.raises(UnknownGuardAction):
            eval_guard(guard, new_belief(), builtin_registry(), ScriptedProvider.from_replies([]))

    def test_guard_type_error_passthrough(self):
        belief = new_belief()
        kv_set(belief, "name", "abc")
        guard = Condition("expression", expression="name < 3")
        with pytest.raises(GuardTypeError):
            eval_guard(guard, belief, builtin_registry(), ScriptedProvider.from_replies([]))

    def test_action_guard_not_logged(self):
        belief = seeded_s1_belief()
        guard = Condition("action", action_name="has_metal")
        eval_guard(belief=belief, guard=guard, registry=scene_registry_with_guard(),
                   provider=ScriptedProvider.from_replies([]))
        assert belief.execution_log == []


class TestResolve:
    def test_ancestor_transition(self):
        agent = h3_agent()
        t = resolve_transition(
            agent.machine, "Leaf", "e2", agent.belief, agent.registry, agent.provider
        )
        assert (t.source, t.target) == ("Mid", "Done")

    def test_own_before_ancestors(self):
        agent = h3_agent()
        t = resolve_transition(
            agent.machine, "Leaf", "e1", agent.belief, agent.registry, agent.provider
        )
        assert (t.source, t.target) == ("Leaf", "Leaf")

    def test_unhandled(self):
        agent = h3_agent()
        with pytest.raises(UnhandledEvent):
            resolve_transition(
                agent.machine, "Leaf", "e9", agent.belief, agent.registry, agent.provider
            )

    def test_guard_selects_among_same_event(self):
        doc = {
            "name": "m",
            "states": [state("a", tags=["start"]), state("b", tags=["end"]), state("c", tags=["end"])],
            "transitions": [
                {"source": "a", "target": "b", "event": "go", "guard": {"expr": "x == 1"}},
                {"source": "a", "target": "c", "event": "go"},
            ],
        }
        agent = agent_for(doc)
        t = resolve_transition(agent.machine, "a", "go", agent.belief, agent.registry, agent.provider)
        assert t.target == "c"
        kv_set(agent.belief, "x", 1)
        t = resolve_transition(agent.machine, "a", "go", agent.belief, agent.registry, agent.provider)
        assert t.target == "b"


class TestExecuteAction:
    def test_count_objects(self):
        belief = new_belief()
        kv_set(belief, "objects", ["o1"])
        spec = ActionSpec(
            "countObjects",
            output_key="count",
            params=(ParameterSpec("ids", "internal", "json", source_key="objects"),),
        )
        record = execute_action(
            builtin_registry(), spec, {}, belief, ScriptedProvider.from_replies([])
        )
        assert record.output == 1
        assert kv_get(belief, "count") == 1

    def test_missing_internal_value(self):
        spec = ActionSpec(
            "extractObjects",
            params=(
                ParameterSpec("question", "internal", "string"),
                ParameterSpec("scene", "internal", "json"),
            ),
        )
        belief = new_belief()
        kv_set(belief, "question", "how many?")
        with pytest.raises(MissingInternalValue) as err:
            execute_action(builtin_registry(), spec, {}, belief, ScriptedProvider.from_replies([]))
        assert err.value.key == "scene"

    def test_note_records_text(self):
        spec = ActionSpec("note", params=(ParameterSpec("text", "external", "string"),))
        record = execute_action(
            builtin_registry(), spec, {"text": "x"}, new_belief(), ScriptedProvider.from_replies([])
        )
        assert record.output == "x"
        assert record.inputs == {"text": "x"}

    def test_missing_external_argument(self):
        spec = ActionSpec("note", params=(ParameterSpec("text", "external", "string"),))
        with pytest.raises(MissingExternalArgument):
            execute_action(builtin_registry(), spec, {}, new_belief(), ScriptedProvider.from_replies([]))

    def test_impl_errors_become_action_failure(self):
        spec = ActionSpec("filter", params=(ParameterSpec("predicate", "external", "json"),
                                            ParameterSpec("scene", "internal", "json")))
        belief = new_belief()
        kv_set(belief, "scene", {"objects": "not a list"})
        with pytest.raises(ActionFailure):
            execute_action(builtin_registry(), spec, {"predicate": {}}, belief,
                           ScriptedProvider.from_replies([]))

    def test_inputs_restricted_to_declared_params(self):
        spec = ActionSpec("note", params=(ParameterSpec("text", "external", "string"),))
        record = execute_action(
            builtin_registry(), spec, {"text": "x", "extra": 1}, new_belief(),
            ScriptedProvider.from_replies([]),
        )
        assert set(record.inputs) == {"text"}


def h3_marker_sequence(agent):
    return [(r.phase, r.output) for r in agent.belief.execution_log]


class TestDispatchH3:
    def test_initial_entry_action_order(self):
        agent = h3_agent()
        start(agent)
        assert agent.belief.current_state == "Leaf"
        assert h3_marker_sequence(agent) == [("entry", "enter_mid"), ("entry", "enter_leaf")]

    def test_e2_exits_up_to_done(self):
        agent = h3_agent()
        start(agent)
        agent.belief.execution_log.clear()
        outcome = dispatch(agent, EventInstance("e2"))
        assert outcome.target_leaf == "Done"
        assert h3_marker_sequence(agent) == [("exit", "exit_mid")]
        assert len(agent.belief.trajectory) == 1
        assert agent.belief.trajectory[0].source == "Leaf"
        assert agent.belief.trajectory[0].target == "Done"

    def test_e1_self_transition_exit_then_entry(self):
        agent = h3_agent()
        start(agent)
        agent.belief.execution_log.clear()
        dispatch(agent, EventInstance("e1"))
        assert h3_marker_sequence(agent) == [("entry", "enter_leaf")]
        assert agent.belief.current_state == "Leaf"

    def test_e3_ancestor_transition(self):
        agent = h3_agent()
        start(agent)
        agent.belief.execution_log.clear()
        dispatch(agent, EventInstance("e3"))
        assert h3_marker_sequence(agent) == [("exit", "exit_mid")]
        assert agent.belief.current_state == "Done"


DEEP_DOC = {
    "name": "deep",
    "states": [
        {
            **state("A", tags=["start"]),
            "entry": {"name": "note", "output_key": "enter_a"},
            "exit": {"name": "note", "output_key": "exit_a"},
            "substates": [
                {
                    **state("A1"),
                    "entry": {"name": "note", "output_key": "enter_a1"},
                    "exit": {"name": "note", "output_key": "exit_a1"},
                }
            ],
            "initial": "A1",
        },
        {
            **state("B", tags=["end"]),
            "entry": {"name": "note", "output_key": "enter_b"},
            "substates": [
                {**state("B1"), "entry": {"name": "note", "output_key": "enter_b1"}}
            ],
            "initial": "B1",
        },
    ],
    "transitions": [
        {
            "source": "A1",
            "target": "B1",
            "event": "jump",
            "trigger": "external",
            "actions": [{"name": "note", "output_key": "crossing"}],
        }
    ],
}


class TestDispatchOrdering:
    def test_exit_transition_entry_order(self):
        agent = agent_for(DEEP_DOC)
        start(agent)
        agent.belief.execution_log.clear()
        dispatch(agent, EventInstance("jump"))
        assert h3_marker_sequence(agent) == [
            ("exit", "exit_a1"),
            ("exit", "exit_a"),
            ("transition", "crossing"),
            ("entry", "enter_b"),
            ("entry", "enter_b1"),
        ]

    def test_phases_never_interleave(self):
        agent = agent_for(DEEP_DOC)
        start(agent)
        agent.belief.execution_log.clear()
        dispatch(agent, EventInstance("jump"))
        order = {"exit": 0, "transition": 1, "entry": 2}
        phases = [order[r.phase] for r in agent.belief.execution_log]
        assert phases == sorted(phases)

    def test_payload_offered_to_all_step_actions(self):
        doc = {
            "name": "m",
            "states": [
                {
                    **state("a", tags=["start"]),
                    "exit": {
                        "name": "note",
                        "output_key": "on_exit",
                        "params": [{"name": "text", "source": "external", "datatype": "string"}],
                    },
                },
                {
                    **state("b", tags=["end"]),
                    "entry": {
                        "name": "note",
                        "output_key": "on_entry",
                        "params": [{"name": "text", "source": "external", "datatype": "string"}],
                    },
                },
            ],
            "transitions": [
                {
                    "source": "a",
                    "target": "b",
                    "event": "go",
                    "trigger": "external",
                    "actions": [
                        {
                            "name": "note",
                            "output_key": "on_move",
                            "params": [
                                {"name": "text", "source": "external", "datatype": "string"}
                            ],
                        }
                    ],
                }
            ],
        }
        agent = agent_for(doc)
        start(agent)
        dispatch(agent, EventInstance("go", {"text": "shared"}))
        assert [r.output for r in agent.belief.execution_log] == ["shared"] * 3
        assert agent.belief.trajectory[0].event_payload == {"text": "shared"}

    def test_unhandled_event_error_and_ignore(self):
        agent = h3_agent()
        start(agent)
        with pytest.raises(UnhandledEvent):
            dispatch(agent, EventInstance("nope"))
        lax = h3_agent(limits=RunLimits(unhandled_event="ignore"))
        start(lax)
        assert dispatch(lax, EventInstance("nope")) is None
        assert lax.belief.trajectory == []


class TestDispatchMore:
    def test_self_transition_runs_exit_then_entry(self):
        doc = {
            "name": "m",
            "states": [
                {
                    **state("a", tags=["start"]),
                    "entry": {"name": "note", "output_key": "enter_a"},
                    "exit": {"name": "note", "output_key": "exit_a"},
                },
                state("b", tags=["end"]),
            ],
            "transitions": [
                {"source": "a", "target": "a", "event": "again", "trigger": "external"},
                {"source": "a", "target": "b", "event": "stop", "trigger": "external"},
            ],
        }
        agent = agent_for(doc)
        start(agent)
        agent.belief.execution_log.clear()
        dispatch(agent, EventInstance("again"))
        assert h3_marker_sequence(agent) == [("exit", "exit_a"), ("entry", "enter_a")]

    def test_transition_to_composite_descends_initial(self):
        doc = {
            "name": "m",
            "states": [
                state("a", tags=["start"]),
                {
                    **state("B", tags=["end"]),
                    "entry": {"name": "note", "output_key": "enter_b"},
                    "substates": [
                        {**state("B1"), "entry": {"name": "note", "output_key": "enter_b1"}}
                    ],
                    "initial": "B1",
                },
            ],
            "transitions": [
                {"source": "a", "target": "B", "event": "go", "trigger": "external"}
            ],
        }
        agent = agent_for(doc)
        start(agent)
        outcome = dispatch(agent, EventInstance("go"))
        assert outcome.target_leaf == "B1"
        assert agent.belief.current_state == "B1"
        assert h3_marker_sequence(agent) == [("entry", "enter_b"), ("entry", "enter_b1")]

    def test_routing_classify_dispatch_runs_entry_action(self):
        agent = make_qa_agent(
            "routing", "How many cubes?", s1_scene(), ScriptedProvider.from_replies(["counting"])
        )
        start(agent)
        dispatch(agent, EventInstance("classify"))
        assert agent.belief.current_state == "QuestionClassification"
        assert [r.action for r in agent.belief.execution_log] == ["classifyQuestion"]
        assert kv_get(agent.belief, "question_type") == "counting"


class TestProviderErrorPassthrough:
    def test_llm_policy_propagates_provider_errors(self):
        doc = {
            "name": "m",
            "states": [state("a", tags=["start"]), state("b", tags=["end"]), state("c", tags=["end"])],
            "transitions": [
                {"source": "a", "target": "b", "event": "left"},
                {"source": "a", "target": "c", "event": "right"},
            ],
        }
        agent = agent_for(
            doc,
            provider=ScriptedProvider.from_replies([]),
            policy=(LlmPolicy(LlmPolicyConfig(task_description="pick")),),
        )
        result = run(agent)
        assert result.status == "failed"
        assert "replies" in result.reason


class TestCandidates:
    def test_required_params_from_step_plan(self):
        agent = make_qa_agent(
            "planning", "q", s1_scene(), ScriptedProvider.from_replies([])
        )
        start(agent)
        cands = candidate_transitions(agent)
        by_event = {c.transition.event: c for c in cands}
        assert [p.name for p in by_event["filter"].required_external_params] == ["predicate"]

    def test_guard_evaluated_once_per_candidate_pass(self):
        calls = []

        def spy(inputs, ctx):
            calls.append(1)
            return True

        registry = builtin_registry()
        registry.register("spy", (), spy, output_datatype="boolean")
        doc = {
            "name": "m",
            "states": [state("a", tags=["start"]), state("b", tags=["end"])],
            "transitions": [
                {"source": "a", "target": "b", "event": "go", "guard": {"action": "spy"}}
            ],
        }
        agent = Agent(
            machine=machine_from(doc),
            belief=new_belief(),
            policy=(),
            registry=registry,
            provider=ScriptedProvider.from_replies([]),
        )
        start(agent)
        candidate_transitions(agent)
        assert len(calls) == 1


class TestRun:
    def test_budget_exhausted_at_exactly_ten(self):
        agent = agent_for(budget_cycle_doc())
        result = run(agent)
        assert result.status == "budget_exhausted"
        assert len(result.belief_snapshot.trajectory) == 10

    def test_fast_forward_linear_run_zero_calls(self):
        agent = agent_for(linear_doc(5))
        result = run(agent)
        assert result.status == "completed"
        assert result.stats.calls == 0
        assert result.belief_snapshot.current_state == "s5"
        assert result.output is None

    def test_waiting_when_only_external(self):
        agent = h3_agent()
        result = run(agent)
        assert result.status == "waiting"
        assert len(result.belief_snapshot.trajectory) == 0

    def test_resume_from_waiting_preserves_belief(self):
        agent = h3_agent()
        first = run(agent)
        assert first.status == "waiting"
        second = run(agent, EventInstance("e2"))
        assert second.status == "completed"
        assert [r.event for r in second.belief_snapshot.trajectory] == ["e2"]
        # entry markers from initialization are still present
        assert ("entry", "enter_mid") in h3_marker_sequence(agent)

    def test_initial_event_applied_before_policy(self):
        agent = h3_agent()
        result = run(agent, EventInstance("e3"))
        assert result.status == "completed"
        assert agent.belief.current_state == "Done"

    def test_failed_action_aborts_with_snapshot(self):
        doc = {
            "name": "m",
            "states": [
                state("a", tags=["start"]),
                {**state("b", tags=["end"]),
                 "entry": {"name": "classifyQuestion",
                           "params": [{"name": "question", "source": "internal", "datatype": "string"}]}},
            ],
            "transitions": [{"source": "a", "target": "b", "event": "go"}],
        }
        agent = agent_for(doc)  # no question in kv -> MissingInternalValue
        result = run(agent)
        assert result.status == "failed"
        assert "question" in result.reason
        assert len(result.belief_snapshot.trajectory) == 1  # the step is still recorded

    def test_policy_exhausted_fails_run(self):
        doc = {
            "name": "m",
            "states": [state("a", tags=["start"]), state("b", tags=["end"]), state("c", tags=["end"])],
            "transitions": [
                {"source": "a", "target": "b", "event": "go"},
                {"source": "a", "target": "c", "event": "stop"},
            ],
        }
        agent = agent_for(doc)  # empty policy stack cannot choose between two
        result = run(agent)
        assert result.status == "failed"

    def test_completed_implies_end_state(self):
        agent = agent_for(linear_doc(3))
        result = run(agent)
        assert result.status == "completed"
        from machina.model import is_end

        assert is_end(agent.machine, result.belief_snapshot.current_state)

    def test_llm_policy_drives_choice(self):
        doc = {
            "name": "m",
            "states": [state("a", tags=["start"]), state("b", tags=["end"]), state("c", tags=["end"])],
            "transitions": [
                {"source": "a", "target": "b", "event": "left"},
                {"source": "a", "target": "c", "event": "right"},
            ],
        }
        provider = ScriptedProvider.from_replies(['{"event":"right"}'])
        agent = agent_for(doc, provider=provider,
                          policy=(LlmPolicy(LlmPolicyConfig(task_description="pick")),))
        result = run(agent)
        assert result.status == "completed"
        assert result.belief_snapshot.current_state == "c"
        assert result.stats.calls == 1

    def test_invalid_machine_rejected_at_construction(self):
        doc = {
            "name": "m",
            "states": [state("a", tags=["start"])],
            "transitions": [],
        }
        with pytest.raises(InvalidMachine):
            agent_for(doc)


class TestFlatSemanticsOracle:
    def test_engine_matches_reference_interpreter(self):
        rnd = random.Random(1234)
        for index in range(5):
            doc = random_flat_machine_doc(rnd, index)
            for _ in range(10):
                agent = agent_for(doc, limits=RunLimits(unhandled_event="ignore"))
                start(agent)
                events = [f"e{rnd.randint(0, 3)}" for _ in range(rnd.randint(1, 20))]
                for event in events:
                    dispatch(agent, EventInstance(event))
                got = [(t.source, t.event, t.target) for t in agent.belief.trajectory]
                assert got == reference_trajectory(doc, events)


class TestNotStarted:
    def test_dispatch_requires_started_agent(self):
        from machina.engine import AgentNotStarted

        agent = h3_agent()
        with pytest.raises(AgentNotStarted):
            dispatch(agent, EventInstance("e1"))
