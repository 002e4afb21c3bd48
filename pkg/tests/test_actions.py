import pytest

from machina.actions import (
    ActionContext,
    ActionRegistry,
    ArgumentTypeError,
    DuplicateAction,
    builtin_registry,
    coerce_argument,
)
from machina.model import ActionSpec
from machina.providers import ScriptedProvider


class TestRegistry:
    def test_builtins_present(self):
        names = builtin_registry().names()
        assert {
            "filter",
            "relation",
            "checking",
            "query",
            "countObjects",
            "classifyQuestion",
            "extractObjects",
            "answerQuestion",
            "note",
        } == names

    def test_register_duplicate(self):
        registry = ActionRegistry()
        registry.register("note", (), lambda inputs, ctx: None)
        with pytest.raises(DuplicateAction):
            registry.register("note", (), lambda inputs, ctx: None)

    def test_lookup_unregistered(self):
        assert ActionRegistry().lookup("nope") is None

    def test_registered_params_visible(self):
        registered = builtin_registry().lookup("filter")
        assert [p.name for p in registered.params] == ["predicate", "scene"]


class TestCoerce:
    @pytest.mark.parametrize(
        "value,datatype,expected",
        [
            ("x", "string", "x"),
            (3, "number", 3),
            (3.5, "number", 3.5),
            ("3", "number", 3),
            ("3.5", "number", 3.5),
            (True, "boolean", True),
            ("true", "boolean", True),
            ("False", "boolean", False),
            ({"a": 1}, "json", {"a": 1}),
            (None, "json", None),
        ],
    )
    def test_accepted(self, value, datatype, expected):
        assert coerce_argument(value, datatype) == expected

    @pytest.mark.parametrize(
        "value,datatype",
        [
            (3, "string"),
            ("abc", "number"),
            (True, "number"),
            ("yep", "boolean"),
            (1, "boolean"),
        ],
    )
    def test_rejected(self, value, datatype):
        with pytest.raises(ArgumentTypeError):
            coerce_argument(value, datatype)


class TestNote:
    def test_marker_falls_back_to_output_key(self):
        registered = builtin_registry().lookup("note")
        ctx = ActionContext(
            provider=ScriptedProvider.from_replies([]),
            spec=ActionSpec("note", output_key="enter_mid"),
        )
        assert registered.impl({}, ctx) == "enter_mid"

    def test_marker_uses_text_when_given(self):
        registered = builtin_registry().lookup("note")
        ctx = ActionContext(
            provider=ScriptedProvider.from_replies([]), spec=ActionSpec("note")
        )
        assert registered.impl({"text": "x"}, ctx) == "x"
