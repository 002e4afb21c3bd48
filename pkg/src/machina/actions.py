"""Action registry and the built-in scene question-answering actions.

An action implementation is a callable ``(inputs, context) -> output`` where
``inputs`` is the resolved parameter dict and the output is any JSON value.
The registry declares canonical parameter specs per action for documentation
and for guard-time invocation; machines bind parameters per usage site
through their own :class:`~machina.model.ActionSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import scene as scene_ops
from .errors import MachinaError
from .keypath import JsonValue
from .model import (
    SOURCE_EXTERNAL,
    SOURCE_INTERNAL,
    ActionSpec,
    ParameterSpec,
)
from .providers import CompletionProvider

# Built-in actions that send a prompt to the provider (one call each).
LLM_ACTION_NAMES = frozenset({"classifyQuestion", "extractObjects", "answerQuestion"})


class DuplicateAction(MachinaError):
    def __init__(self, name: str):
        super().__init__(f"action {name!r} is already registered")
        self.name = name


class ArgumentTypeError(MachinaError):
    """A supplied argument does not fit the declared datatype."""


@dataclass(frozen=True)
class ActionContext:
    """Runtime handles passed to every action implementation."""

    provider: CompletionProvider
    spec: ActionSpec


ActionImpl = Callable[[dict[str, JsonValue], ActionContext], JsonValue]


@dataclass(frozen=True)
class RegisteredAction:
    name: str
    params: tuple[ParameterSpec, ...]
    impl: ActionImpl
    output_datatype: str = "json"


@dataclass
class ActionRegistry:
    _actions: dict[str, RegisteredAction] = field(default_factory=dict)

    def register(
        self,
        name: str,
        params: tuple[ParameterSpec, ...],
        impl: ActionImpl,
        output_datatype: str = "json",
    ) -> "ActionRegistry":
        if name in self._actions:
            raise DuplicateAction(name)
        self._actions[name] = RegisteredAction(name, tuple(params), impl, output_datatype)
        return self

    def lookup(self, name: str) -> RegisteredAction | None:
        return self._actions.get(name)

    def names(self) -> frozenset[str]:
        return frozenset(self._actions)


def register_action(
    registry: ActionRegistry,
    name: str,
    params: tuple[ParameterSpec, ...],
    impl: ActionImpl,
    output_datatype: str = "json",
) -> ActionRegistry:
    return registry.register(name, params, impl, output_datatype)


def coerce_argument(value: JsonValue, datatype: str) -> JsonValue:
    """Fit a JSON value to a declared datatype, with mild coercion.

    Numbers and booleans are accepted as JSON values or as their obvious
    string spellings; ``json`` accepts anything.
    """
    if datatype == "json":
        return value
    if datatype == "string":
        if isinstance(value, str):
            return value
        raise ArgumentTypeError(f"expected a string, got {value!r}")
    if datatype == "number":
        if isinstance(value, bool):
            raise ArgumentTypeError(f"expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                try:
                    return float(value)
                except ValueError:
                    pass
        raise ArgumentTypeError(f"expected a number, got {value!r}")
    if datatype == "boolean":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ArgumentTypeError(f"expected a boolean, got {value!r}")
    raise ArgumentTypeError(f"unknown datatype {datatype!r}")


# ---------------------------------------------------------------------------
# Built-in actions


def _ext(name: str, datatype: str, description: str = "") -> ParameterSpec:
    return ParameterSpec(name, SOURCE_EXTERNAL, datatype, description)


def _int(name: str, datatype: str, description: str = "", source_key: str | None = None) -> ParameterSpec:
    return ParameterSpec(name, SOURCE_INTERNAL, datatype, description, source_key)


def _scene_of(inputs: dict[str, JsonValue]) -> scene_ops.SceneGraph:
    return scene_ops.scene_from_json_value(inputs["scene"])


def _filter_impl(inputs, ctx) -> JsonValue:
    predicate = inputs["predicate"]
    if not isinstance(predicate, dict):
        raise MachinaError(f"predicate must be an object, got {predicate!r}")
    return scene_ops.filter_objects(_scene_of(inputs), predicate)


def _relation_impl(inputs, ctx) -> JsonValue:
    return scene_ops.related_objects(_scene_of(inputs), inputs["object"], inputs["relation"])


def _checking_impl(inputs, ctx) -> JsonValue:
    return scene_ops.same_attribute(_scene_of(inputs), inputs["object"], inputs["attribute"])


def _query_impl(inputs, ctx) -> JsonValue:
    return scene_ops.query_attribute(_scene_of(inputs), inputs["object"], inputs["attribute"])


def _count_impl(inputs, ctx) -> JsonValue:
    ids = inputs["ids"]
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise MachinaError(f"ids must be an array of strings, got {ids!r}")
    return scene_ops.count_objects(ids)


def _classify_impl(inputs, ctx) -> JsonValue:
    return scene_ops.classify_question(ctx.provider, inputs["question"])


def _extract_impl(inputs, ctx) -> JsonValue:
    return scene_ops.extract_objects(ctx.provider, _scene_of(inputs), inputs["question"])


def _answer_impl(inputs, ctx) -> JsonValue:
    return scene_ops.answer_question(ctx.provider, _scene_of(inputs), inputs["question"])


def _note_impl(inputs, ctx) -> JsonValue:
    # Marker defaults to the usage site's output key so parameterless notes
    # still leave distinguishable traces.
    text = inputs.get("text")
    if text is None:
        return ctx.spec.resolved_output_key
    return str(text)


def builtin_registry() -> ActionRegistry:
    """Registry with the bundled action library."""
    registry = ActionRegistry()
    scene_param = _int("scene", "json", "scene graph JSON from the belief")
    registry.register(
        "filter",
        (_ext("predicate", "json", "attribute name to required value"), scene_param),
        _filter_impl,
    )
    registry.register(
        "relation",
        (
            _ext("object", "string", "anchor object id"),
            _ext("relation", "string", "one of left, right, front, behind"),
            scene_param,
        ),
        _relation_impl,
    )
    registry.register(
        "checking",
        (
            _ext("object", "string", "anchor object id"),
            _ext("attribute", "string", "attribute to compare"),
            scene_param,
        ),
        _checking_impl,
    )
    registry.register(
        "query",
        (
            _ext("object", "string", "object id to inspect"),
            _ext("attribute", "string", "attribute to read"),
            scene_param,
        ),
        _query_impl,
        output_datatype="string",
    )
    registry.register(
        "countObjects",
        (_int("ids", "json", "object ids to count"),),
        _count_impl,
        output_datatype="number",
    )
    registry.register(
        "classifyQuestion",
        (_int("question", "string"),),
        _classify_impl,
        output_datatype="string",
    )
    registry.register(
        "extractObjects",
        (_int("question", "string"), scene_param),
        _extract_impl,
    )
    registry.register(
        "answerQuestion",
        (_int("question", "string"), scene_param),
        _answer_impl,
        output_datatype="string",
    )
    registry.register(
        "note",
        (_ext("text", "string", "marker to record"),),
        _note_impl,
        output_datatype="string",
    )
    return registry
