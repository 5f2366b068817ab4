"""Model language: parse, validate, and provide the built-in twin models.

A model document is a UTF-8 JSON object, one interface per file:

    {
      "id": "cell/ue;1",
      "properties": [{"name": "RNTI", "schema": "integer", "range": [0, 999]}],
      "relationships": [{"name": "serves", "target": "cell/ue;1", "payload": [...]}],
      "components": [{"name": "UE1", "interface": "multi/ue;1"}]
    }

Schemas are ``integer``, ``float`` and ``geospatial-point``; a property can
constrain values with a closed ``range`` interval (either bound may be null)
or a ``candidates`` set. Commands/telemetry metaclasses are out of scope.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import ModelSemanticError, ModelSyntaxError
from .wire import canonical_json


class Schema(Enum):
    INTEGER = "integer"
    FLOAT = "float"
    GEOSPATIAL = "geospatial-point"


_SCHEMA_ALIASES = {
    "integer": Schema.INTEGER,
    "int": Schema.INTEGER,
    "float": Schema.FLOAT,
    "geospatial-point": Schema.GEOSPATIAL,
    "geospatial": Schema.GEOSPATIAL,
}


@dataclass(frozen=True)
class PropertyDef:
    name: str
    schema: Schema
    # Closed interval; None bound means unconstrained on that side.
    range: tuple[float | None, float | None] | None = None
    candidates: frozenset | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ModelSemanticError("property name must be non-empty")
        if self.range is not None and self.candidates is not None:
            raise ModelSemanticError(f"{self.name}: range and candidates are exclusive")
        if self.range is not None:
            lo, hi = self.range
            if lo is not None and hi is not None and lo > hi:
                raise ModelSemanticError(f"{self.name}: inverted range [{lo}, {hi}]")
        if self.schema is Schema.GEOSPATIAL and (self.range or self.candidates):
            raise ModelSemanticError(f"{self.name}: geospatial properties take no range")


@dataclass(frozen=True)
class RelationshipDef:
    name: str
    target_model: str
    payload: tuple[PropertyDef, ...] = ()


@dataclass(frozen=True)
class ComponentDef:
    name: str
    interface: str


@dataclass(frozen=True)
class ModelInterface:
    id: str
    properties: tuple[PropertyDef, ...] = ()
    relationships: tuple[RelationshipDef, ...] = ()
    components: tuple[ComponentDef, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ModelSemanticError("interface id must be non-empty")
        seen: set[str] = set()
        for p in self.properties:
            if p.name in seen:
                raise ModelSemanticError(f"{self.id}: duplicate property {p.name!r}")
            seen.add(p.name)
        for c in self.components:
            if c.name in seen:
                raise ModelSemanticError(f"{self.id}: component {c.name!r} shadows a name")
            seen.add(c.name)

    def property_map(self) -> dict[str, PropertyDef]:
        return {p.name: p for p in self.properties}


@dataclass
class Violation:
    path: str
    reason: str
    value: Any = None

    def __str__(self) -> str:
        return f"{self.path}: {self.reason} (got {self.value!r})"


@dataclass
class PatchVerdict:
    violations: list[Violation] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.accepted


class ModelRegistry:
    """Holds resolved interfaces; component references must resolve on add.

    Interfaces are immutable after parse and safe to share across threads.
    """

    def __init__(self, interfaces: Iterable[ModelInterface] = ()) -> None:
        self._interfaces: dict[str, ModelInterface] = {}
        self._validators: dict[str, dict[str, tuple]] = {}
        for itf in interfaces:
            self.add(itf)

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._interfaces

    def __iter__(self):
        return iter(self._interfaces.values())

    def get(self, model_id: str) -> ModelInterface:
        try:
            return self._interfaces[model_id]
        except KeyError:
            raise ModelSemanticError(f"unknown interface {model_id!r}") from None

    def add(self, interface: ModelInterface) -> ModelInterface:
        for comp in interface.components:
            if comp.interface not in self._interfaces and comp.interface != interface.id:
                raise ModelSemanticError(
                    f"{interface.id}: unresolved component interface {comp.interface!r}"
                )
        self._interfaces[interface.id] = interface
        self._check_component_cycles(interface.id)
        self._validators[interface.id] = _compile_validator(interface, self)
        return interface

    def _check_component_cycles(self, root: str) -> None:
        stack, seen = [(root, (root,))], set()
        while stack:
            model_id, trail = stack.pop()
            for comp in self._interfaces[model_id].components:
                if comp.interface in trail:
                    raise ModelSemanticError(
                        f"component cycle: {' -> '.join(trail + (comp.interface,))}"
                    )
                if comp.interface in self._interfaces and comp.interface not in seen:
                    stack.append((comp.interface, trail + (comp.interface,)))
            seen.add(model_id)

    def parameter_count(self, model_id: str) -> int:
        """|properties| plus the parameter counts of all components."""
        itf = self.get(model_id)
        return len(itf.properties) + sum(
            self.parameter_count(c.interface) for c in itf.components
        )

    def paths(self, model_id: str) -> list[str]:
        """All writable property paths in component-dotted notation."""
        return list(self._validators[model_id])

    def validate_patch(self, model_id: str, patch) -> PatchVerdict:
        """Check every (path, value) pair; violations are data, not faults."""
        validator = self._validators[self.get(model_id).id]
        verdict = PatchVerdict()
        for entry in patch:
            path, value = entry[0], entry[1]
            rule = validator.get(path)
            if rule is None:
                verdict.violations.append(Violation(path, "unknown property path", value))
                continue
            reason = _check_value(rule, value)
            if reason is not None:
                verdict.violations.append(Violation(path, reason, value))
        return verdict


def _compile_validator(interface: ModelInterface, registry: ModelRegistry) -> dict[str, tuple]:
    """Flatten an interface into path -> (schema, lo, hi, candidates)."""
    rules: dict[str, tuple] = {}
    for p in interface.properties:
        lo, hi = p.range if p.range is not None else (None, None)
        rules[p.name] = (p.schema, lo, hi, p.candidates)
    for comp in interface.components:
        sub = _compile_validator(registry.get(comp.interface), registry)
        for path, rule in sub.items():
            rules[f"{comp.name}.{path}"] = rule
    return rules


def _check_value(rule: tuple, value) -> str | None:
    schema, lo, hi, candidates = rule
    if schema is Schema.INTEGER:
        if isinstance(value, bool) or not isinstance(value, int):
            return "expected integer"
    elif schema is Schema.FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return "expected float"
        if isinstance(value, float) and not math.isfinite(value):
            return "expected finite float"
    else:  # geospatial point
        if (
            not isinstance(value, (tuple, list))
            or len(value) != 2
            or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in value)
        ):
            return "expected (latitude, longitude) pair"
        lat, lon = value
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            return "coordinates out of bounds"
        return None
    if candidates is not None and value not in candidates:
        return f"not in candidate set {sorted(candidates)}"
    if lo is not None and value < lo:
        return f"below range minimum {lo}"
    if hi is not None and value > hi:
        return f"above range maximum {hi}"
    return None


def validate_patch(model: ModelInterface, patch, registry: ModelRegistry | None = None) -> PatchVerdict:
    """Module-level convenience over ModelRegistry.validate_patch."""
    reg = registry if registry is not None else ModelRegistry()
    if model.id not in reg:
        reg = ModelRegistry(_with_dependencies(model, registry))
    return reg.validate_patch(model.id, patch)


def _with_dependencies(model: ModelInterface, registry: ModelRegistry | None):
    deps: list[ModelInterface] = []
    for comp in model.components:
        if registry is None:
            raise ModelSemanticError(
                f"{model.id}: component {comp.name!r} needs a registry to resolve"
            )
        deps.append(registry.get(comp.interface))
    deps.append(model)
    return deps


# -- parsing / serialization -------------------------------------------------

def parse_model(text: str, registry: ModelRegistry | None = None) -> ModelInterface:
    """Parse one interface document; registers it if a registry is given."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSyntaxError(f"malformed model document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelSyntaxError("model document must be a JSON object")
    unknown = set(doc) - {"id", "properties", "relationships", "components"}
    if unknown:
        raise ModelSyntaxError(f"unknown top-level keys: {sorted(unknown)}")
    if "id" not in doc or not isinstance(doc["id"], str):
        raise ModelSyntaxError("model document needs a string 'id'")

    interface = ModelInterface(
        id=doc["id"],
        properties=tuple(_parse_property(p) for p in _as_list(doc, "properties")),
        relationships=tuple(_parse_relationship(r) for r in _as_list(doc, "relationships")),
        components=tuple(_parse_component(c) for c in _as_list(doc, "components")),
    )
    if registry is not None:
        registry.add(interface)
    elif interface.components:
        # A lone document cannot resolve component targets.
        raise ModelSemanticError(
            f"{interface.id}: components present; parse with a registry to resolve them"
        )
    return interface


def _as_list(doc: Mapping, key: str) -> list:
    value = doc.get(key, [])
    if not isinstance(value, list):
        raise ModelSyntaxError(f"'{key}' must be a list")
    return value


def _parse_property(raw) -> PropertyDef:
    if not isinstance(raw, dict) or "name" not in raw or "schema" not in raw:
        raise ModelSyntaxError(f"bad property entry: {raw!r}")
    schema = _SCHEMA_ALIASES.get(str(raw["schema"]).lower())
    if schema is None:
        raise ModelSemanticError(f"{raw['name']}: unknown schema {raw['schema']!r}")
    rng = raw.get("range")
    if rng is not None:
        if not isinstance(rng, list) or len(rng) != 2:
            raise ModelSyntaxError(f"{raw['name']}: range must be [lower, upper]")
        rng = (rng[0], rng[1])
    cands = raw.get("candidates")
    return PropertyDef(
        name=raw["name"],
        schema=schema,
        range=rng,
        candidates=frozenset(cands) if cands is not None else None,
    )


def _parse_relationship(raw) -> RelationshipDef:
    if not isinstance(raw, dict) or "name" not in raw or "target" not in raw:
        raise ModelSyntaxError(f"bad relationship entry: {raw!r}")
    return RelationshipDef(
        name=raw["name"],
        target_model=raw["target"],
        payload=tuple(_parse_property(p) for p in raw.get("payload", [])),
    )


def _parse_component(raw) -> ComponentDef:
    if not isinstance(raw, dict) or "name" not in raw or "interface" not in raw:
        raise ModelSyntaxError(f"bad component entry: {raw!r}")
    return ComponentDef(name=raw["name"], interface=raw["interface"])


def serialize_model(interface: ModelInterface) -> str:
    """Canonical document form; parse(serialize(m)) == m."""
    doc: dict[str, Any] = {"id": interface.id}
    doc["properties"] = [_property_doc(p) for p in interface.properties]
    doc["relationships"] = [
        {
            "name": r.name,
            "target": r.target_model,
            "payload": [_property_doc(p) for p in r.payload],
        }
        for r in interface.relationships
    ]
    doc["components"] = [
        {"name": c.name, "interface": c.interface} for c in interface.components
    ]
    return canonical_json(doc)


def _property_doc(p: PropertyDef) -> dict[str, Any]:
    doc: dict[str, Any] = {"name": p.name, "schema": p.schema.value}
    if p.range is not None:
        doc["range"] = list(p.range)
    if p.candidates is not None:
        doc["candidates"] = sorted(p.candidates)
    return doc


# -- built-in models ---------------------------------------------------------

MULTI_GNB_MODEL = "multi/gnb;1"
MULTI_UE_MODEL = "multi/ue;1"
CELL_GNB_MODEL = "cell/gnb;1"
CELL_UE_MODEL = "cell/ue;1"

NEIGHBOR_RELATIONSHIP = "neighbor"
SERVES_RELATIONSHIP = "serves"

UE_SLOT_COUNT = 99


def _int(name: str, lo, hi) -> PropertyDef:
    return PropertyDef(name, Schema.INTEGER, range=(lo, hi))


def _float(name: str, lo, hi) -> PropertyDef:
    return PropertyDef(name, Schema.FLOAT, range=(lo, hi))


def builtin_models() -> ModelRegistry:
    """Registry with the network-overview and per-cell interfaces.

    The overview gNB packs one slot per admissible UE (99) so handovers never
    require a model change; each slot carries only Location and RSRP. The
    per-cell UE carries the full ten-metric telemetry set.
    """
    registry = ModelRegistry()

    registry.add(
        ModelInterface(
            id=MULTI_UE_MODEL,
            properties=(
                PropertyDef("Location", Schema.GEOSPATIAL),
                _float("RSRP", 30.0, 160.0),
            ),
        )
    )
    registry.add(
        ModelInterface(
            id=MULTI_GNB_MODEL,
            properties=(
                _int("PLMN", 1, None),  # positive, otherwise unconstrained
                _int("ARFCN", 600_000, 2_016_666),
            ),
            relationships=(
                RelationshipDef(
                    NEIGHBOR_RELATIONSHIP,
                    target_model=MULTI_GNB_MODEL,
                    payload=(PropertyDef("Received Power", Schema.FLOAT),),
                ),
            ),
            components=tuple(
                ComponentDef(f"UE{i}", MULTI_UE_MODEL) for i in range(1, UE_SLOT_COUNT + 1)
            ),
        )
    )
    registry.add(
        ModelInterface(
            id=CELL_UE_MODEL,
            properties=(
                _int("RNTI", 0, 999),
                PropertyDef("Location", Schema.GEOSPATIAL),
                _float("RSRP", 30.0, 160.0),
                _int("Buffer", 0, 255),
                _float("UL BLER", 0.0, 1.0),
                _int("UL CQI", 0, 15),
                _float("DL BLER", 0.0, 1.0),
                _int("DL CQI", 0, 15),
                _int("UL MCS", 0, 28),
                _int("DL MCS", 0, 28),
            ),
        )
    )
    registry.add(
        ModelInterface(
            id=CELL_GNB_MODEL,
            properties=(
                _float("Tx Power", 20.0, 50.0),
                _int("Connected UEs", 0, UE_SLOT_COUNT),
            ),
            relationships=(
                RelationshipDef(
                    SERVES_RELATIONSHIP,
                    target_model=CELL_UE_MODEL,
                    payload=(_int("RSRP", 30, 160),),
                ),
            ),
        )
    )
    return registry


def parse_model_set(docs: Iterable[str], registry: ModelRegistry | None = None) -> ModelRegistry:
    """Parse interdependent documents, retrying until components resolve."""
    registry = registry if registry is not None else ModelRegistry()
    pending = list(docs)
    while pending:
        progressed = False
        failures: list[ModelSemanticError] = []
        remaining = []
        for text in pending:
            try:
                parse_model(text, registry)
                progressed = True
            except ModelSemanticError as exc:
                remaining.append(text)
                failures.append(exc)
        if not progressed:
            raise failures[0]
        pending = remaining
    return registry


def load_models_dir(path, registry: ModelRegistry | None = None) -> ModelRegistry:
    """Load every ``*.json`` interface document under ``path``."""
    import pathlib

    docs = [p.read_text(encoding="utf-8") for p in sorted(pathlib.Path(path).glob("*.json"))]
    return parse_model_set(docs, registry)


def save_builtin_documents(path) -> list[str]:
    """Write the built-in interfaces as one-file-per-interface JSON documents."""
    import pathlib

    out = pathlib.Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for itf in builtin_models():
        name = itf.id.replace("/", "-").replace(";", "-") + ".json"
        (out / name).write_text(serialize_model(itf) + "\n", encoding="utf-8")
        written.append(name)
    return written
