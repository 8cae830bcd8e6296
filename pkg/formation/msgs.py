"""
Message schemas and the JSON codec used on the bridge.

Schemas are declared in a small text format, one file may hold many::

    # comment
    msg SCStates v1 {
        p_h: f64[3] m;
        q_hb: f64[4];
        frame?: string;          # optional field
        states: TrajectoryPoint[];  # nested, dynamic length
    }

Scalar types are f64, f32, i64, i32, bool and string. A type may also name
another declared schema. ``T[n]`` is a fixed-length array and ``T[]`` a
dynamic one. An optional unit annotation follows the type.

Encoded messages are UTF-8 JSON objects whose keys follow declaration
order, so identical values always produce identical bytes.
"""

import json
import logging
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np


logger = logging.getLogger(__name__)

BUILTIN_SCHEMA_DIR = Path(__file__).resolve().parent / 'schemas'
SCHEMA_FILE_SUFFIX = '.msg'

FLOAT_TYPES = frozenset({'f64', 'f32'})
INT_RANGES = {
    'i64': (-2 ** 63, 2 ** 63 - 1),
    'i32': (-2 ** 31, 2 ** 31 - 1),
}
SCALAR_TYPES = FLOAT_TYPES | frozenset(INT_RANGES) | frozenset({'bool', 'string'})

_IDENT_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_]*')
_INT_RE = re.compile(r'[0-9]+')
_UNIT_RE = re.compile(r'[A-Za-z0-9_/*^.%\-]+')
_VERSION_RE = re.compile(r'v([0-9]+)$')


class MessageError(Exception):
    """Base exception for schema and codec errors."""
    pass


class SchemaParseError(MessageError):
    """Raised when schema text does not follow the declaration format."""

    def __init__(self, message: str, line: int, column: int, path: Optional[str] = None):
        self.message = message
        self.line = line
        self.column = column
        self.path = path
        location = f"line {line}, column {column}" if line else ''
        if path:
            location = f"{path}: {location}" if location else path
        super().__init__(f"{location}: {message}" if location else message)


class DuplicateFieldError(SchemaParseError):
    """Raised when a schema declares the same field twice."""
    pass


class DuplicateSchemaError(MessageError):
    """Raised when a schema name is declared more than once."""

    def __init__(self, name: str, locations: Iterable[str] = ()):
        self.name = name
        self.locations = list(locations)
        detail = f" (declared in {', '.join(self.locations)})" if self.locations else ''
        super().__init__(f"Schema '{name}' is declared more than once{detail}")


class UnknownTypeError(SchemaParseError):
    """Raised when a field type is neither a scalar nor a declared schema."""
    pass


class MessageValidationError(MessageError):
    """Raised when a value does not satisfy its schema."""

    def __init__(self, schema: str, problems: List[str]):
        self.schema = schema
        self.problems = list(problems)
        super().__init__(f"{schema}: " + '; '.join(self.problems))


class SchemaMismatchError(MessageValidationError):
    """Raised when decoded JSON does not match the expected schema."""
    pass


class MessageDecodeError(MessageError):
    """Raised when bytes are not valid UTF-8 JSON."""
    pass


class FieldSpec(NamedTuple):
    """One declared field of a message schema."""
    name: str
    type: str
    is_array: bool = False
    length: Optional[int] = None
    unit: Optional[str] = None
    required: bool = True

    @property
    def is_scalar_type(self) -> bool:
        return self.type in SCALAR_TYPES

    def render(self) -> str:
        text = f"{self.name}{'' if self.required else '?'}: {self.type}"
        if self.is_array:
            text += f"[{'' if self.length is None else self.length}]"
        if self.unit:
            text += f" {self.unit}"
        return text + ';'


class MessageSchema(NamedTuple):
    """A named, versioned, ordered list of fields."""
    name: str
    version: int
    fields: Tuple[FieldSpec, ...]

    @property
    def field_names(self) -> List[str]:
        return [spec.name for spec in self.fields]

    def get_field(self, name: str) -> Optional[FieldSpec]:
        for spec in self.fields:
            if spec.name == name:
                return spec
        return None

    def render(self) -> str:
        body = '\n'.join(f"    {spec.render()}" for spec in self.fields)
        return f"msg {self.name} v{self.version} {{\n{body}\n}}\n"


@dataclass(frozen=True)
class MessageValue:
    """A schema name plus its field values (arrays held as tuples)."""
    schema: str
    fields: Mapping[str, Any]

    def __getitem__(self, name: str) -> Any:
        return self.fields[name]

    def get(self, name: str, default: Any = None) -> Any:
        return self.fields.get(name, default)

    def as_array(self, name: str) -> np.ndarray:
        return np.asarray(self.fields[name], dtype=float)


class SchemaRegistry:
    """
    Map from schema name to MessageSchema.

    A registry is filled once at load time and only read afterwards.
    """

    def __init__(self, schemas: Iterable[MessageSchema] = ()):
        self._schemas: Dict[str, MessageSchema] = {}
        for schema in schemas:
            self.register(schema)

    def register(self, schema: MessageSchema) -> None:
        if schema.name in self._schemas:
            raise DuplicateSchemaError(schema.name)
        self._schemas[schema.name] = schema

    def get(self, name: str) -> MessageSchema:
        try:
            return self._schemas[name]
        except KeyError:
            raise UnknownTypeError(f"Unknown schema '{name}'", 0, 0) from None

    def __contains__(self, name: str) -> bool:
        return name in self._schemas

    def __len__(self) -> int:
        return len(self._schemas)

    def __iter__(self):
        return iter(self._schemas.values())

    def names(self) -> List[str]:
        return list(self._schemas)

    def as_mapping(self) -> Mapping[str, MessageSchema]:
        return MappingProxyType(self._schemas)

    @classmethod
    def from_text(cls, text: str) -> 'SchemaRegistry':
        return cls(parse_schema_file(text))


# Schema text format

class _Scanner:
    """Character scanner tracking line and column for diagnostics."""

    def __init__(self, text: str, path: Optional[str] = None):
        self.text = text
        self.path = path
        self.pos = 0
        self.line = 1
        self.column = 1

    def error(self, message: str, cls=SchemaParseError, line=None, column=None):
        return cls(message, line or self.line, column or self.column, self.path)

    def at_end(self) -> bool:
        self.skip_blank()
        return self.pos >= len(self.text)

    def _advance(self, count: int) -> None:
        for char in self.text[self.pos:self.pos + count]:
            if char == '\n':
                self.line += 1
                self.column = 1
            else:
                self.column += 1
        self.pos += count

    def skip_blank(self) -> None:
        while self.pos < len(self.text):
            char = self.text[self.pos]
            if char.isspace():
                self._advance(1)
            elif char == '#':
                end = self.text.find('\n', self.pos)
                self._advance((len(self.text) if end < 0 else end) - self.pos)
            else:
                break

    def peek(self) -> str:
        self.skip_blank()
        return self.text[self.pos] if self.pos < len(self.text) else ''

    def accept(self, char: str) -> bool:
        if self.peek() == char:
            self._advance(1)
            return True
        return False

    def expect(self, char: str) -> None:
        if not self.accept(char):
            found = self.peek() or 'end of input'
            raise self.error(f"Expected '{char}', found '{found}'")

    def match(self, pattern: re.Pattern, what: str) -> Tuple[str, int, int]:
        self.skip_blank()
        found = pattern.match(self.text, self.pos)
        if not found:
            raise self.error(f"Expected {what}")
        line, column = self.line, self.column
        self._advance(found.end() - self.pos)
        return found.group(0), line, column


def parse_schema_file(text: str, known: Optional[SchemaRegistry] = None,
                      path: Optional[str] = None, resolve: bool = True) -> List[MessageSchema]:
    """
    Parse schema declarations.

    Args:
        text: Schema text, possibly holding several declarations
        known: Registry whose schemas may be referenced as nested types
        path: File name used in diagnostics
        resolve: Check nested type names (disable when resolving across files)

    Returns:
        Schemas in declaration order

    Raises:
        SchemaParseError: On syntax errors, with line and column
        DuplicateFieldError: If a schema repeats a field name
        DuplicateSchemaError: If the text declares a schema name twice
        UnknownTypeError: If a field type cannot be resolved
    """
    scanner = _Scanner(text, path)
    schemas: List[MessageSchema] = []
    type_refs: List[Tuple[str, str, int, int]] = []
    seen = set()

    while not scanner.at_end():
        keyword, line, column = scanner.match(_IDENT_RE, "'msg'")
        if keyword != 'msg':
            raise scanner.error(f"Expected 'msg', found '{keyword}'", line=line, column=column)

        name, name_line, name_column = scanner.match(_IDENT_RE, 'schema name')
        if name in seen:
            raise DuplicateSchemaError(name, [f"{path or '<text>'}:{name_line}"])
        seen.add(name)

        version_token, line, column = scanner.match(_IDENT_RE, 'version (v<int>)')
        version_match = _VERSION_RE.match(version_token)
        if not version_match or int(version_match.group(1)) < 1:
            raise scanner.error(f"Invalid version '{version_token}', expected v1 or higher",
                                line=line, column=column)

        scanner.expect('{')
        fields: List[FieldSpec] = []
        while not scanner.accept('}'):
            spec, field_line, field_column = _parse_field(scanner)
            if any(existing.name == spec.name for existing in fields):
                raise scanner.error(f"Duplicate field '{spec.name}' in schema '{name}'",
                                    cls=DuplicateFieldError, line=field_line, column=field_column)
            fields.append(spec)
            if not spec.is_scalar_type:
                type_refs.append((name, spec.type, field_line, field_column))

        if not fields:
            raise scanner.error(f"Schema '{name}' must declare at least one field",
                                line=name_line, column=name_column)

        schemas.append(MessageSchema(name=name, version=int(version_match.group(1)), fields=tuple(fields)))

    if resolve:
        available = set(seen) | set(known.names() if known else ())
        for owner, type_name, line, column in type_refs:
            if type_name not in available:
                raise UnknownTypeError(f"Unknown type '{type_name}' in schema '{owner}'", line, column, path)
        _check_acyclic(schemas, known)

    return schemas


def _parse_field(scanner: _Scanner) -> Tuple[FieldSpec, int, int]:
    name, line, column = scanner.match(_IDENT_RE, 'field name')
    required = not scanner.accept('?')
    scanner.expect(':')
    type_name, type_line, type_column = scanner.match(_IDENT_RE, 'field type')
    if type_name not in SCALAR_TYPES and type_name[:1].islower():
        raise UnknownTypeError(f"Unknown type '{type_name}'", type_line, type_column, scanner.path)

    is_array = False
    length = None
    if scanner.accept('['):
        is_array = True
        if scanner.peek() != ']':
            digits, len_line, len_column = scanner.match(_INT_RE, 'array length')
            length = int(digits)
            if length < 1:
                raise scanner.error('Array length must be at least 1', line=len_line, column=len_column)
        scanner.expect(']')

    unit = None
    if scanner.peek() not in (';', '}', ''):
        unit, _, _ = scanner.match(_UNIT_RE, 'unit annotation')

    if not scanner.accept(';') and scanner.peek() != '}':
        raise scanner.error("Expected ';' or '}' after field")

    spec = FieldSpec(name=name, type=type_name, is_array=is_array, length=length,
                     unit=unit, required=required)
    return spec, line, column


def _check_acyclic(schemas: Iterable[MessageSchema], known: Optional[SchemaRegistry]) -> None:
    lookup = dict(known.as_mapping()) if known else {}
    lookup.update({schema.name: schema for schema in schemas})
    state: Dict[str, int] = {}

    def visit(name: str, trail: List[str]) -> None:
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            raise SchemaParseError(f"Recursive schema reference: {' -> '.join(trail + [name])}", 0, 0)
        state[name] = 1
        for spec in lookup[name].fields:
            if not spec.is_scalar_type and spec.type in lookup:
                visit(spec.type, trail + [name])
        state[name] = 2

    for name in list(lookup):
        visit(name, [])


def render_schema_file(schemas: Iterable[MessageSchema]) -> str:
    """Render schemas back into declaration text."""
    return '\n'.join(schema.render() for schema in schemas)


def load_schema_dir(directory) -> SchemaRegistry:
    """
    Load every schema file of a directory into one registry.

    Raises:
        DuplicateSchemaError: If two files declare the same schema, naming both
    """
    directory = Path(directory)
    registry = SchemaRegistry()
    origins: Dict[str, str] = {}
    parsed = []

    for file_path in sorted(directory.glob(f'*{SCHEMA_FILE_SUFFIX}')):
        schemas = parse_schema_file(file_path.read_text(encoding='utf-8'), path=str(file_path), resolve=False)
        parsed.append((file_path, schemas))
        for schema in schemas:
            if schema.name in origins:
                raise DuplicateSchemaError(schema.name, [origins[schema.name], str(file_path)])
            origins[schema.name] = str(file_path)
            registry.register(schema)

    # Re-parse with the full registry so nested types resolve across files.
    for file_path, _ in parsed:
        parse_schema_file(file_path.read_text(encoding='utf-8'), known=registry, path=str(file_path))

    logger.debug(f"Loaded {len(registry)} schemas from {directory}")
    return registry


class SchemaCheckReport(NamedTuple):
    """Outcome of checking a schema directory."""
    files: List[str]
    schema_count: int
    problems: List[str]

    @property
    def is_clean(self) -> bool:
        return not self.problems


def check_schema_dir(directory) -> SchemaCheckReport:
    """Parse all schema files of a directory and collect every problem found."""
    directory = Path(directory)
    files = sorted(directory.glob(f'*{SCHEMA_FILE_SUFFIX}'))
    problems: List[str] = []
    declared: Dict[str, List[str]] = {}
    registry = SchemaRegistry()

    if not directory.is_dir():
        return SchemaCheckReport(files=[], schema_count=0, problems=[f"{directory}: not a directory"])

    for file_path in files:
        try:
            schemas = parse_schema_file(file_path.read_text(encoding='utf-8'), path=str(file_path),
                                        resolve=False)
        except MessageError as exc:
            problems.append(str(exc) if isinstance(exc, SchemaParseError) else f"{file_path}: {exc}")
            continue
        for schema in schemas:
            declared.setdefault(schema.name, []).append(str(file_path))
            if schema.name not in registry:
                registry.register(schema)

    for name, paths in declared.items():
        if len(paths) > 1:
            problems.append(f"Schema '{name}' declared in multiple files: {', '.join(paths)}")

    for file_path in files:
        try:
            parse_schema_file(file_path.read_text(encoding='utf-8'), known=registry, path=str(file_path))
        except (UnknownTypeError, SchemaParseError) as exc:
            message = str(exc)
            if message not in problems:
                problems.append(message)
        except MessageError:
            # Already reported in the first pass.
            pass

    return SchemaCheckReport(files=[str(path) for path in files], schema_count=len(registry),
                             problems=problems)


def _default_schema_dir() -> Path:
    try:
        from django.conf import settings
        if settings.configured:
            return Path(settings.FORMATION.get('SCHEMA_DIR', BUILTIN_SCHEMA_DIR))
    except (ImportError, AttributeError):
        pass
    return BUILTIN_SCHEMA_DIR


def _default_strict() -> bool:
    try:
        from django.conf import settings
        if settings.configured:
            return bool(settings.FORMATION.get('STRICT_DECODE', True))
    except (ImportError, AttributeError):
        pass
    return True


@lru_cache(maxsize=None)
def default_registry() -> SchemaRegistry:
    """Registry loaded from the configured schema directory (cached)."""
    return load_schema_dir(_default_schema_dir())


@lru_cache(maxsize=None)
def builtin_registry() -> SchemaRegistry:
    """Registry of the schema set shipped with the package."""
    return load_schema_dir(BUILTIN_SCHEMA_DIR)


# Codec

def make_value(registry: SchemaRegistry, schema_name: str, fields: Mapping[str, Any]) -> MessageValue:
    """Validate ``fields`` against a schema and return a normalized MessageValue."""
    schema = registry.get(schema_name)
    problems: List[str] = []
    normalized = _normalize(fields, schema, registry, True, '', problems)
    if problems:
        raise MessageValidationError(schema_name, problems)
    return normalized


def encode(value: MessageValue, registry: SchemaRegistry) -> bytes:
    """
    Encode a message value as UTF-8 JSON bytes.

    Raises:
        MessageValidationError: Listing every offending field
    """
    schema = registry.get(value.schema)
    problems: List[str] = []
    normalized = _normalize(value.fields, schema, registry, True, '', problems)
    if problems:
        raise MessageValidationError(value.schema, problems)
    return json.dumps(_to_json(normalized), separators=(',', ':'), allow_nan=False,
                      ensure_ascii=False).encode('utf-8')


def decode(data: bytes, schema: MessageSchema, registry: Optional[SchemaRegistry] = None,
           strict: Optional[bool] = None) -> MessageValue:
    """
    Decode UTF-8 JSON bytes into a value of ``schema``.

    Args:
        data: Encoded message
        schema: Expected schema
        registry: Registry for nested types (default registry when omitted)
        strict: Reject unknown keys; defaults to the configured decode mode

    Raises:
        MessageDecodeError: If the bytes are not UTF-8 JSON
        SchemaMismatchError: If the JSON does not match the schema
    """
    try:
        obj = json.loads(data.decode('utf-8') if isinstance(data, (bytes, bytearray)) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MessageDecodeError(f"Invalid JSON message: {exc}") from exc
    return decode_object(obj, schema, registry, strict)


def decode_object(obj: Any, schema: MessageSchema, registry: Optional[SchemaRegistry] = None,
                  strict: Optional[bool] = None) -> MessageValue:
    """Validate an already-parsed JSON object against ``schema``."""
    if registry is None:
        registry = default_registry()
    if strict is None:
        strict = _default_strict()
    if not isinstance(obj, dict):
        raise SchemaMismatchError(schema.name, [f"expected a JSON object, got {type(obj).__name__}"])

    problems: List[str] = []
    value = _normalize(obj, schema, registry, strict, '', problems)
    if problems:
        raise SchemaMismatchError(schema.name, problems)
    return value


def _normalize(fields: Mapping[str, Any], schema: MessageSchema, registry: SchemaRegistry,
               strict: bool, prefix: str, problems: List[str]) -> MessageValue:
    if isinstance(fields, MessageValue):
        if fields.schema != schema.name:
            problems.append(f"{prefix or 'value'}: expected {schema.name}, got {fields.schema}")
        fields = fields.fields

    normalized: Dict[str, Any] = {}
    for spec in schema.fields:
        label = f"{prefix}{spec.name}"
        if spec.name not in fields or fields[spec.name] is None:
            if spec.required:
                problems.append(f"missing required field '{label}'")
            continue

        raw = fields[spec.name]
        if spec.is_array:
            if isinstance(raw, np.ndarray):
                raw = raw.tolist()
            if not isinstance(raw, (list, tuple)):
                problems.append(f"field '{label}' must be an array")
                continue
            if spec.length is not None and len(raw) != spec.length:
                problems.append(f"field '{label}' must have length {spec.length}, got {len(raw)}")
                continue
            items = []
            for index, item in enumerate(raw):
                items.append(_normalize_scalar(item, spec, registry, strict, f"{label}[{index}]", problems))
            normalized[spec.name] = tuple(items)
        else:
            normalized[spec.name] = _normalize_scalar(raw, spec, registry, strict, label, problems)

    unknown = [key for key in fields if schema.get_field(key) is None]
    if unknown and strict:
        problems.extend(f"unknown field '{prefix}{key}'" for key in unknown)

    return MessageValue(schema=schema.name, fields=normalized)


def _normalize_scalar(item: Any, spec: FieldSpec, registry: SchemaRegistry, strict: bool,
                      label: str, problems: List[str]) -> Any:
    kind = spec.type
    if isinstance(item, np.generic):
        item = item.item()

    if kind in FLOAT_TYPES:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            problems.append(f"field '{label}' must be a number")
            return None
        if not math.isfinite(item):
            problems.append(f"field '{label}' must be finite")
            return None
        return float(item)

    if kind in INT_RANGES:
        if isinstance(item, bool) or not isinstance(item, int):
            problems.append(f"field '{label}' must be an integer")
            return None
        low, high = INT_RANGES[kind]
        if not low <= item <= high:
            problems.append(f"field '{label}' is out of range for {kind}")
            return None
        return item

    if kind == 'bool':
        if not isinstance(item, bool):
            problems.append(f"field '{label}' must be a boolean")
            return None
        return item

    if kind == 'string':
        if not isinstance(item, str):
            problems.append(f"field '{label}' must be a string")
            return None
        return item

    if kind not in registry:
        problems.append(f"field '{label}' has unknown type '{kind}'")
        return None
    if not isinstance(item, (dict, MessageValue)):
        problems.append(f"field '{label}' must be a {kind} object")
        return None
    return _normalize(item, registry.get(kind), registry, strict, f"{label}.", problems)


def _to_json(value: Any) -> Any:
    if isinstance(value, MessageValue):
        return {name: _to_json(item) for name, item in value.fields.items()}
    if isinstance(value, tuple):
        return [_to_json(item) for item in value]
    return value
