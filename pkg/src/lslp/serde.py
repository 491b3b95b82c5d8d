"""Strict dataclass <-> JSON-document conversion for configs.

Unknown keys are hard errors, missing keys fall back to the dataclass
defaults, lists coerce to tuples where the field expects one, and nested
dataclasses recurse. This keeps every config file auditable: what is not in
the schema does not silently pass through.
"""

import dataclasses

from .errors import ConfigError


def to_doc(obj):
    """Dataclass instance -> JSON-able dict (tuples become lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_doc(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_doc(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_doc(v) for k, v in obj.items()}
    return obj


def from_doc(cls, doc, where=""):
    """Build ``cls`` from ``doc``, rejecting unknown keys."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in doc:
            continue
        value = doc[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(f.type):
            kwargs[name] = from_doc(f.type, value, path)
        elif f.type is tuple or isinstance(_default_of(f), tuple):
            kwargs[name] = _tupleize(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


def _tupleize(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupleize(v) for v in value)
    return value
