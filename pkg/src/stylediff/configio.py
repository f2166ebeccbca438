"""Plain-text config files: `key = value` lines under [section] headers.

Grammar (documented in the README):
  - blank lines and lines starting with '#' are ignored
  - a section header is '[model]', '[train]' or '[data]'
  - entries are 'key = value'; keys must belong to the section
  - values are parsed by the target field type (int, float, bool: true/false,
    str; comma-separated lists for tuple fields)
Unknown sections or keys are rejected.
"""

from dataclasses import fields

from .model import ModelConfig


def _parse_value(raw, typ):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is tuple:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def config_to_text(train_config):
    """Serialize a TrainConfig (with nested ModelConfig) deterministically."""
    lines = ["[model]"]
    for f in sorted(fields(ModelConfig), key=lambda f: f.name):
        lines.append(f"{f.name} = {_format_value(getattr(train_config.model, f.name))}")
    lines.append("")
    lines.append("[train]")
    for f in sorted(fields(type(train_config)), key=lambda f: f.name):
        if f.name == "model":
            continue
        lines.append(f"{f.name} = {_format_value(getattr(train_config, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text, train_config_cls):
    """Parse the textual form back into a TrainConfig; unknown keys fail."""
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(train_config_cls) if f.name != "model"}
    typemap = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    model_kwargs, train_kwargs = {}, {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in ("model", "train", "data"):
                raise ValueError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if section == "model":
            if key not in model_fields:
                raise ValueError(f"line {lineno}: unknown [model] key {key!r}")
            typ = model_fields[key]
            model_kwargs[key] = _parse_value(raw, typemap.get(typ, typ) if isinstance(typ, str) else typ)
        elif section in ("train", "data"):
            if key not in train_fields:
                raise ValueError(f"line {lineno}: unknown [{section}] key {key!r}")
            typ = train_fields[key]
            train_kwargs[key] = _parse_value(raw, typemap.get(typ, typ) if isinstance(typ, str) else typ)
        else:
            raise ValueError(f"line {lineno}: entry before any section header")
    return train_config_cls(model=ModelConfig(**model_kwargs), **train_kwargs)
