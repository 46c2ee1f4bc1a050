"""Plain-text ``key = value`` config files.

Blank lines and ``#`` comments are ignored.  Keys use underscores
(``lr_peak``); dashes are accepted and normalized.
"""

from pathlib import Path


class ConfigError(ValueError):
    pass


def read_config(path):
    values = {}
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def write_config(path, values, header=None):
    lines = [f"# {header}"] if header else []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {'' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n")


def merge(defaults, file_values=None, flags=None):
    """Resolve settings with precedence flags > file > defaults.

    ``flags`` entries that are None count as "not given".
    """
    out = dict(defaults)
    for source in (file_values or {}, flags or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in defaults:
                raise ConfigError(f"unknown setting {key!r}")
            out[key] = value
    return out
