"""Line-based ``section.key = value`` run configuration.

Every key has a declared type and default; unknown keys are rejected.
Profile parameters live under ``init.`` and are only accepted for the profile
that uses them.  ``RunConfig.resolved_text`` lists every key with the value
actually used, defaults included.
"""

from dataclasses import dataclass, field

from .errors import ConfigError


def _floats(n):
    def parse(text):
        parts = [p for p in text.replace(",", " ").split() if p]
        try:
            vals = tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"expected {n} numbers, got {text!r}") from exc
        if len(vals) == 1 and n == 3:
            vals = vals * 3
        if len(vals) != n:
            raise ConfigError(f"expected {n} numbers, got {text!r}")
        return vals
    parse.__name__ = f"floats{n}"
    return parse


def _float_list(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from exc


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def parse(text):
        t = text.strip().strip('"').strip("'")
        if t not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return t
    return parse


def _str(text):
    return text.strip().strip('"').strip("'")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA = {
    "domain.kind": (_choice("ball", "ellipsoid"), "ball"),
    "domain.semi_axes": (_floats(3), (1.0, 1.0, 1.0)),
    "domain.delta_tube": (float, 0.2),
    "poisson.grid_n": (int, 32),
    "poisson.tol": (float, 1e-10),
    "poisson.max_iter": (int, 500),
    "poisson.compat_tol": (float, 1e-8),
    "poisson.h_profile": (_choice("uniform", "tilted"), "uniform"),
    "poisson.h_tilt": (float, 0.0),
    "poisson.scheme": (_choice("conservative", "ghost"), "conservative"),
    "init.profile": (_choice("flat_bump", "double_bump", "constant"), "flat_bump"),
    "init.n_per_dim": (int, 16),
    "init.delta0": (float, 0.05),
    "init.flat_value": (float, 0.0),
    "init.flat_const": (float, 1.0),
    "init.support_lo": (_floats(6), (-1.0, -1.0, -1.0, -2.5, -2.5, -2.5)),
    "init.support_hi": (_floats(6), (1.0, 1.0, 1.0, 2.5, 2.5, 2.5)),
    "picard.mode": (_choice("picard", "linear", "coupled"), "picard"),
    "picard.T": (float, 0.5),
    "picard.dt": (float, 1.0 / 64.0),
    "picard.tol": (float, 1e-6),
    "picard.max_iter": (int, 25),
    "diag.tracers": (int, 0),
    "diag.partition": (_bool, False),
    "diag.windows": (_float_list, ()),
    "diag.delta": (float, 0.05),
    "diag.c0": (float, 0.1),
    "diag.probes": (int, 8),
    "diag.probe_speed": (float, 1.2),
    "diag.probe_radius": (float, 0.1),
    "diag.snapshot": (_bool, True),
    "run.seed": (int, 0),
    "run.output_dir": (_str, "output"),
}

PROFILE_KEYS = {
    "flat_bump": {
        "center_x": (_floats(3), (0.0, 0.0, 0.0)),
        "center_v": (_floats(3), (0.0, 0.0, 0.0)),
        "radius_x": (float, 0.5),
        "radius_v": (float, 1.25),
        "amplitude": (float, 1.0),
    },
    "double_bump": {
        "offset": (float, 0.4),
        "speed": (float, 0.5),
        "axis": (int, 0),
        "radius_x": (float, 0.3),
        "radius_v": (float, 0.8),
        "amplitude": (float, 1.0),
    },
    "constant": {
        "value": (float, 1.0),
    },
}

_ALL_PROFILE_KEYS = {f"init.{k}" for keys in PROFILE_KEYS.values() for k in keys}


def parse_lines(text, source="<config>"):
    """``{key: raw value}`` from config text; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key or not value:
            raise ConfigError(f"{source}:{lineno}: malformed entry {line!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def profile_params(self):
        prefix = "init."
        names = PROFILE_KEYS[self.values["init.profile"]]
        return {k: self.values[prefix + k] for k in names}

    def resolved_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))


def build(raw):
    """Typed configuration from raw strings, filling defaults."""
    raw = dict(raw)
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw.pop(key))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        else:
            values[key] = default
    profile = values["init.profile"]
    for name, (parse, default) in PROFILE_KEYS[profile].items():
        key = "init." + name
        if key in raw:
            try:
                values[key] = parse(raw.pop(key))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        else:
            values[key] = default
    if raw:
        bad = sorted(raw)
        misplaced = [k for k in bad if k in _ALL_PROFILE_KEYS]
        if misplaced:
            raise ConfigError(f"keys {misplaced} do not apply to profile {profile!r}")
        raise ConfigError(f"unknown configuration keys: {bad}")
    _validate(values)
    return RunConfig(values)


def _validate(v):
    if v["poisson.grid_n"] < 4:
        raise ConfigError("poisson.grid_n must be at least 4")
    if v["init.n_per_dim"] < 1:
        raise ConfigError("init.n_per_dim must be positive")
    if v["picard.T"] <= 0.0 or v["picard.dt"] <= 0.0:
        raise ConfigError("picard.T and picard.dt must be positive")
    n = round(v["picard.T"] / v["picard.dt"])
    if abs(n * v["picard.dt"] - v["picard.T"]) > 1e-9 * v["picard.T"]:
        raise ConfigError("picard.T must be a multiple of picard.dt")
    if v["picard.max_iter"] < 1:
        raise ConfigError("picard.max_iter must be at least 1")
    if v["domain.kind"] == "ball" and len(set(v["domain.semi_axes"])) != 1:
        raise ConfigError("domain.kind = ball needs equal semi-axes")


def load(path, overrides=()):
    """Read a config file and apply ``key=value`` overrides."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = parse_lines(text, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (p.strip() for p in item.split("=", 1))
        raw[key] = value
    return build(raw)
