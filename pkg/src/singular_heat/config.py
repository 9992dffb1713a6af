"""Flat ``key = value`` run configuration with dotted section prefixes.

Example::

    # grid
    grid.m = 24
    spectrum.eps_list = 0.2, 0.1, 0.05
    seed = 7

Lines starting with ``#`` are comments.  Unknown keys and malformed values are
rejected with the offending line number.  Derived quantities (mu*, p1/p2/p3,
admissible r, lambda_min, s0, ...) are never read from a config; they are
recomputed by the drivers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in (p.strip() for p in text.split(",")) if v)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("auto", "none") else float(text)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _theta(text: str) -> float:
    v = float(text)
    if v not in (0.5, 1.0):
        raise ValueError("theta must be 0.5 or 1")
    return v


def _center(text: str) -> tuple[float, float, float]:
    v = _floats(text)
    if len(v) != 3:
        raise ValueError("need three coordinates")
    return v  # type: ignore[return-value]


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "output_dir": (str, "results"),
    "mu": (_opt_float, None),
    "grid.L": (float, 1.0),
    "grid.m": (int, 24),
    "grid.shape": (_choice("ball", "box"), "ball"),
    "coefficient.kind": (_choice("constant", "bump"), "bump"),
    "coefficient.value": (float, 1.0),
    "coefficient.amplitude": (float, 0.2),
    "coefficient.width": (float, 0.5),
    "omega.kind": (_choice("ball", "annulus"), "ball"),
    "omega.center": (_center, (0.6, 0.0, 0.0)),
    "omega.radius": (float, 0.15),
    "omega.inner": (float, 0.55),
    "omega.outer": (float, 0.75),
    "omega.r": (_opt_float, None),
    "time.T": (float, 1.0),
    "time.N": (int, 100),
    "time.theta": (_theta, 0.5),
    "hardy.m_list": (_ints, (16, 24, 32)),
    "hardy.gamma": (float, 1.0),
    "hardy.l": (float, 0.5),
    "hardy.tolerance": (float, 0.15),
    "spectrum.m": (int, 48),
    "spectrum.mu_factor": (float, 1.5),
    "spectrum.control_factor": (float, 0.8),
    "spectrum.eps_list": (_floats, (0.2, 0.1, 0.05)),
    "spectrum.tau": (float, 0.3),
    "spectrum.T": (float, 1.0),
    "solve.mu_factors": (_floats, (0.0, 0.5, 0.9)),
    "solve.samples": (int, 20),
    "solve.pairs": (int, 20),
    "weights.gamma": (float, 1.0),
    "weights.lambda": (_opt_float, None),
    "weights.s_factors": (_floats, (1.0, 2.0, 4.0)),
    "carleman.m_list": (_ints, (16, 24)),
    "carleman.r": (float, 0.3),
    "carleman.mu_factor": (float, 0.5),
    "carleman.N": (int, 50),
    "carleman.samples": (int, 5),
    "carleman.fd_samples": (int, 100),
    "carleman.fd_steps": (_floats, (1e-2, 1e-3)),
    "hum.mu_factor": (float, 0.5),
    "hum.delta_pen": (float, 1e-6),
    "hum.cg_tol": (float, 1e-8),
    "hum.T_list": (_floats, (0.5, 1.0, 2.0)),
    "stabilize.mu_factor": (float, 2.0),
    "stabilize.omega_radius": (float, 0.6),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        vals = dict(self.values)
        for i, pair in enumerate(pairs, 1):
            key, value = _split(pair, f"--override #{i}")
            vals[key] = _parse_value(key, value, f"--override #{i}")
        return RunConfig(vals)

    def dump(self) -> str:
        lines = []
        for key in SCHEMA:
            v = self.values[key]
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif v is None:
                v = "auto"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _split(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    key, value = (s.strip() for s in line.split("=", 1))
    if not key or not value:
        raise ConfigError(f"{where}: empty key or value in {line!r}")
    return key, value


def _parse_value(key: str, value: str, where: str):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown field {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: field {key!r}: cannot parse {value!r} ({exc})") from None


def defaults() -> RunConfig:
    return RunConfig({k: v for k, (_, v) in SCHEMA.items()})


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    vals = {k: v for k, (_, v) in SCHEMA.items()}
    seen = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, value = _split(line, where)
        vals[key] = _parse_value(key, value, where)
        seen += 1
    if seen == 0:
        raise ConfigError(f"{source}: configuration is empty")
    return RunConfig(vals)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p))
