"""INI experiment files: [world] [batch] [loss] [proxy] [otdd] [run]."""
from __future__ import annotations

import configparser
import dataclasses
import re
import typing
from dataclasses import dataclass, field

from ..graph import ConfigError
from .train import RunConfig
from .world import WorldSpec

__all__ = ["ExperimentConfig", "SECTIONS", "load_config", "parse_config", "apply_overrides"]

SECTIONS = {
    "world": [*WorldSpec.field_names(), "seed"],
    "batch": ["m", "n", "C", "K", "mining", "sigma_aug"],
    "loss": ["regularizer", "lam", "inv_tau", "bias"],
    "proxy": ["s", "alpha", "eps_var", "attn_dim", "gen_hidden", "lr_generator"],
    "otdd": ["otdd_p", "otdd_k"],
    "run": ["methods", "seeds", "workers", "steps", "eval_every", "encoder", "hidden", "normalize", "optimizer",
            "momentum", "lr_encoder", "lr_head", "lr_scalars", "probe_l2", "probe_tol", "probe_epochs"],
}
_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_WORLD_FIELDS = {f.name: f for f in dataclasses.fields(WorldSpec)}
DEFAULT_METHODS = ("none", "pointwise-l2", "fda", "proxy-fda")


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    world_seed: int = 0
    run: dict = field(default_factory=dict)
    methods: list[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    workers: int = 1

    def run_config(self, method: str) -> RunConfig:
        return RunConfig(**{**self.run, "regularizer": method})


def _convert(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    text = raw.strip()
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if text.lower() in ("", "none", "auto"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(raw, inner, where)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            return tuple(_convert(p, args[0], where) for p in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw.strip()!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip())] = no
    return lines


def _int_list(raw: str, where: str) -> list[int]:
    text = raw.strip()
    m = re.fullmatch(r"(\d+)\s*\.\.\s*(\d+)", text)
    if m:
        return list(range(int(m.group(1)), int(m.group(2)) + 1))
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{where}: seeds must be integers or a range 'a..b'") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse INI text. Errors name the file, line and field."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    lines = _line_numbers(text)
    world_kw, run_kw = {}, {}
    exp = ExperimentConfig()
    for section in cp.sections():
        key = section.lower()
        if key not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        for name, raw in cp.items(section):
            where = f"{source}:{lines.get((key, name), '?')}: [{key}] {name}"
            if name not in SECTIONS[key]:
                raise ConfigError(f"{where}: unknown field for this section")
            if key == "world":
                if name == "seed":
                    exp.world_seed = _convert(raw, int, where)
                else:
                    world_kw[name] = _convert(raw, _resolve(WorldSpec, name), where)
            elif name == "methods":
                exp.methods = [m for m in raw.replace(",", " ").split()]
                if not exp.methods:
                    raise ConfigError(f"{where}: method list is empty")
            elif name == "seeds":
                exp.seeds = _int_list(raw, where)
            elif name == "workers":
                exp.workers = _convert(raw, int, where)
            else:
                run_kw[name] = _convert(raw, _resolve(RunConfig, name), where)
    try:
        exp.world = WorldSpec(**world_kw)
    except ConfigError as err:
        raise ConfigError(f"{source}: [world] {err}") from None
    exp.run = run_kw
    _validate(exp, source)
    return exp


def _resolve(cls, name):
    return typing.get_type_hints(cls)[name]


def _validate(exp: ExperimentConfig, source: str) -> None:
    if not exp.methods:
        raise ConfigError(f"{source}: [run] methods: method list is empty")
    if not exp.seeds:
        raise ConfigError(f"{source}: [run] seeds: no seeds given")
    if exp.workers < 1:
        raise ConfigError(f"{source}: [run] workers must be >= 1")
    for m in exp.methods:
        try:
            exp.run_config(m)
        except (ConfigError, ValueError) as err:
            raise ConfigError(f"{source}: method {m!r}: {err}") from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def apply_overrides(exp: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.field=value`` overrides (CLI flags win over file values)."""
    lines = []
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        lhs, value = item.split("=", 1)
        section, name = lhs.split(".", 1)
        lines.append((section.strip().lower(), name.strip(), value))
    text = _render(exp)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    for section, name, value in lines:
        if section not in SECTIONS:
            raise ConfigError(f"override {section}.{name}: unknown section [{section}]")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    out = []
    for s in cp.sections():
        out.append(f"[{s}]")
        out.extend(f"{k} = {v}" for k, v in cp.items(s))
    return parse_config("\n".join(out) + "\n", "<overrides>")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return " ".join(str(x) for x in v)
    return str(v)


def _render(exp: ExperimentConfig) -> str:
    out = ["[world]", f"seed = {exp.world_seed}"]
    out += [f"{k} = {_fmt(getattr(exp.world, k))}" for k in WorldSpec.field_names()]
    for section in ("batch", "loss", "proxy", "otdd", "run"):
        out.append(f"[{section}]")
        for k in SECTIONS[section]:
            if k == "methods":
                out.append(f"methods = {' '.join(exp.methods)}")
            elif k == "seeds":
                out.append(f"seeds = {' '.join(map(str, exp.seeds))}")
            elif k == "workers":
                out.append(f"workers = {exp.workers}")
            elif k in exp.run:
                out.append(f"{k} = {_fmt(exp.run[k])}")
    return "\n".join(out) + "\n"
