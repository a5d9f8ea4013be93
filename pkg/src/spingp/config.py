"""Kernel expression grammar and experiment configuration.

Kernel expressions are sums of calls with keyword arguments::

    matern32(var=1.0, len=2.5) + eq(var=1.0, len=100, order=10)

They happen to be valid Python expressions, so parsing goes through ``ast``
and then a strict whitelist walk: only ``+``, known kernel names and numeric
keyword arguments are accepted.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .kernels import EQApprox, Kernel, Matern12, Matern32, Matern52, Sum

__all__ = ["parse_kernel", "format_kernel", "ExperimentConfig", "load_config_file", "KernelSyntaxError"]

_LEAVES = {
    "matern12": Matern12,
    "exp": Matern12,
    "matern32": Matern32,
    "matern52": Matern52,
    "eq": EQApprox,
    "rbf": EQApprox,
}
_ARG_ALIASES = {
    "var": "variance",
    "variance": "variance",
    "magnitude": "variance",
    "len": "lengthscale",
    "lengthscale": "lengthscale",
    "ell": "lengthscale",
    "order": "order",
}
_CANONICAL = {Matern12: "matern12", Matern32: "matern32", Matern52: "matern52", EQApprox: "eq"}


class KernelSyntaxError(ValueError):
    pass


def _number(node, src):
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _number(node.operand, src)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    raise KernelSyntaxError(f"expected a number, got {ast.get_source_segment(src, node)!r}")


def _leaf(node, src) -> Kernel:
    if isinstance(node, ast.Name):
        name, kwargs = node.id, []
    elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        if node.args:
            raise KernelSyntaxError(f"{node.func.id}: use keyword arguments, e.g. var=1.0, len=2.0")
        name, kwargs = node.func.id, node.keywords
    else:
        raise KernelSyntaxError(f"unexpected term {ast.get_source_segment(src, node)!r}")
    cls = _LEAVES.get(name.lower())
    if cls is None:
        raise KernelSyntaxError(f"unknown kernel {name!r}; known: {', '.join(sorted(_LEAVES))}")
    args = {}
    for kw in kwargs:
        key = _ARG_ALIASES.get((kw.arg or "").lower())
        if key is None or (key == "order" and cls is not EQApprox):
            raise KernelSyntaxError(f"{name}: unknown argument {kw.arg!r}")
        if key in args:
            raise KernelSyntaxError(f"{name}: argument {kw.arg!r} given twice")
        args[key] = _number(kw.value, src)
    try:
        return cls(**args)
    except (TypeError, ValueError) as exc:
        raise KernelSyntaxError(str(exc)) from None


def parse_kernel(expr: str) -> Kernel:
    """Parse a kernel expression into a ``Kernel``."""
    src = expr.strip()
    if not src:
        raise KernelSyntaxError("empty kernel expression")
    try:
        tree = ast.parse(src, mode="eval").body
    except SyntaxError as exc:
        raise KernelSyntaxError(f"cannot parse kernel expression {expr!r}: {exc.msg}") from None
    terms = []

    def walk(node):
        if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Add):
            walk(node.left)
            walk(node.right)
        else:
            terms.append(_leaf(node, src))

    walk(tree)
    return terms[0] if len(terms) == 1 else Sum(tuple(terms))


def format_kernel(kernel: Kernel) -> str:
    """Inverse of ``parse_kernel``; floats are written with ``repr`` so they round-trip."""
    if isinstance(kernel, Sum):
        return " + ".join(format_kernel(c) for c in kernel.children)
    name = _CANONICAL.get(type(kernel))
    if name is None:
        raise TypeError(f"cannot format kernel {kernel!r}")
    s = f"{name}(var={kernel.variance!r}, len={kernel.lengthscale!r}"
    if isinstance(kernel, EQApprox):
        s += f", order={kernel.order}"
    return s + ")"


DEFAULT_KERNEL = "matern32(var=1.0, len=5.0) + eq(var=1.0, len=10.0, order=10)"
DEFAULT_CO2_KERNEL = "matern32(var=1.0, len=1.0) + eq(var=100.0, len=20.0, order=10)"


def _ints(v):
    if isinstance(v, str):
        return tuple(int(x) for x in v.replace(",", " ").split())
    return tuple(int(x) for x in v)


def _strs(v):
    if isinstance(v, str):
        return tuple(x for x in v.replace(",", " ").split())
    return tuple(v)


def _bool(v):
    if isinstance(v, str):
        return v.strip().lower() in {"1", "true", "yes", "on"}
    return bool(v)


@dataclass
class ExperimentConfig:
    kernel: str = DEFAULT_KERNEL
    methods: tuple[str, ...] = ("spingp",)
    n_values: tuple[int, ...] = (1000, 2000, 4000, 8000)
    b_values: tuple[int, ...] = (2, 4, 8, 12, 16)
    n: int = 1000
    seed: int = 0
    repetitions: int = 5
    threads: int = 1
    out: str = "out"
    noise: float = 0.04
    budget: int = 200
    parallel_cells: bool = False
    backend: str = ""
    jitter: float | None = None  # None: engine default (co2 uses its own)
    data: str = ""
    test_times: str = ""
    include_noise: bool = False
    holdout_years: float = 8.0
    forecast_years: float = 8.0

    _CONVERT = {
        "methods": _strs,
        "n_values": _ints,
        "b_values": _ints,
        "n": int,
        "seed": int,
        "repetitions": int,
        "threads": int,
        "noise": float,
        "budget": int,
        "parallel_cells": _bool,
        "include_noise": _bool,
        "jitter": float,
        "holdout_years": float,
        "forecast_years": float,
    }
    _ALIASES = {"method": "methods", "n_list": "n_values", "b_list": "b_values", "parallel-cells": "parallel_cells"}

    def __post_init__(self):
        self.validate()

    def validate(self):
        for m in self.methods:
            if m not in ("spingp", "kf", "dense"):
                raise ValueError(f"unknown method {m!r}; choose from spingp, kf, dense")
        if self.n < 1 or any(v < 1 for v in self.n_values):
            raise ValueError("N must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.noise > 0:
            raise ValueError("noise variance must be positive")
        parse_kernel(self.kernel)

    def kernel_obj(self) -> Kernel:
        return parse_kernel(self.kernel)

    def updated(self, **overrides) -> "ExperimentConfig":
        """Copy with ``overrides`` applied; ``None`` values are ignored."""
        known = {f.name for f in dataclasses.fields(self)}
        vals = dataclasses.asdict(self)
        for k, v in overrides.items():
            if v is None:
                continue
            k = self._ALIASES.get(k, k).replace("-", "_")
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            conv = self._CONVERT.get(k)
            vals[k] = conv(v) if conv else v
        return ExperimentConfig(**vals)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config_file(path) -> dict:
    """Read ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string("[config]\n" + text)
    return dict(cp["config"])
