"""Symbolic expression-tree controllers and dense neural-network controllers.

Both variants evaluate over any scalar kind. Expression trees are parsed from
ordinary infix text with Python's :mod:`ast` module; observation features are
named ``x0, x1, ...`` and index into the controller's observation map.
"""
from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import generic
from .dynamics import CARTPOLE, PENDULUM, MdpConfig, default_obs_map, feature
from .errors import DimMismatch, ParseError, UnknownController


# expression nodes ---------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Obs:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"


Node = Union[Const, Obs, Neg, BinOp]

_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
_OP_NAMES = {"+": "add", "-": "sub", "*": "mul", "/": "div"}
_NAME_OPS = {v: k for k, v in _OP_NAMES.items()}


def parse_expression(text: str) -> Node:
    """Parse infix text over ``x<i>`` names, decimal constants and + - * / and unary minus."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"cannot parse expression {text!r}: {exc.msg}") from exc
    return _from_ast(tree.body)


def _from_ast(node) -> Node:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return Const(float(node.value))
    if isinstance(node, ast.Name):
        if node.id.startswith("x") and node.id[1:].isdigit():
            return Obs(int(node.id[1:]))
        raise ParseError(f"unknown variable {node.id!r}")
    if isinstance(node, ast.UnaryOp):
        arg = _from_ast(node.operand)
        if isinstance(node.op, ast.USub):
            if isinstance(arg, Const):
                return Const(-arg.value)
            return Neg(arg)
        if isinstance(node.op, ast.UAdd):
            return arg
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return BinOp(_BINOPS[type(node.op)], _from_ast(node.left), _from_ast(node.right))
    raise ParseError(f"unsupported syntax: {ast.dump(node)}")


def format_expression(node: Node) -> str:
    """Fully parenthesized infix text that parses back to the same tree."""
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Obs):
        return f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{format_expression(node.arg)})"
    return f"({format_expression(node.left)} {node.op} {format_expression(node.right)})"


def evaluate_node(node: Node, obs: Sequence):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Obs):
        return obs[node.index]
    if isinstance(node, Neg):
        return -evaluate_node(node.arg, obs)
    a = evaluate_node(node.left, obs)
    b = evaluate_node(node.right, obs)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    return generic.divide(a, b)


def _walk(node: Node):
    yield node
    if isinstance(node, Neg):
        yield from _walk(node.arg)
    elif isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)


def _constants(node: Node) -> list:
    return [n.value for n in _walk(node) if isinstance(n, Const)]


def _replace_constants(node: Node, values: list) -> Node:
    if isinstance(node, Const):
        return Const(float(values.pop(0)))
    if isinstance(node, Obs):
        return node
    if isinstance(node, Neg):
        return Neg(_replace_constants(node.arg, values))
    left = _replace_constants(node.left, values)
    right = _replace_constants(node.right, values)
    return BinOp(node.op, left, right)


def _to_node_list(root: Node) -> tuple[list, int]:
    """Post-order node table; children referenced by index."""
    table: list = []

    def visit(n):
        if isinstance(n, Const):
            table.append({"op": "const", "value": repr(n.value)})
        elif isinstance(n, Obs):
            table.append({"op": "obs", "index": n.index})
        elif isinstance(n, Neg):
            a = visit(n.arg)
            table.append({"op": "neg", "args": [a]})
        else:
            a = visit(n.left)
            b = visit(n.right)
            table.append({"op": _OP_NAMES[n.op], "args": [a, b]})
        return len(table) - 1

    root_idx = visit(root)
    return table, root_idx


def _from_node_list(table: list, root: int) -> Node:
    built: list = []
    for i, entry in enumerate(table):
        op = entry.get("op")
        args = entry.get("args", [])
        if any((not isinstance(a, int)) or a < 0 or a >= i for a in args):
            raise ParseError(f"node {i} references a later or missing node")
        if op == "const":
            built.append(Const(float(entry["value"])))
        elif op == "obs":
            built.append(Obs(int(entry["index"])))
        elif op == "neg":
            built.append(Neg(built[args[0]]))
        elif op in _NAME_OPS:
            built.append(BinOp(_NAME_OPS[op], built[args[0]], built[args[1]]))
        else:
            raise ParseError(f"unknown node op {op!r}")
    if not 0 <= root < len(built):
        raise ParseError("root index out of range")
    return built[root]


# controller specs --------------------------------------------------------------

class ControllerSpec:
    """Common interface: ``act(config, state)`` returns the raw action."""

    name: str
    system: str
    obs_map: tuple
    action_scale: float

    def observation(self, config: MdpConfig, state: Sequence) -> tuple:
        return tuple(feature(config, state, n) for n in self.obs_map)

    def act(self, config: MdpConfig, state: Sequence):
        return self.evaluate(self.observation(config, state))

    def __call__(self, config: MdpConfig, state: Sequence):
        return self.act(config, state)


@dataclass(frozen=True)
class ExpressionTree(ControllerSpec):
    root: Node
    system: str = PENDULUM
    name: str = "expression"
    obs_map: tuple = ()
    action_scale: float = 1.0

    def __post_init__(self):
        if not self.obs_map:
            object.__setattr__(self, "obs_map", default_obs_map(self.system))
        object.__setattr__(self, "obs_map", tuple(self.obs_map))
        used = [n.index for n in _walk(self.root) if isinstance(n, Obs)]
        if used and max(used) >= len(self.obs_map):
            raise DimMismatch(f"expression uses x{max(used)} but only {len(self.obs_map)} features exist")

    @classmethod
    def from_text(cls, text: str, system: str = PENDULUM, name: str = "expression", **kw) -> "ExpressionTree":
        return cls(parse_expression(text), system=system, name=name, **kw)

    def evaluate(self, obs: Sequence):
        out = evaluate_node(self.root, obs)
        return out * self.action_scale if self.action_scale != 1.0 else out

    @property
    def text(self) -> str:
        return format_expression(self.root)

    @property
    def constants(self) -> list:
        return _constants(self.root)

    def with_constants(self, values: Sequence[float]) -> "ExpressionTree":
        values = list(values)
        if len(values) != len(self.constants):
            raise DimMismatch("wrong number of constants")
        return ExpressionTree(_replace_constants(self.root, values), self.system, self.name,
                              self.obs_map, self.action_scale)

    def to_dict(self) -> dict:
        nodes, root = _to_node_list(self.root)
        return {
            "variant": "expression_tree",
            "name": self.name,
            "system": self.system,
            "obs_map": list(self.obs_map),
            "action_scale": repr(float(self.action_scale)),
            "nodes": nodes,
            "root": root,
            "text": self.text,
        }


_ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"


@dataclass(frozen=True)
class DenseNN(ControllerSpec):
    layers: tuple
    system: str = PENDULUM
    name: str = "dense_nn"
    obs_map: tuple = ()
    action_scale: float = 1.0

    def __post_init__(self):
        if not self.obs_map:
            object.__setattr__(self, "obs_map", default_obs_map(self.system))
        object.__setattr__(self, "obs_map", tuple(self.obs_map))
        width = len(self.obs_map)
        if not self.layers:
            raise DimMismatch("network has no layers")
        for i, layer in enumerate(self.layers):
            w = np.asarray(layer.weights)
            if w.ndim != 2 or w.shape[1] != width:
                raise DimMismatch(f"layer {i} expects {width} inputs, weights have shape {w.shape}")
            if np.shape(layer.bias) != (w.shape[0],):
                raise DimMismatch(f"layer {i} bias has shape {np.shape(layer.bias)}, expected ({w.shape[0]},)")
            if layer.activation not in _ACTIVATIONS:
                raise ParseError(f"unknown activation {layer.activation!r}")
            width = w.shape[0]
        if width != 1:
            raise DimMismatch(f"network output has width {width}, expected 1")

    def evaluate(self, obs: Sequence):
        h = list(obs)
        for layer in self.layers:
            nxt = []
            for row, b in zip(layer.weights, layer.bias):
                acc = float(b)
                for w, x in zip(row, h):
                    if w != 0.0:
                        acc = x * float(w) + acc
                nxt.append(_activate(layer.activation, acc))
            h = nxt
        return h[0] * self.action_scale

    def to_dict(self) -> dict:
        return {
            "variant": "dense_nn",
            "name": self.name,
            "system": self.system,
            "obs_map": list(self.obs_map),
            "action_scale": repr(float(self.action_scale)),
            "layers": [
                {
                    "weights": [[repr(float(v)) for v in row] for row in layer.weights],
                    "bias": [repr(float(v)) for v in layer.bias],
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
        }


def _activate(name: str, x):
    if name == "tanh":
        return generic.tanh(x)
    if name == "relu":
        return generic.relu(x)
    return x


# builtins --------------------------------------------------------------------------

_BUILTIN_TEXT = {
    "landajuela_a1": (PENDULUM, "-7.08*x1 - (13.39*x1 + 3.12*x2) / x0 + 0.27"),
    "7A_AG": (PENDULUM, "-((1.074*(x2*x0) + 3.064*x1) / 0.482)"),
    "9A_AG": (PENDULUM, "-((((1.303*x2 + 4.180*x1)*x0) + 0.364*x1) / 0.519)"),
    "13A_AG": (PENDULUM, "(((x2*1.168 + x1*4.4618)*x0) / ((x2*(-x2*0.014)) - 0.207))"),
    "17A_AG": (PENDULUM, "(((0.567*x2 + 2.032*x1)*x0*1.381) / ((x2*((x2*(x0*x0))*-0.034)) - 0.112))"),
    "19A_AG": (PENDULUM, "(((1.627*x2 + (x1/0.161))*x0) / ((((x1/0.168) + 0.993*x2)*(-x2*0.085)) - 0.754))"),
    "7A_CMA": (PENDULUM, "-((2.865*(x2*x0) + 6.973*x1) / 1.048)"),
    "9A_CMA": (PENDULUM, "((((-105.902*x2 - 424.711*x1)*x0) + 12.033*x1) / 50.577)"),
    "13A_CMA": (PENDULUM, "(((x2*31.252 + x1*122.785)*x0) / ((x2*(-x2*1.426)) - 11.029))"),
    "17A_CMA": (PENDULUM, "(((4.813*x2 + 11.061*x1)*x0*20.311) / ((x2*(-(x2*(x0*x0))*9.437)) - 15.478))"),
    "19A_CMA": (PENDULUM, "(((7.943*x2 + (x1/0.070))*x0) / ((((x1/1.567) - 0.335*x2)*(x2*0.540)) - 0.639))"),
    "cartpole_k17": (CARTPOLE, "((x3*92.07) + 35.31*x4) / (((x4*((x3*14.61) + 2.56*x4))*-3.52) - 12.62)"),
    "cartpole_k19": (CARTPOLE, "((x3*5.04) + 1.42*x4) / ((((-1.83*x4 + 1.35*x3)*((x3*3.35) + 0.50*x4))*0.33) - 1.15)"),
    "cartpole_k21": (CARTPOLE, "((x3*6.76) + 3.62*x4) / (((((x3*3.25) + 0.66*x4)*((x3*9.13) + 1.20*x4))*-0.75) + -0.14)"),
}


def builtin_names() -> list:
    return list(_BUILTIN_TEXT)


def builtin(name: str) -> ExpressionTree:
    """Look up a catalogued symbolic controller (case-insensitive)."""
    key = {k.lower(): k for k in _BUILTIN_TEXT}.get(str(name).lower())
    if key is None:
        raise UnknownController(f"unknown controller {name!r}; known: {', '.join(_BUILTIN_TEXT)}")
    system, text = _BUILTIN_TEXT[key]
    return ExpressionTree.from_text(text, system=system, name=key)


# (de)serialization ------------------------------------------------------------------

def spec_from_dict(data: dict) -> ControllerSpec:
    if not isinstance(data, dict):
        raise ParseError("controller file must contain a JSON object")
    variant = data.get("variant")
    system = data.get("system", PENDULUM)
    obs_map = tuple(data.get("obs_map") or default_obs_map(system))
    try:
        scale = float(data.get("action_scale", "1.0"))
    except (TypeError, ValueError) as exc:
        raise ParseError("action_scale must be a number") from exc
    if variant == "expression_tree":
        if "nodes" in data:
            root = _from_node_list(data["nodes"], int(data.get("root", len(data["nodes"]) - 1)))
        elif "text" in data:
            root = parse_expression(data["text"])
        else:
            raise ParseError("expression tree needs 'nodes' or 'text'")
        return ExpressionTree(root, system=system, name=data.get("name", "expression"),
                              obs_map=obs_map, action_scale=scale)
    if variant == "dense_nn":
        layers = []
        try:
            for entry in data["layers"]:
                w = np.array([[float(v) for v in row] for row in entry["weights"]], dtype=float)
                b = np.array([float(v) for v in entry["bias"]], dtype=float)
                if w.ndim != 2:
                    raise DimMismatch("weights must be a 2-d list")
                layers.append(DenseLayer(w, b, entry.get("activation", "tanh")))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed layer entry: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, (DimMismatch, ParseError)):
                raise
            raise DimMismatch(f"ragged weight matrix: {exc}") from exc
        return DenseNN(tuple(layers), system=system, name=data.get("name", "dense_nn"),
                       obs_map=obs_map, action_scale=scale)
    raise ParseError(f"unknown controller variant {variant!r}")


def spec_to_json(spec: ControllerSpec) -> str:
    return json.dumps(spec.to_dict(), indent=2)


def spec_from_json(text: str) -> ControllerSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"controller file is not JSON: {exc}") from exc
    return spec_from_dict(data)


def load_nn(path) -> ControllerSpec:
    """Load a dense network (or any controller) from a JSON weights file."""
    spec = spec_from_json(Path(path).read_text())
    return spec


def resolve_controller(name_or_path: str) -> ControllerSpec:
    """Accept a builtin name or a path to a controller JSON file."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise UnknownController(f"controller file {name_or_path!r} does not exist")
        return load_nn(p)
    return builtin(name_or_path)


def zero_controller(system: str = PENDULUM) -> ExpressionTree:
    """Uncontrolled system: action identically 0."""
    return ExpressionTree(Const(0.0), system=system, name="zero")
