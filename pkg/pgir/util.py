from typing import Any, Callable
from pathlib import Path
from dataclasses import dataclass, fields, is_dataclass
from docstring_parser import parse as doc_parse
import builtins
import inspect
import logging
import shlex
import subprocess
import networkx as nx


logging.basicConfig(
    level=logging.INFO,
    format="[%(levelname)s]\t%(message)s",
    handlers=[
        logging.StreamHandler(),
    ],
)
logger = logging.getLogger("pgir")


def resource_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "resources"


def resource_data(res_path: str, binary: bool = False) -> str | bytes:
    res = resource_dir() / res_path
    if binary:
        return res.read_bytes()
    return res.read_text(encoding="utf-8")


def run_converter(command: str, body: str, timeout: float = 60.0) -> str:
    """Pipe a rule body through an external converter and return its stdout.

    Parameters
    ----------
    command : str
        Shell-style command line, split with shlex (no shell is spawned).
    body : str
        Raw rule text written to the converter's stdin.
    timeout : float
        Seconds before the converter is killed.

    Returns
    -------
    str
        Converted rule text.
    """
    try:
        out = subprocess.run(
            shlex.split(command),
            input=body,
            capture_output=True,
            text=True,
            timeout=timeout,
            check=True,
        )
    except (subprocess.CalledProcessError, subprocess.TimeoutExpired, OSError) as e:
        raise ValueError(f"Converter '{command}' failed") from e

    return out.stdout


def format_hierarchy(graph: nx.DiGraph, label: Callable[[Any], str] = str) -> str:
    visited = set()
    ret = ""

    def delve(nid: Any, prefix: str):
        nonlocal ret

        if nid in visited:
            return

        visited.add(nid)
        children = list(graph.successors(nid))

        for i, child in enumerate(children):
            is_last = i == len(children) - 1
            branch = "└──" if is_last else "├──"
            ret += f"{prefix}{branch} {label(child)}\n"

            new_prefix = prefix + ("    " if is_last else "│   ")
            delve(child, new_prefix)

    roots = [n for n in graph.nodes() if graph.in_degree(n) == 0]
    if not roots:
        logger.warning("Could not determine root node")
        return ""

    root = roots[0]
    if len(roots) > 1:
        logger.warning(f"Multiple roots found, using {root}")

    ret = f"{label(root)}\n"
    delve(root, "")
    return ret.rstrip("\n")


@dataclass
class FuncArg:
    undefined = object()

    name: str
    type: type
    default: Any = None
    doc: str = None


def get_dataclass_spec(
    cls: type, undefined: Any = FuncArg.undefined
) -> dict[str, FuncArg]:
    """Describe the fields of a dataclass, taking help texts from its docstring.

    The class docstring is expected to document fields in a numpy-style
    ``Parameters`` or ``Attributes`` section.
    """
    if not is_dataclass(cls):
        raise ValueError(f"{cls} is not a dataclass")

    sig = inspect.signature(cls)
    param_doc = {}
    if cls.__doc__:
        parsed_doc = doc_parse(cls.__doc__)
        param_doc = {p.arg_name: p.description for p in parsed_doc.params}

    spec = {}
    for f in fields(cls):
        param = sig.parameters.get(f.name)
        ptype = f.type
        if isinstance(ptype, str):
            # NOTE use the proper builtins module here, __builtins__ is unreliable
            ptype = getattr(builtins, ptype, None)

        default = undefined
        if param is not None and param.default is not inspect.Parameter.empty:
            default = param.default
            if ptype is None and default is not None:
                ptype = type(default)

        spec[f.name] = FuncArg(f.name, ptype, default, param_doc.get(f.name))

    return spec


def parse_overrides(text: str) -> dict[str, str]:
    """Parse ``key=value,key=value`` into a dict (values stay strings)."""
    ret = {}
    if not text:
        return ret

    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue

        if "=" not in part:
            raise ValueError(f"Expected key=value, got '{part}'")

        key, value = part.split("=", 1)
        ret[key.strip()] = value.strip()

    return ret
