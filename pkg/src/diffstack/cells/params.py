"""Model families, parameter layouts and the text checkpoint format."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..mathcore import DTYPE, RngStream, uniform_init

CORES = ("rnn", "lstm", "gru", "mrnn", "mlstm", "mirnn")


@dataclass(frozen=True)
class Family:
    name: str
    core: str
    stack: bool
    noise: bool = True
    carry_forward: bool = True
    hard_negatives: bool = True


# Declared order doubles as the row order of every results table.
FAMILIES = {
    f.name: f
    for f in (
        Family("rnn", "rnn", False, noise=False),
        Family("lstm", "lstm", False, noise=False),
        Family("gru", "gru", False, noise=False),
        Family("stackrnn", "rnn", True, noise=False, carry_forward=False, hard_negatives=False),
        Family("diffstk-rnn", "rnn", True),
        Family("diffstk-lstm", "lstm", True),
        Family("diffstk-mrnn", "mrnn", True),
        Family("diffstk-mlstm", "mlstm", True),
        Family("diffstk-mirnn", "mirnn", True),
    )
}
FAMILY_ORDER = tuple(FAMILIES)

DISPLAY_NAMES = {
    "rnn": "RNN",
    "lstm": "LSTM",
    "gru": "GRU",
    "stackrnn": "StackRNN",
    "diffstk-rnn": "DiffStk-RNN",
    "diffstk-lstm": "DiffStk-LSTM",
    "diffstk-mrnn": "DiffStk-MRNN",
    "diffstk-mlstm": "DiffStk-MLSTM",
    "diffstk-mirnn": "DiffStk-MIRNN",
}


def get_family(name: str) -> Family:
    key = name.lower()
    if key not in FAMILIES:
        raise ValueError(f"unknown cell family {name!r}; choose from {', '.join(FAMILY_ORDER)}")
    return FAMILIES[key]


# shape codes: m hidden, d vocabulary, k stack read width
HEAD_PARAMS = (("V", "dm"), ("b_v", "d"), ("w_y", "1m"), ("b_y", "1"))
STACK_PARAMS = (("P", "mk"), ("A", "3m"), ("b_a", "3"), ("D", "1m"), ("b_d", "1"))
CORE_PARAMS = {
    "rnn": (("U", "md"), ("R", "mm"), ("b", "m")),
    "lstm": (
        ("U", "md"), ("R", "mm"), ("b", "m"),
        ("U_i", "md"), ("R_i", "mm"), ("b_i", "m"),
        ("U_o", "md"), ("R_o", "mm"), ("b_o", "m"),
        ("U_f", "md"), ("R_f", "mm"), ("b_f", "m"),
    ),
    "gru": (
        ("U", "md"), ("R", "mm"), ("b", "m"),
        ("U_r", "md"), ("R_r", "mm"), ("b_r", "m"),
        ("U_u", "md"), ("R_u", "mm"), ("b_u", "m"),
    ),
    "mrnn": (("W_mx", "md"), ("W_mz", "mm"), ("W_zm", "mm"), ("W_zx", "md"), ("b", "m")),
    "mlstm": (
        ("U_m", "md"), ("R_m", "mm"), ("U", "md"), ("R_z", "mm"), ("b", "m"),
        ("U_i", "md"), ("R_im", "mm"), ("b_i", "m"),
        ("U_o", "md"), ("R_om", "mm"), ("b_o", "m"),
        ("U_f", "md"), ("R_fom", "mm"), ("b_f", "m"),
    ),
    "mirnn": (("U", "md"), ("R", "mm"), ("b_u", "m"), ("b_r", "m")),
}


def _shape(code: str, d: int, m: int, k: int) -> tuple[int, ...]:
    dims = {"m": m, "d": d, "k": k, "1": 1, "3": 3}
    return tuple(dims[c] for c in code)


@dataclass
class ModelParams:
    """Named weight matrices stored in one flat float64 vector."""

    family: str
    d: int
    m: int
    k: int = 3
    stack: bool = True
    noop_identity: bool = True
    inject_all_gates: bool = True
    seed: int = 0
    steps: int = 0
    flat: np.ndarray = field(default=None, repr=False)
    layout: dict = field(default=None, repr=False)

    def __post_init__(self):
        fam = get_family(self.family)
        self.family = fam.name
        self.layout = {}
        off = 0
        for name, code in self.param_specs():
            shape = _shape(code, self.d, self.m, self.k)
            size = int(np.prod(shape))
            self.layout[name] = (off, shape)
            off += size
        if self.flat is None:
            self.flat = np.zeros(off, dtype=DTYPE)
        elif self.flat.shape != (off,):
            raise ValueError(f"flat vector has {self.flat.size} entries, layout needs {off}")

    @property
    def core(self) -> str:
        return get_family(self.family).core

    def param_specs(self):
        specs = list(HEAD_PARAMS)
        if self.stack:
            specs += STACK_PARAMS
        specs += CORE_PARAMS[get_family(self.family).core]
        return specs

    @property
    def names(self) -> list[str]:
        return list(self.layout)

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.flat[off : off + int(np.prod(shape))].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.layout}

    def copy(self) -> "ModelParams":
        return replace(self, flat=self.flat.copy(), layout=None)

    def grad_view(self, flat_grad: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for n, (off, shape) in self.layout.items():
            out[n] = flat_grad[off : off + int(np.prod(shape))].reshape(shape)
        return out


def init_params(
    family: str,
    d: int,
    m: int,
    seed: int,
    k: int = 3,
    stack: bool | None = None,
    noop_identity: bool = True,
    inject_all_gates: bool = True,
) -> ModelParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases.

    Exceptions: LSTM-style forget biases start at 1 and the MIRNN recurrent
    bias at 1, so the multiplicative path is open at the zero start state.
    """
    fam = get_family(family)
    params = ModelParams(
        fam.name, d, m, k,
        stack=fam.stack if stack is None else stack,
        noop_identity=noop_identity, inject_all_gates=inject_all_gates, seed=seed,
    )
    rng = RngStream(seed)
    for name, (_, shape) in params.layout.items():
        if len(shape) == 2:
            params[name] = uniform_init(rng, *shape)
    if "b_f" in params:
        params["b_f"] = 1.0
    if fam.core == "mirnn":
        params["b_r"] = 1.0
    return params


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: Path) -> None:
    lines = [
        "# diffstack checkpoint v1",
        f"family={params.family} d={params.d} m={params.m} k={params.k} seed={params.seed} "
        f"steps={params.steps} stack={int(params.stack)} noop_identity={int(params.noop_identity)} "
        f"inject_all_gates={int(params.inject_all_gates)}",
    ]
    for name, (_, shape) in params.layout.items():
        rows, cols = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
        lines.append(f"[{name}] {rows} {cols}")
        mat = params[name].reshape(rows, cols)
        for row in mat:
            lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: Path) -> ModelParams:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# diffstack checkpoint"):
        raise CheckpointError(f"{path} is not a checkpoint")
    header = dict(kv.split("=", 1) for kv in text[1].split())
    params = ModelParams(
        header["family"], int(header["d"]), int(header["m"]), int(header["k"]),
        stack=bool(int(header["stack"])),
        noop_identity=bool(int(header["noop_identity"])),
        inject_all_gates=bool(int(header["inject_all_gates"])),
        seed=int(header["seed"]), steps=int(header["steps"]),
    )
    i = 2
    seen = set()
    while i < len(text):
        line = text[i]
        if not line.strip():
            i += 1
            continue
        if not line.startswith("["):
            raise CheckpointError(f"unexpected line {i + 1}: {line[:40]!r}")
        name, rows, cols = line[1:].replace("]", "").split()
        rows, cols = int(rows), int(cols)
        if name not in params:
            raise CheckpointError(f"unexpected matrix {name!r} for family {params.family}")
        vals = np.array([[float(v) for v in text[i + 1 + r].split()] for r in range(rows)], dtype=DTYPE)
        if vals.shape != (rows, cols) or vals.size != params[name].size:
            raise CheckpointError(f"matrix {name!r} has the wrong shape")
        params[name] = vals.reshape(params[name].shape)
        seen.add(name)
        i += 1 + rows
    missing = set(params.names) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
    return params
