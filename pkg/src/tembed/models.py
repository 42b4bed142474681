"""Model zoo with exact hand-derived gradients.

Families: linear regression, logistic regression, MLP (both consume the
flattened step-by-feature matrix), LSTM (last hidden state feeds a dense
head), and self-attentive LSTM (attention-pooled hidden states feed the
head). Time information enters through one of four input regimes:

* ``none``: binned values only;
* ``mask``: values plus missingness/gap columns (built by the dataset
  module, the model just sees a wider input);
* ``cat_te``: values plus grid-time embedding columns (also built by the
  dataset module);
* ``add_te``: embeddings of the grid times added to the LSTM hidden
  states before pooling, which requires the embedding dimension to equal
  the hidden size.

Classification heads end in a 2-way softmax, regression heads in a single
linear unit clamped at zero. The self-attentive pooling computes
A = rowsoftmax(Ws2 . tanh(Ws1 . H^T)) and penalizes the loss with
c * ||A A^T - I||_F^2 so the r attention rows stay diverse.

``forward`` accepts one episode (steps x features) or a batch
(batch x steps x features); ``loss`` and ``backward`` mirror that, with
batch losses averaged. Gradients are exact reverse-mode derivatives of
``loss``, verified against central finite differences in the test suite.
Parameters live in plain dicts of named float64 arrays; all functions
here treat them as immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write_bytes, make_rng
from .encoding import EncoderConfig, te_batch

FAMILIES = ("linreg", "logreg", "mlp", "lstm", "sa_lstm")
TE_MODES = ("none", "mask", "cat_te", "add_te")
TASKS = ("classification", "regression")

_FAMILY_ALIAS = {"linreg": "LinR", "logreg": "LogR", "mlp": "MLP", "lstm": "LSTM", "sa_lstm": "SA-LSTM"}
_MODE_PREFIX = {"none": "", "mask": "BM+", "cat_te": "catTE+", "add_te": "addTE+"}

PARAMS_FORMAT_VERSION = 1


class NumericError(ValueError):
    """A non-finite value appeared during a forward pass."""


@dataclass(frozen=True)
class AttentionSpec:
    """Structured self-attention sizes: d_a projection width, r attention
    rows, and the row-diversity penalty coefficient."""

    d_a: int = 32
    r: int = 8
    penalty_c: float = 1e-4

    def __post_init__(self) -> None:
        if self.d_a < 1 or self.r < 1:
            raise ValueError(f"d_a and r must be >= 1, got {self.d_a}, {self.r}")
        if self.penalty_c < 0:
            raise ValueError(f"penalty_c must be >= 0, got {self.penalty_c}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture family, sizes, input regime, and task."""

    family: str
    task: str
    hidden: int = 0
    head_widths: tuple[int, ...] = (32, 32, 16)
    mlp_widths: tuple[int, ...] = (64, 64, 32, 16)
    te_mode: str = "none"
    te_cfg: EncoderConfig | None = None
    attention: AttentionSpec | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.te_mode not in TE_MODES:
            raise ValueError(f"te_mode must be one of {TE_MODES}, got {self.te_mode!r}")
        recurrent = self.family in ("lstm", "sa_lstm")
        if recurrent and self.hidden < 1:
            raise ValueError(f"{self.family} needs hidden >= 1, got {self.hidden}")
        if not recurrent and self.hidden != 0:
            raise ValueError(f"{self.family} has no hidden state; leave hidden at 0")
        if (self.attention is not None) != (self.family == "sa_lstm"):
            raise ValueError("attention settings are required for sa_lstm and only for sa_lstm")
        if self.te_mode in ("cat_te", "add_te") and self.te_cfg is None:
            raise ValueError(f"te_mode {self.te_mode!r} needs a te_cfg")
        if self.te_mode in ("none", "mask") and self.te_cfg is not None:
            raise ValueError(f"te_mode {self.te_mode!r} takes no te_cfg")
        if self.te_mode == "add_te":
            if not recurrent:
                raise ValueError("add_te applies only to lstm and sa_lstm")
            if self.te_cfg.dim != self.hidden:
                raise ValueError(
                    f"add_te needs te dimension == hidden size, got {self.te_cfg.dim} != {self.hidden}"
                )
        if any(w < 1 for w in self.head_widths) or any(w < 1 for w in self.mlp_widths):
            raise ValueError("layer widths must be >= 1")

    @property
    def n_out(self) -> int:
        return 2 if self.task == "classification" else 1

    @property
    def recurrent(self) -> bool:
        return self.family in ("lstm", "sa_lstm")

    def to_dict(self) -> dict:
        d: dict = {
            "family": self.family,
            "task": self.task,
            "hidden": self.hidden,
            "head_widths": list(self.head_widths),
            "mlp_widths": list(self.mlp_widths),
            "te_mode": self.te_mode,
        }
        if self.te_cfg is not None:
            d["te_cfg"] = {
                "dim": self.te_cfg.dim,
                "max_time": self.te_cfg.max_time,
                "base_kind": self.te_cfg.base_kind,
            }
        if self.attention is not None:
            d["attention"] = {
                "d_a": self.attention.d_a,
                "r": self.attention.r,
                "penalty_c": self.attention.penalty_c,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {"family", "task", "hidden", "head_widths", "mlp_widths", "te_mode", "te_cfg", "attention"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model spec keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "head_widths" in kwargs:
            kwargs["head_widths"] = tuple(kwargs["head_widths"])
        if "mlp_widths" in kwargs:
            kwargs["mlp_widths"] = tuple(kwargs["mlp_widths"])
        if kwargs.get("te_cfg") is not None:
            kwargs["te_cfg"] = EncoderConfig(**kwargs["te_cfg"])
        if kwargs.get("attention") is not None:
            kwargs["attention"] = AttentionSpec(**kwargs["attention"])
        return cls(**kwargs)


def alias(spec: ModelSpec) -> str:
    """Short display name, e.g. catTE+LSTM or BM+LogR."""
    return _MODE_PREFIX[spec.te_mode] + _FAMILY_ALIAS[spec.family]


def model_input_width(spec: ModelSpec, steps: int, per_step_width: int) -> int:
    """The input_dim expected by init/count: per-step width for recurrent
    families, flattened width for the rest."""
    return per_step_width if spec.recurrent else steps * per_step_width


def _dense_layer_names(spec: ModelSpec) -> list[str]:
    if spec.family == "mlp":
        return [f"dense{i}" for i in range(len(spec.mlp_widths))]
    if spec.recurrent:
        return [f"head{i}" for i in range(len(spec.head_widths))]
    return []


def _dense_widths(spec: ModelSpec, input_dim: int) -> list[int]:
    """Widths along the dense chain, from its input to the output layer."""
    if spec.family in ("linreg", "logreg"):
        chain_in = input_dim
        hidden = []
    elif spec.family == "mlp":
        chain_in = input_dim
        hidden = list(spec.mlp_widths)
    elif spec.family == "lstm":
        chain_in = spec.hidden
        hidden = list(spec.head_widths)
    else:
        chain_in = spec.attention.r * spec.hidden
        hidden = list(spec.head_widths)
    return [chain_in] + hidden + [spec.n_out]


def init_params(spec: ModelSpec, input_dim: int, rng_seed) -> dict[str, np.ndarray]:
    """Deterministically initialize all tensors for (spec, input_dim).

    Every tensor is uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] with the
    fan-in of its layer; the LSTM forget-gate bias is then set to exactly
    1.0 so early training does not forget everything.
    """
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    entropy = [rng_seed] if isinstance(rng_seed, (int, np.integer)) else list(rng_seed)
    rng = make_rng(entropy)
    params: dict[str, np.ndarray] = {}

    def draw(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if spec.recurrent:
        h = spec.hidden
        params["lstm.Wx"] = draw((input_dim, 4 * h), input_dim)
        params["lstm.Wh"] = draw((h, 4 * h), h)
        params["lstm.b"] = draw((4 * h,), h)
        params["lstm.b"][h : 2 * h] = 1.0
        if spec.family == "sa_lstm":
            att = spec.attention
            params["attn.Ws1"] = draw((att.d_a, h), h)
            params["attn.Ws2"] = draw((att.r, att.d_a), att.d_a)

    widths = _dense_widths(spec, input_dim)
    names = _dense_layer_names(spec) + ["out"]
    for name, a, b in zip(names, widths[:-1], widths[1:]):
        params[f"{name}.W"] = draw((a, b), a)
        params[f"{name}.b"] = draw((b,), a)
    return params


def count_params(spec: ModelSpec, input_dim: int) -> int:
    """Closed-form parameter count; equals the total ParamSet size.

    ``input_dim`` is the flattened width for linreg/logreg/mlp and the
    per-step width for lstm/sa_lstm.
    """
    total = 0
    if spec.recurrent:
        h = spec.hidden
        total += 4 * (h * (input_dim + h) + h)
        if spec.family == "sa_lstm":
            att = spec.attention
            total += att.d_a * h + att.r * att.d_a
    widths = _dense_widths(spec, input_dim)
    total += sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    return total


def solve_hidden_for_budget(
    family: str,
    input_dim: int,
    budget: int,
    task: str = "classification",
    head_widths: tuple[int, ...] = (32, 32, 16),
    attention: AttentionSpec | None = None,
) -> int:
    """Largest hidden size whose parameter count fits the budget.

    Only the recurrent families have a hidden size to solve for. Because
    the count grows with input width, TE- or mask-widened inputs yield
    smaller hidden sizes under the same budget.
    """
    if family not in ("lstm", "sa_lstm"):
        raise ValueError(f"only lstm and sa_lstm have a hidden size, got {family!r}")
    if family == "sa_lstm" and attention is None:
        attention = AttentionSpec()

    def count(h: int) -> int:
        spec = ModelSpec(
            family=family, task=task, hidden=h, head_widths=head_widths,
            attention=attention if family == "sa_lstm" else None,
        )
        return count_params(spec, input_dim)

    if count(1) > budget:
        raise ValueError(f"budget {budget} is below the smallest {family} ({count(1)} params)")
    h = 1
    while count(h + 1) <= budget:
        h += 1
    return h


@dataclass
class ForwardTrace:
    """Activations cached by forward for the exact backward pass."""

    spec: ModelSpec
    single: bool
    x: np.ndarray
    flat: np.ndarray | None = None
    gates_i: np.ndarray | None = None
    gates_f: np.ndarray | None = None
    gates_g: np.ndarray | None = None
    gates_o: np.ndarray | None = None
    cells: np.ndarray | None = None
    tanh_cells: np.ndarray | None = None
    H: np.ndarray | None = None
    Hp: np.ndarray | None = None
    U: np.ndarray | None = None
    A: np.ndarray | None = None
    Mmat: np.ndarray | None = None
    feed: np.ndarray | None = None
    dense_inputs: list[np.ndarray] = field(default_factory=list)
    dense_pre: list[np.ndarray] = field(default_factory=list)
    z_out: np.ndarray | None = None
    logp: np.ndarray | None = None
    probs: np.ndarray | None = None
    yhat: np.ndarray | None = None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite activation in layer {layer!r}")


def _lstm_forward(params: dict, x: np.ndarray, trace: ForwardTrace) -> np.ndarray:
    B, T, _ = x.shape
    Wx, Wh, b = params["lstm.Wx"], params["lstm.Wh"], params["lstm.b"]
    h_size = Wh.shape[0]
    shape = (B, T, h_size)
    I = np.empty(shape)
    F = np.empty(shape)
    G = np.empty(shape)
    O = np.empty(shape)
    C = np.empty(shape)
    TanhC = np.empty(shape)
    H = np.empty(shape)
    h = np.zeros((B, h_size))
    c = np.zeros((B, h_size))
    for t in range(T):
        gates = x[:, t] @ Wx + h @ Wh + b
        i = _sigmoid(gates[:, :h_size])
        f = _sigmoid(gates[:, h_size : 2 * h_size])
        g = np.tanh(gates[:, 2 * h_size : 3 * h_size])
        o = _sigmoid(gates[:, 3 * h_size :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        I[:, t], F[:, t], G[:, t], O[:, t] = i, f, g, o
        C[:, t], TanhC[:, t], H[:, t] = c, tc, h
    trace.gates_i, trace.gates_f, trace.gates_g, trace.gates_o = I, F, G, O
    trace.cells, trace.tanh_cells, trace.H = C, TanhC, H
    _check_finite(H, "lstm")
    return H


def _lstm_backward(params: dict, trace: ForwardTrace, dH: np.ndarray, grads: dict) -> None:
    x = trace.x
    B, T, _ = x.shape
    Wx, Wh = params["lstm.Wx"], params["lstm.Wh"]
    I, F, G, O = trace.gates_i, trace.gates_f, trace.gates_g, trace.gates_o
    C, TanhC, H = trace.cells, trace.tanh_cells, trace.H
    h_size = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * h_size)
    dh_next = np.zeros((B, h_size))
    dc_next = np.zeros((B, h_size))
    for t in range(T - 1, -1, -1):
        dh = dH[:, t] + dh_next
        do = dh * TanhC[:, t]
        dc = dc_next + dh * O[:, t] * (1.0 - TanhC[:, t] ** 2)
        c_prev = C[:, t - 1] if t > 0 else np.zeros((B, h_size))
        h_prev = H[:, t - 1] if t > 0 else np.zeros((B, h_size))
        di = dc * G[:, t]
        df = dc * c_prev
        dg = dc * I[:, t]
        dgates = np.concatenate(
            [
                di * I[:, t] * (1.0 - I[:, t]),
                df * F[:, t] * (1.0 - F[:, t]),
                dg * (1.0 - G[:, t] ** 2),
                do * O[:, t] * (1.0 - O[:, t]),
            ],
            axis=1,
        )
        dWx += x[:, t].T @ dgates
        dWh += h_prev.T @ dgates
        db += dgates.sum(axis=0)
        dh_next = dgates @ Wh.T
        dc_next = dc * F[:, t]
    grads["lstm.Wx"] = dWx
    grads["lstm.Wh"] = dWh
    grads["lstm.b"] = db


def _dense_forward(spec: ModelSpec, params: dict, feed: np.ndarray, trace: ForwardTrace) -> np.ndarray:
    a = feed
    names = _dense_layer_names(spec) + ["out"]
    for idx, name in enumerate(names):
        z = a @ params[f"{name}.W"] + params[f"{name}.b"]
        trace.dense_inputs.append(a)
        trace.dense_pre.append(z)
        a = z if idx == len(names) - 1 else np.maximum(z, 0.0)
    return a


def _dense_backward(spec: ModelSpec, params: dict, trace: ForwardTrace, dz_out: np.ndarray,
                    grads: dict) -> np.ndarray:
    names = _dense_layer_names(spec) + ["out"]
    dz = dz_out
    for idx in range(len(names) - 1, -1, -1):
        name = names[idx]
        a_in = trace.dense_inputs[idx]
        grads[f"{name}.W"] = a_in.T @ dz
        grads[f"{name}.b"] = dz.sum(axis=0)
        da = dz @ params[f"{name}.W"].T
        if idx > 0:
            dz = da * (trace.dense_pre[idx - 1] > 0)
        else:
            dz = da
    return dz


def forward(spec: ModelSpec, params: dict, features, grid_times=None):
    """Run the model; returns (output, trace).

    Output is class probabilities (classification) or a non-negative
    prediction (regression). ``features`` may be (steps, width) for one
    episode or (batch, steps, width); ``grid_times`` is required only in
    add_te mode, where the embedded grid is added to the hidden states.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"features must be (steps, width) or (batch, steps, width), got {x.shape}")
    _check_finite(x, "input")
    trace = ForwardTrace(spec=spec, single=single, x=x)
    B, T, width = x.shape

    if spec.recurrent:
        H = _lstm_forward(params, x, trace)
        if spec.te_mode == "add_te":
            if grid_times is None:
                raise ValueError("add_te mode needs grid_times")
            te_mat = te_batch(np.asarray(grid_times, dtype=np.float64), spec.te_cfg)
            if te_mat.shape[0] != T:
                raise ValueError(f"grid_times has {te_mat.shape[0]} steps, features have {T}")
            Hp = H + te_mat[None, :, :]
        else:
            Hp = H
        trace.Hp = Hp
        if spec.family == "lstm":
            feed = Hp[:, -1]
        else:
            Ws1, Ws2 = params["attn.Ws1"], params["attn.Ws2"]
            U = np.tanh(Hp @ Ws1.T)
            scores = (U @ Ws2.T).transpose(0, 2, 1)
            _check_finite(scores, "attention")
            scores = scores - scores.max(axis=2, keepdims=True)
            expd = np.exp(scores)
            A = expd / expd.sum(axis=2, keepdims=True)
            Mmat = A @ Hp
            trace.U, trace.A, trace.Mmat = U, A, Mmat
            feed = Mmat.reshape(B, -1)
    else:
        feed = x.reshape(B, T * width)
        trace.flat = feed
    trace.feed = feed

    z = _dense_forward(spec, params, feed, trace)
    _check_finite(z, "output")
    trace.z_out = z
    if spec.task == "classification":
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        trace.logp = shifted - logsum
        trace.probs = np.exp(trace.logp)
        out = trace.probs
    else:
        trace.yhat = np.maximum(z[:, 0], 0.0)
        out = trace.yhat
    return (out[0] if single else out), trace


def _as_target_array(spec: ModelSpec, target, batch: int) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64).ravel()
    if t.shape[0] != batch:
        raise ValueError(f"{batch} outputs but {t.shape[0]} targets")
    if spec.task == "classification":
        if not np.isin(t, (0.0, 1.0)).all():
            raise ValueError("classification targets must be class indices 0 or 1")
    elif not np.isfinite(t).all():
        raise ValueError("regression targets must be finite")
    return t


def attention_penalty(A: np.ndarray, c: float) -> np.ndarray:
    """Per-example c * ||A A^T - I||_F^2 for A of shape (batch, r, steps)."""
    r = A.shape[1]
    G = A @ A.transpose(0, 2, 1) - np.eye(r)
    return c * (G ** 2).sum(axis=(1, 2))


def loss(spec: ModelSpec, output, target, trace: ForwardTrace) -> float:
    """Mean objective over the batch: cross-entropy or squared error, plus
    the attention diversity penalty for sa_lstm."""
    if trace.spec is not spec and trace.spec != spec:
        raise ValueError("trace was produced by a different model spec")
    B = trace.x.shape[0]
    t = _as_target_array(spec, target, B)
    if spec.task == "classification":
        task_loss = -trace.logp[np.arange(B), t.astype(np.int64)].mean()
    else:
        task_loss = ((trace.yhat - t) ** 2).mean()
    total = float(task_loss)
    if spec.family == "sa_lstm":
        total += float(attention_penalty(trace.A, spec.attention.penalty_c).mean())
    return total


def backward(spec: ModelSpec, params: dict, trace: ForwardTrace, target, scale: float = 1.0) -> dict:
    """Exact gradients of ``scale * loss`` with respect to every parameter."""
    if trace.spec is not spec and trace.spec != spec:
        raise ValueError("trace was produced by a different model spec")
    B = trace.x.shape[0]
    t = _as_target_array(spec, target, B)
    grads: dict[str, np.ndarray] = {}

    if spec.task == "classification":
        dz = trace.probs.copy()
        dz[np.arange(B), t.astype(np.int64)] -= 1.0
        dz *= scale / B
    else:
        dyhat = 2.0 * (trace.yhat - t) * scale / B
        dz = (dyhat * (trace.z_out[:, 0] > 0))[:, None]

    dfeed = _dense_backward(spec, params, trace, dz, grads)

    if not spec.recurrent:
        return grads

    if spec.family == "lstm":
        dHp = np.zeros_like(trace.Hp)
        dHp[:, -1] = dfeed
    else:
        att = spec.attention
        Hp, U, A = trace.Hp, trace.U, trace.A
        dM = dfeed.reshape(B, att.r, spec.hidden)
        dA = dM @ Hp.transpose(0, 2, 1)
        dHp = A.transpose(0, 2, 1) @ dM
        if att.penalty_c != 0.0:
            G = A @ A.transpose(0, 2, 1) - np.eye(att.r)
            dA += (4.0 * att.penalty_c * scale / B) * (G @ A)
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True))
        dS_bta = dS.transpose(0, 2, 1)
        grads["attn.Ws2"] = np.einsum("btr,bta->ra", dS_bta, U)
        dU = dS_bta @ params["attn.Ws2"]
        dpre = dU * (1.0 - U ** 2)
        grads["attn.Ws1"] = np.einsum("bta,bth->ah", dpre, Hp)
        dHp += dpre @ params["attn.Ws1"]

    _lstm_backward(params, trace, dHp, grads)
    return grads


def zeros_like_params(params: dict) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def clone_params(params: dict) -> dict:
    return {name: arr.copy() for name, arr in params.items()}


def save_params(path: str, params: dict, spec: ModelSpec | None = None) -> None:
    """Serialize named tensors plus a JSON shape manifest; bit-exact round-trip."""
    import io

    meta = {
        "format_version": PARAMS_FORMAT_VERSION,
        "tensors": {name: list(arr.shape) for name, arr in sorted(params.items())},
    }
    if spec is not None:
        meta["model_spec"] = spec.to_dict()
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params)
    atomic_write_bytes(path, buf.getvalue())


def load_params(path: str) -> tuple[dict, dict]:
    """Inverse of save_params; validates shapes against the manifest."""
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"][()]))
        if meta.get("format_version") != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported params container version {meta.get('format_version')!r}")
        params = {name: data[name] for name in data.files if name != "__meta__"}
    for name, shape in meta["tensors"].items():
        if name not in params:
            raise ValueError(f"container missing tensor {name!r} declared in manifest")
        if list(params[name].shape) != shape:
            raise ValueError(f"tensor {name!r} has shape {params[name].shape}, manifest says {shape}")
    extra = set(params) - set(meta["tensors"])
    if extra:
        raise ValueError(f"container has undeclared tensors: {sorted(extra)}")
    return params, meta
