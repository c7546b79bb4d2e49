"""LSTM-FCN family: the FCN branch, five interchangeable recurrent/dense
branches, additive attention, and the conjoined softmax classifier.

Input batches are laid out ``B x V x S`` (variables x time steps); a raw
univariate batch is ``B x 1 x T``.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ContractError, DimensionError, ParameterError
from .tensor import ParamSet, Rng, RunningStats, Tensor


class BranchKind(str, enum.Enum):
    LSTM = "LSTM"
    ALSTM = "ALSTM"
    GRU = "GRU"
    RNN = "RNN"
    DENSE = "DENSE"

    @classmethod
    def parse(cls, value) -> "BranchKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ParameterError(f"unknown branch kind {value!r}; expected one of {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class FcnConfig:
    filters: tuple = (128, 256, 128)
    kernels: tuple = (8, 5, 3)

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.filters) != 3 or len(self.kernels) != 3:
            raise ParameterError("FcnConfig needs exactly 3 filter counts and 3 kernel durations")
        if min(self.filters + self.kernels) < 1:
            raise ParameterError("FcnConfig entries must be >= 1")

    @property
    def width(self) -> int:
        return self.filters[-1]


@dataclass(frozen=True)
class ModelConfig:
    branch: BranchKind = BranchKind.LSTM
    cells: int = 8
    dimension_shuffle: bool = True
    dropout_p: float = 0.8
    fcn: FcnConfig = field(default_factory=FcnConfig)
    num_classes: int = 2
    input_length: int = 1

    def __post_init__(self):
        object.__setattr__(self, "branch", BranchKind.parse(self.branch))
        if isinstance(self.fcn, dict):
            object.__setattr__(self, "fcn", FcnConfig(**self.fcn))
        if self.cells < 1:
            raise ParameterError(f"cells must be >= 1, got {self.cells}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_length < 1:
            raise ParameterError(f"input_length must be >= 1, got {self.input_length}")

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        return ModelConfig.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch"] = self.branch.value
        d["fcn"] = {"filters": list(self.fcn.filters), "kernels": list(self.fcn.kernels)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "fcn" in d and not isinstance(d["fcn"], FcnConfig):
            d["fcn"] = FcnConfig(**d["fcn"])
        return cls(**d)

    @property
    def branch_steps(self) -> int:
        """Time steps the recurrent branch executes for this input length."""
        if self.branch is BranchKind.DENSE or self.dimension_shuffle:
            return 1
        return self.input_length

    @property
    def branch_inputs(self) -> int:
        """Variables per branch time step."""
        return self.input_length if self.dimension_shuffle or self.branch is BranchKind.DENSE else 1


@dataclass
class BranchState:
    h: Tensor
    m: Tensor | None = None

    @classmethod
    def zeros(cls, batch: int, cells: int, dtype=np.float64, memory: bool = True) -> "BranchState":
        h = Tensor(np.zeros((batch, cells), dtype=dtype))
        return cls(h, Tensor(np.zeros((batch, cells), dtype=dtype)) if memory else None)


# -- recurrent cells -------------------------------------------------------------

def _gates(x_t: Tensor, h: Tensor, params, n: int):
    z = tc.matmul(x_t, params["I"]) + tc.matmul(h, params["W"])
    width = z.shape[-1] // n
    return [z[..., k * width:(k + 1) * width] for k in range(n)]


def lstm_step(x_t: Tensor, state: BranchState, params) -> BranchState:
    """One LSTM step; gates ordered (update, forget, output, candidate).

    ``h_t = tanh(g_o * m_t)`` exactly, i.e. the output gate acts inside the tanh.
    ``params["W"]`` is ``cells x 4 cells``, ``params["I"]`` is ``inputs x 4 cells``.
    """
    _check_step(x_t, state.h, params, 4)
    zu, zf, zo, zc = _gates(x_t, state.h, params, 4)
    g_u, g_f, g_o = tc.sigmoid(zu), tc.sigmoid(zf), tc.sigmoid(zo)
    g_c = tc.tanh(zc)
    m = g_f * state.m + g_u * g_c
    h = tc.tanh(g_o * m)
    return BranchState(h, m)


def gru_step(x_t: Tensor, h: Tensor, params) -> Tensor:
    """Update/reset/candidate GRU step with ``h' = (1 - z) * h + z * h_cand``."""
    _check_step(x_t, h, params, 3)
    cells = h.shape[-1]
    xi = tc.matmul(x_t, params["I"])
    hw = tc.matmul(h, params["W"][:, :2 * cells])
    z = tc.sigmoid(xi[..., :cells] + hw[..., :cells])
    r = tc.sigmoid(xi[..., cells:2 * cells] + hw[..., cells:])
    cand = tc.tanh(xi[..., 2 * cells:] + tc.matmul(r * h, params["W"][:, 2 * cells:]))
    return (1.0 - z) * h + z * cand


def rnn_step(x_t: Tensor, h: Tensor, params) -> Tensor:
    """Elman step ``h' = tanh(W h + I x)``."""
    _check_step(x_t, h, params, 1)
    return tc.tanh(tc.matmul(h, params["W"]) + tc.matmul(x_t, params["I"]))


def dense_branch(x: Tensor, params) -> Tensor:
    """Sigmoid dense block ``sigmoid(W x + b)``."""
    return tc.sigmoid(tc.matmul(x, params["W"]) + params["b"])


def _check_step(x_t, h, params, n_gates):
    cells = h.shape[-1]
    if params["W"].shape != (cells, n_gates * cells):
        raise DimensionError(f"recurrent weight shape {params['W'].shape} does not match {cells} cells")
    if params["I"].shape != (x_t.shape[-1], n_gates * cells):
        raise DimensionError(f"projection shape {params['I'].shape} does not match input width {x_t.shape[-1]}")


# -- attention -------------------------------------------------------------------

def alignment_scores(annotations: Tensor, prev_state: Tensor, params) -> Tensor:
    """Feed-forward alignment ``e_j = v . tanh(Wq s + Wk h_j + b)``; returns ``B x T_x``."""
    batch, steps, cells = annotations.shape
    keys = tc.matmul(annotations, params["Wk"])
    query = tc.matmul(prev_state, params["Wq"]).reshape(batch, 1, -1)
    hidden = tc.tanh(keys + query + params["b"])
    return tc.matmul(hidden, params["v"]).reshape(batch, steps)


def attend(scores: Tensor, annotations: Tensor) -> Tensor:
    """Softmax the scores over annotations and return the weighted sum (``B x cells``)."""
    batch, steps, _ = annotations.shape
    alpha = tc.softmax(scores, axis=1).reshape(batch, steps, 1)
    return (alpha * annotations).sum(axis=1)


def attention_context(annotations: Tensor, prev_state: Tensor, params) -> Tensor:
    """Context vector over ``T_x x cells`` annotations (or ``B x T_x x cells``)."""
    annotations, prev_state = tc.as_tensor(annotations), tc.as_tensor(prev_state)
    single = annotations.ndim == 2
    if single:
        annotations = annotations.reshape(1, *annotations.shape)
        prev_state = prev_state.reshape(1, -1)
    if annotations.shape[1] < 1:
        raise DimensionError("attention needs at least one annotation")
    ctx = attend(alignment_scores(annotations, prev_state, params), annotations)
    return ctx.reshape(-1) if single else ctx


# -- fully convolutional branch --------------------------------------------------

def fcn_forward(x: Tensor, cfg: FcnConfig, params, bn_states, mode: str = "infer",
                capture: dict | None = None) -> Tensor:
    """Three conv -> batch-norm -> ReLU blocks followed by global average pooling."""
    x = tc.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] < 1:
        raise DimensionError(f"fcn_forward expects B x C x T with T >= 1, got {x.shape}")
    h = x
    for i in range(3):
        conv = tc.conv1d_same(h, params[f"fcn.conv{i}.w"])
        normed = tc.batch_norm(conv, params[f"fcn.bn{i}.gamma"], params[f"fcn.bn{i}.beta"], bn_states[i], mode)
        h = tc.relu(normed)
        if capture is not None:
            capture[i] = {"conv": conv.data, "bn": normed.data, "relu": h.data}
    return tc.global_average_pool(h)


# -- full model ------------------------------------------------------------------

def _uniform(rng: Rng, fan_in: int, shape, dtype):
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, shape).astype(dtype)


def init_params(cfg: ModelConfig, rng: Rng, dtype=np.float64) -> tuple[ParamSet, list]:
    """He-uniform convolution kernels; fan-in uniform recurrent/affine weights."""
    p = ParamSet()
    c_in = 1
    for i, (filters, d) in enumerate(zip(cfg.fcn.filters, cfg.fcn.kernels)):
        limit = np.sqrt(6.0 / (d * c_in))
        p[f"fcn.conv{i}.w"] = Tensor(rng.uniform(-limit, limit, (filters, d, c_in)).astype(dtype), True)
        p[f"fcn.bn{i}.gamma"] = Tensor(np.ones(filters, dtype=dtype), True)
        p[f"fcn.bn{i}.beta"] = Tensor(np.zeros(filters, dtype=dtype), True)
        c_in = filters
    bn = [RunningStats.init(f, dtype) for f in cfg.fcn.filters]

    cells, inputs = cfg.cells, cfg.branch_inputs
    gates = {BranchKind.LSTM: 4, BranchKind.ALSTM: 4, BranchKind.GRU: 3, BranchKind.RNN: 1}
    if cfg.branch is BranchKind.DENSE:
        p["branch.W"] = Tensor(_uniform(rng, inputs, (inputs, cells), dtype), True)
        p["branch.b"] = Tensor(np.zeros(cells, dtype=dtype), True)
    else:
        n = gates[cfg.branch]
        p["branch.I"] = Tensor(_uniform(rng, inputs, (inputs, n * cells), dtype), True)
        p["branch.W"] = Tensor(_uniform(rng, cells, (cells, n * cells), dtype), True)
    if cfg.branch is BranchKind.ALSTM:
        p["attn.Wq"] = Tensor(_uniform(rng, cells, (cells, cells), dtype), True)
        p["attn.Wk"] = Tensor(_uniform(rng, cells, (cells, cells), dtype), True)
        p["attn.b"] = Tensor(np.zeros(cells, dtype=dtype), True)
        p["attn.v"] = Tensor(_uniform(rng, cells, (cells, 1), dtype), True)

    width = cells + cfg.fcn.width
    p["head.W"] = Tensor(_uniform(rng, width, (width, cfg.num_classes), dtype), True)
    p["head.b"] = Tensor(np.zeros(cfg.num_classes, dtype=dtype), True)
    return p, bn


def _sub(params: ParamSet, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


class LSTMFCN:
    """A conjoined recurrent + fully convolutional classifier.

    Holds the configuration, trainable parameters and batch-norm running
    statistics. ``last_branch_steps`` records how many recurrent steps the
    most recent forward pass executed.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng | None = None, dtype=np.float64,
                 params: ParamSet | None = None, bn_states: list | None = None):
        self.cfg = cfg
        if params is None:
            params, bn_states = init_params(cfg, rng or Rng(0), dtype)
        self.params = params
        self.bn_states = bn_states if bn_states is not None else [
            RunningStats.init(f, dtype) for f in cfg.fcn.filters]
        self.dtype = np.dtype(dtype)
        self.last_branch_steps = 0

    # -- paths --
    def _as_input(self, x) -> Tensor:
        x = tc.as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)) \
            if not (isinstance(x, Tensor) and x.dtype == self.dtype) else x
        if x.ndim == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        if x.ndim != 3 or x.shape[1] != 1:
            raise DimensionError(f"model input must be B x 1 x T, got {x.shape}")
        if x.shape[2] != self.cfg.input_length:
            raise ContractError(f"input length {x.shape[2]} != configured {self.cfg.input_length}")
        return x

    def branch_forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        seq = tc.dimension_shuffle(x) if cfg.dimension_shuffle else x
        batch = seq.shape[0]
        if cfg.branch is BranchKind.DENSE:
            self.last_branch_steps = 1
            return dense_branch(seq.reshape(batch, -1), _sub(self.params, "branch."))
        steps_first = tc.transpose(seq, (0, 2, 1))          # B x S x V
        n_steps = steps_first.shape[1]
        bp = _sub(self.params, "branch.")
        if cfg.branch in (BranchKind.LSTM, BranchKind.ALSTM):
            state = BranchState.zeros(batch, cfg.cells, self.dtype)
        else:
            h = Tensor(np.zeros((batch, cfg.cells), dtype=self.dtype))
        hidden = []
        for t in range(n_steps):
            x_t = steps_first[:, t, :]
            if cfg.branch in (BranchKind.LSTM, BranchKind.ALSTM):
                state = lstm_step(x_t, state, bp)
                h = state.h
            elif cfg.branch is BranchKind.GRU:
                h = gru_step(x_t, h, bp)
            else:
                h = rnn_step(x_t, h, bp)
            if cfg.branch is BranchKind.ALSTM:
                hidden.append(h.reshape(batch, 1, cfg.cells))
        self.last_branch_steps = n_steps
        if cfg.branch is BranchKind.ALSTM:
            annotations = hidden[0] if n_steps == 1 else tc.concat(hidden, axis=1)
            return attention_context(annotations, h, _sub(self.params, "attn."))
        return h

    def fcn_forward(self, x: Tensor, mode: str, capture: dict | None = None) -> Tensor:
        return fcn_forward(x, self.cfg.fcn, self.params, self.bn_states, mode, capture)

    def logits(self, x, mode: str = "infer", rng: Rng | None = None) -> Tensor:
        x = self._as_input(x)
        branch = tc.dropout(self.branch_forward(x), self.cfg.dropout_p, mode, rng)
        feats = tc.concat([branch, self.fcn_forward(x, mode)], axis=1)
        return tc.matmul(feats, self.params["head.W"]) + self.params["head.b"]

    def forward(self, x, mode: str = "infer", rng: Rng | None = None) -> Tensor:
        """Class probabilities ``B x num_classes``."""
        return tc.softmax(self.logits(x, mode, rng), axis=1)

    __call__ = forward

    def loss(self, x, labels, class_weight=None, mode: str = "train", rng: Rng | None = None) -> Tensor:
        return weighted_cross_entropy(self.logits(x, mode, rng), labels, class_weight)

    def features(self, x, which: str = "concat") -> Tensor:
        """Pre-classifier activations of the ``branch``, ``fcn`` or ``concat`` path (no dropout)."""
        if which not in ("branch", "fcn", "concat"):
            raise ParameterError(f"unknown feature selector {which!r}; expected branch, fcn or concat")
        x = self._as_input(x)
        if which == "fcn":
            return self.fcn_forward(x, "infer")
        if which == "branch":
            return self.branch_forward(x)
        return tc.concat([self.branch_forward(x), self.fcn_forward(x, "infer")], axis=1)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        out = [self.logits(x[i:i + batch_size], "infer").data.argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    # -- state --
    def state_dict(self) -> dict:
        arrays = self.params.snapshot()
        for i, s in enumerate(self.bn_states):
            arrays[f"fcn.bn{i}.running_mean"] = s.mean.copy()
            arrays[f"fcn.bn{i}.running_var"] = s.var.copy()
        return arrays

    def load_state_dict(self, arrays: dict):
        expected = set(self.params) | {f"fcn.bn{i}.running_{s}" for i in range(3) for s in ("mean", "var")}
        if set(arrays) != expected:
            raise ContractError(f"parameter keys differ from configuration: "
                                f"missing {sorted(expected - set(arrays))}, extra {sorted(set(arrays) - expected)}")
        for k, v in arrays.items():
            if k.endswith("running_mean") or k.endswith("running_var"):
                continue
            if tuple(np.shape(v)) != self.params[k].shape:
                raise ContractError(f"parameter {k} has shape {np.shape(v)}, expected {self.params[k].shape}")
        self.params.load({k: v for k, v in arrays.items() if "running_" not in k})
        for i, s in enumerate(self.bn_states):
            s.mean = np.array(arrays[f"fcn.bn{i}.running_mean"], dtype=self.dtype)
            s.var = np.array(arrays[f"fcn.bn{i}.running_var"], dtype=self.dtype)


def model_forward(x, model: LSTMFCN, mode: str = "infer", rng: Rng | None = None) -> Tensor:
    return model.forward(x, mode, rng)


def extract_features(x, model: LSTMFCN, which: str) -> Tensor:
    return model.features(x, which)


def weighted_cross_entropy(logits: Tensor, labels, class_weight=None) -> Tensor:
    """Mean over the batch of ``w[y] * -log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=int)
    batch, classes = logits.shape
    weights = np.ones(classes) if class_weight is None else np.asarray(class_weight, dtype=float)
    pick = np.zeros((batch, classes), dtype=logits.dtype)
    pick[np.arange(batch), labels] = weights[labels]
    return -(tc.log_softmax(logits, axis=1) * pick).sum() * (1.0 / batch)
