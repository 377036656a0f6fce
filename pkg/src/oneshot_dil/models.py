"""Model builders: MLP and small CNN, each hidden block carrying one BN layer."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batchnorm import BatchNormState, StatsMode, StatsTrace, bn_forward


@dataclass
class ModelSpec:
    kind: str = "small_cnn"             # "mlp" | "small_cnn"
    widths: tuple[int, ...] = (8, 16, 32)  # hidden widths (mlp) / conv channels (cnn)
    num_classes: int = 9
    input_shape: tuple[int, ...] = (1, 28, 28)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.kind not in ("mlp", "small_cnn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty list of positive ints")
        if self.kind == "small_cnn" and len(self.input_shape) != 3:
            raise ValueError("small_cnn needs input_shape (C, H, W)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    bn: list[BatchNormState]
    mode: StatsMode = StatsMode.UPDATED_STATS
    trace: StatsTrace | None = field(default=None, repr=False)
    forward_count: int = 0

    @property
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_mode(self, mode: StatsMode | str) -> None:
        self.mode = StatsMode.parse(mode)

    def copy(self) -> "Model":
        """Independent deep copy (parameters, BN statistics); no trace."""
        params = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()}
        bn = []
        for i, st in enumerate(self.bn):
            bn.append(BatchNormState(params[f"bn{i}.gamma"], params[f"bn{i}.beta"],
                                     st.running_mean.copy(), st.running_var.copy(),
                                     st.momentum, st.eps))
        return Model(copy.deepcopy(self.spec), params, bn, self.mode)

    def running_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.bn):
            out[f"bn{i}.running_mean"] = st.running_mean
            out[f"bn{i}.running_var"] = st.running_var
        return out

    def _bn(self, i: int, h: Tensor, mode: StatsMode) -> Tensor:
        y, self.bn[i] = bn_forward(h, self.bn[i], mode)
        return y

    def forward(self, x, mode: StatsMode | str | None = None) -> Tensor:
        """Logits for a batch ``x`` of shape ``(N, *input_shape)``."""
        mode = self.mode if mode is None else StatsMode.parse(mode)
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=ad.DTYPE)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"input: expected (N, {self.spec.input_shape}), got {x.shape}")
        ad.check_finite(x, "input batch")
        if mode is StatsMode.INFERENCE:
            with ad.no_grad():
                return self._forward(Tensor(x), mode)
        out = self._forward(Tensor(x), mode)
        if not ad.is_grad_enabled():
            return out
        self.forward_count += 1
        if self.trace is not None:
            self.trace.record(self.forward_count, self.bn)
        return out

    def _forward(self, h: Tensor, mode: StatsMode) -> Tensor:
        p = self.params
        if self.spec.kind == "mlp":
            h = ad.flatten(h)
            for i in range(len(self.spec.widths)):
                h = ad.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
                h = ad.relu(self._bn(i, h, mode))
        else:
            for i in range(len(self.spec.widths)):
                h = ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)
                h = ad.maxpool2x2(ad.relu(self._bn(i, h, mode)))
            h = ad.global_avg_pool(h)
        return ad.linear(h, p["head.weight"], p["head.bias"])


def build(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """He-initialized weights, zero biases, gamma=1, beta=0, mu=0, var=1."""
    params: dict[str, Tensor] = {}
    bn: list[BatchNormState] = []

    def add(name, value):
        params[name] = Tensor(value, requires_grad=True, name=name)

    fan = int(np.prod(spec.input_shape)) if spec.kind == "mlp" else spec.input_shape[0]
    for i, width in enumerate(spec.widths):
        if spec.kind == "mlp":
            add(f"fc{i}.weight", rng.normal(0.0, np.sqrt(2.0 / fan), (width, fan)))
            add(f"fc{i}.bias", np.zeros(width))
        else:
            add(f"conv{i}.weight", rng.normal(0.0, np.sqrt(2.0 / (fan * 9)), (width, fan, 3, 3)))
            add(f"conv{i}.bias", np.zeros(width))
        st = BatchNormState.init(width, f"bn{i}", spec.bn_momentum, spec.bn_eps)
        params[f"bn{i}.gamma"], params[f"bn{i}.beta"] = st.gamma, st.beta
        bn.append(st)
        fan = width
    add("head.weight", rng.normal(0.0, np.sqrt(2.0 / fan), (spec.num_classes, fan)))
    add("head.bias", np.zeros(spec.num_classes))
    return Model(spec, params, bn)


def loss_ce(model: Model, x, y, mode: StatsMode | str | None = None) -> Tensor:
    """Mean softmax cross-entropy of the model on ``(x, y)``; labels 0-based."""
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= model.spec.num_classes):
        raise ValueError(f"label out of range [0, {model.spec.num_classes})")
    return ad.softmax_cross_entropy(model.forward(x, mode), y)


def predict(model: Model, x, mode: StatsMode | str = StatsMode.INFERENCE,
            batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties to the smallest index) and softmax probabilities."""
    x = np.asarray(x, dtype=ad.DTYPE)
    mode = StatsMode.parse(mode)
    if mode is StatsMode.UPDATED_STATS:
        probs = ad.softmax(model.forward(x, mode).data)
    else:
        chunks = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                chunks.append(ad.softmax(model.forward(x[i:i + batch_size], mode).data))
        probs = np.concatenate(chunks) if chunks else np.zeros((0, model.spec.num_classes))
    return probs.argmax(axis=1), probs
