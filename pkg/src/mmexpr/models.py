"""Model components: fusion affine, temporal encoders, classification head.

The fusion layer concatenates the per-frame visual and audio vectors and maps
them to d_model with one affine (no activation). Temporal encoding is either
an LSTM that carries its final (hidden, cell) state across consecutive
segments of a video, or a per-segment transformer encoder that treats
segments independently. A two-hidden-layer ReLU head produces 8-way logits;
its dropout is what differentiates the two RDrop passes on the LSTM path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Graph, Tensor

NUM_CLASSES = 8


@dataclass
class LstmSettings:
    hidden: int = 256
    layers: int = 1


@dataclass
class TransformerSettings:
    layers: int = 4
    heads: int = 4
    dropout: float = 0.3
    ffn_dim: int = 2048
    positional_encoding: bool = True


@dataclass
class ModelConfig:
    """Resolved model architecture; defaults follow the reference training setup."""

    encoder: str = "lstm"
    d_model: int = 1024
    lstm: LstmSettings = field(default_factory=LstmSettings)
    transformer: TransformerSettings = field(default_factory=TransformerSettings)
    head: tuple = (512, 256)
    classes: int = NUM_CLASSES
    seg_len: int = 128
    stride: int = 128
    head_dropout: float = 0.3

    def validate(self):
        if self.encoder not in ("lstm", "transformer"):
            raise ValueError(f"encoder must be 'lstm' or 'transformer', got {self.encoder!r}")
        if not 1 <= self.stride <= self.seg_len:
            raise ValueError(f"stride {self.stride} must be in [1, segment length {self.seg_len}]")
        if self.encoder == "lstm" and self.stride != self.seg_len:
            raise ValueError("the LSTM encoder requires stride == segment length "
                             "(adjacent segments must not overlap)")
        if self.encoder == "transformer" and self.d_model % self.transformer.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"{self.transformer.heads} attention heads")
        return self

    def to_json(self) -> dict:
        return {
            "encoder": self.encoder,
            "d_model": self.d_model,
            "lstm": {"hidden": self.lstm.hidden, "layers": self.lstm.layers},
            "transformer": {
                "layers": self.transformer.layers,
                "heads": self.transformer.heads,
                "dropout": self.transformer.dropout,
                "ffn_dim": self.transformer.ffn_dim,
                "positional_encoding": self.transformer.positional_encoding,
            },
            "head": list(self.head),
            "classes": self.classes,
            "segment": {"l": self.seg_len, "p": self.stride},
            "head_dropout": self.head_dropout,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        cfg = cls()
        cfg.encoder = doc.get("encoder", cfg.encoder)
        cfg.d_model = int(doc.get("d_model", cfg.d_model))
        lstm = doc.get("lstm", {})
        cfg.lstm = LstmSettings(hidden=int(lstm.get("hidden", 256)),
                                layers=int(lstm.get("layers", 1)))
        trm = doc.get("transformer", {})
        cfg.transformer = TransformerSettings(
            layers=int(trm.get("layers", 4)),
            heads=int(trm.get("heads", 4)),
            dropout=float(trm.get("dropout", 0.3)),
            ffn_dim=int(trm.get("ffn_dim", 2048)),
            positional_encoding=bool(trm.get("positional_encoding", True)),
        )
        cfg.head = tuple(int(h) for h in doc.get("head", [512, 256]))
        cfg.classes = int(doc.get("classes", NUM_CLASSES))
        seg = doc.get("segment", {})
        cfg.seg_len = int(seg.get("l", 128))
        cfg.stride = int(seg.get("p", cfg.seg_len))
        cfg.head_dropout = float(doc.get("head_dropout", 0.3))
        return cfg.validate()


def xavier(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out)).astype(DTYPE)


def _affine(g: Graph, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return g.add(g.matmul(x, weight), bias)


class FusionLayer:
    """Concat-then-affine map from modality vectors to d_model (no activation)."""

    def __init__(self, input_dim: int, d_model: int, rng, params: dict, prefix="fusion"):
        self.input_dim = input_dim
        self.d_model = d_model
        self.weight = Tensor(xavier(rng, input_dim, d_model), requires_grad=True,
                             name=f"{prefix}.weight")
        self.bias = Tensor(np.zeros(d_model, DTYPE), requires_grad=True,
                           name=f"{prefix}.bias")
        params[self.weight.name] = self.weight
        params[self.bias.name] = self.bias

    def fuse(self, g: Graph, visual: Tensor, audio: Tensor) -> Tensor:
        if visual.shape[0] != audio.shape[0]:
            raise ShapeError(f"fuse: frame counts differ: {visual.shape} vs {audio.shape}")
        return self.apply(g, g.concat([visual, audio], axis=1))

    def apply(self, g: Graph, fused_inputs: Tensor) -> Tensor:
        if fused_inputs.shape[-1] != self.input_dim:
            raise ShapeError(f"fuse: input dim {fused_inputs.shape[-1]} != layer dim {self.input_dim}")
        return _affine(g, fused_inputs, self.weight, self.bias)


class LstmEncoder:
    """Unidirectional LSTM over segment frames with per-video state carryover.

    The final (hidden, cell) pair of segment i seeds segment i+1 of the same
    video, detached from the gradient graph (truncated backpropagation).
    Segment indices must arrive in order; index 1 resets the video's state.
    """

    def __init__(self, input_dim: int, settings: LstmSettings, rng, params: dict):
        self.input_dim = input_dim
        self.hidden = settings.hidden
        self.num_layers = settings.layers
        self.weights = []
        in_dim = input_dim
        for li in range(self.num_layers):
            w_in = Tensor(xavier(rng, in_dim, 4 * self.hidden), requires_grad=True,
                          name=f"lstm{li}.input_weight")
            w_state = Tensor(xavier(rng, self.hidden, 4 * self.hidden), requires_grad=True,
                             name=f"lstm{li}.state_weight")
            bias_init = np.zeros(4 * self.hidden, DTYPE)
            bias_init[self.hidden:2 * self.hidden] = 1.0  # open forget gates at start
            bias = Tensor(bias_init, requires_grad=True, name=f"lstm{li}.bias")
            for t in (w_in, w_state, bias):
                params[t.name] = t
            self.weights.append((w_in, w_state, bias))
            in_dim = self.hidden
        self.carry: dict = {}  # video_id -> (last segment index, [(h, c) arrays])

    def forward(self, g: Graph, x: Tensor, carry=None):
        """Run one segment. ``carry`` is a per-layer list of (h, c) Tensors or None.

        Returns (per-frame hidden outputs of the top layer, new per-layer state).
        """
        frames_in = x
        h_dim = self.hidden
        new_states = []
        for li, (w_in, w_state, bias) in enumerate(self.weights):
            if carry is None:
                h = Tensor(np.zeros((1, h_dim), DTYPE))
                c = Tensor(np.zeros((1, h_dim), DTYPE))
            else:
                h, c = carry[li]
            pre = _affine(g, frames_in, w_in, bias)  # input projection for all frames at once
            frames_out = []
            for t in range(pre.shape[0]):
                z = g.add(g.slice(pre, 0, t, t + 1), g.matmul(h, w_state))
                gate_in = g.sigmoid(g.slice(z, 1, 0, h_dim))
                gate_forget = g.sigmoid(g.slice(z, 1, h_dim, 2 * h_dim))
                candidate = g.tanh(g.slice(z, 1, 2 * h_dim, 3 * h_dim))
                gate_out = g.sigmoid(g.slice(z, 1, 3 * h_dim, 4 * h_dim))
                c = g.add(g.mul(gate_forget, c), g.mul(gate_in, candidate))
                h = g.mul(gate_out, g.tanh(c))
                frames_out.append(h)
            frames_in = g.concat(frames_out, axis=0) if len(frames_out) > 1 else frames_out[0]
            new_states.append((h, c))
        return frames_in, new_states

    def encode_segment(self, g: Graph, video_id: str, seg_index: int, x: Tensor) -> Tensor:
        """Forward one segment of a video, enforcing segment order and carrying state."""
        if seg_index == 1:
            carry = None
        else:
            stored = self.carry.get(video_id)
            if stored is None or stored[0] != seg_index - 1:
                prev = stored[0] if stored else "none"
                raise ValueError(
                    f"out-of-order segment for video {video_id!r}: got index {seg_index} "
                    f"after {prev}")
            carry = [(Tensor(h), Tensor(c)) for h, c in stored[1]]
        out, states = self.forward(g, x, carry)
        self.carry[video_id] = (seg_index, [(h.data.copy(), c.data.copy()) for h, c in states])
        return out

    def reset(self):
        self.carry.clear()

    @property
    def output_dim(self) -> int:
        return self.hidden


def sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine position features for positions 1..max_len."""
    positions = np.arange(1, max_len + 1, dtype=np.float64)[:, None]
    dims = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, dims / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table.astype(DTYPE)


class TransformerEncoder:
    """Post-norm transformer encoder applied to one segment at a time."""

    def __init__(self, d_model: int, seg_len: int, settings: TransformerSettings,
                 rng, params: dict):
        self.d_model = d_model
        self.seg_len = seg_len
        self.heads = settings.heads
        self.dropout = settings.dropout
        if d_model % self.heads:
            raise ValueError(f"d_model {d_model} not divisible by {self.heads} heads")
        self.head_dim = d_model // self.heads
        self.pe = sinusoidal_table(seg_len, d_model) if settings.positional_encoding else None
        # residual branches start small (1/sqrt(2 * layers)) so stacked post-norm
        # layers keep usable gradients without a warmup schedule
        shrink = DTYPE(1.0 / math.sqrt(2.0 * settings.layers))
        self.layers = []
        for li in range(settings.layers):
            layer = {}
            for role in ("query", "key", "value", "out"):
                scale = shrink if role == "out" else DTYPE(1)
                layer[role + "_w"] = Tensor(xavier(rng, d_model, d_model) * scale,
                                            requires_grad=True,
                                            name=f"trm{li}.attn.{role}_weight")
                layer[role + "_b"] = Tensor(np.zeros(d_model, DTYPE), requires_grad=True,
                                            name=f"trm{li}.attn.{role}_bias")
            layer["ffn_in_w"] = Tensor(xavier(rng, d_model, settings.ffn_dim), requires_grad=True,
                                       name=f"trm{li}.ffn.in_weight")
            layer["ffn_in_b"] = Tensor(np.zeros(settings.ffn_dim, DTYPE), requires_grad=True,
                                       name=f"trm{li}.ffn.in_bias")
            layer["ffn_out_w"] = Tensor(xavier(rng, settings.ffn_dim, d_model) * shrink,
                                        requires_grad=True,
                                        name=f"trm{li}.ffn.out_weight")
            layer["ffn_out_b"] = Tensor(np.zeros(d_model, DTYPE), requires_grad=True,
                                        name=f"trm{li}.ffn.out_bias")
            for norm in ("norm1", "norm2"):
                layer[norm + "_gain"] = Tensor(np.ones(d_model, DTYPE), requires_grad=True,
                                               name=f"trm{li}.{norm}.gain")
                layer[norm + "_shift"] = Tensor(np.zeros(d_model, DTYPE), requires_grad=True,
                                                name=f"trm{li}.{norm}.shift")
            for t in layer.values():
                params[t.name] = t
            self.layers.append(layer)

    def _drop(self, g, x, rng, train):
        if train and self.dropout > 0.0:
            return g.dropout(x, self.dropout, rng=rng)
        return x

    def forward(self, g: Graph, x: Tensor, rng=None, train: bool = False,
                return_attention: bool = False):
        window = x.shape[0]
        if window > self.seg_len:
            raise ShapeError(f"segment window {window} exceeds segment length "
                             f"{self.seg_len}")
        if self.pe is not None:
            x = g.add(x, Tensor(self.pe[:window]))
        attention_maps = []
        inv_sqrt = 1.0 / math.sqrt(self.head_dim)
        for layer in self.layers:
            q = _affine(g, x, layer["query_w"], layer["query_b"])
            k = _affine(g, x, layer["key_w"], layer["key_b"])
            v = _affine(g, x, layer["value_w"], layer["value_b"])
            contexts = []
            for h in range(self.heads):
                lo, hi = h * self.head_dim, (h + 1) * self.head_dim
                qh = g.slice(q, 1, lo, hi)
                kh = g.slice(k, 1, lo, hi)
                vh = g.slice(v, 1, lo, hi)
                attention = g.softmax(g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt))
                attention_maps.append(attention)
                contexts.append(g.matmul(self._drop(g, attention, rng, train), vh))
            merged = g.concat(contexts, axis=1)
            projected = self._drop(g, _affine(g, merged, layer["out_w"], layer["out_b"]),
                                   rng, train)
            x = g.layer_norm(g.add(x, projected), layer["norm1_gain"], layer["norm1_shift"])
            mid = self._drop(g, g.relu(_affine(g, x, layer["ffn_in_w"], layer["ffn_in_b"])),
                             rng, train)
            ffn = self._drop(g, _affine(g, mid, layer["ffn_out_w"], layer["ffn_out_b"]),
                             rng, train)
            x = g.layer_norm(g.add(x, ffn), layer["norm2_gain"], layer["norm2_shift"])
        if return_attention:
            return x, attention_maps
        return x

    @property
    def output_dim(self) -> int:
        return self.d_model


class ClassificationHead:
    """Two ReLU hidden stages then an 8-way output affine.

    Dropout precedes each hidden affine at train time, which is the source of
    stochasticity between the two RDrop passes when the encoder itself has none.
    """

    def __init__(self, input_dim: int, hidden_sizes, classes: int, dropout: float,
                 rng, params: dict):
        self.dropout = dropout
        self.stages = []
        in_dim = input_dim
        for i, size in enumerate(hidden_sizes):
            w = Tensor(xavier(rng, in_dim, size), requires_grad=True, name=f"head.hidden{i}.weight")
            b = Tensor(np.zeros(size, DTYPE), requires_grad=True, name=f"head.hidden{i}.bias")
            params[w.name] = w
            params[b.name] = b
            self.stages.append((w, b))
            in_dim = size
        self.out_w = Tensor(xavier(rng, in_dim, classes), requires_grad=True, name="head.out.weight")
        self.out_b = Tensor(np.zeros(classes, DTYPE), requires_grad=True, name="head.out.bias")
        params[self.out_w.name] = self.out_w
        params[self.out_b.name] = self.out_b

    def forward(self, g: Graph, x: Tensor, rng=None, train: bool = False) -> Tensor:
        for w, b in self.stages:
            if train and self.dropout > 0.0:
                x = g.dropout(x, self.dropout, rng=rng)
            x = g.relu(_affine(g, x, w, b))
        return _affine(g, x, self.out_w, self.out_b)


class ExpressionModel:
    """Fusion + temporal encoder + head, with named parameters for checkpoints."""

    def __init__(self, config: ModelConfig, input_dim: int, rng):
        config.validate()
        self.config = config
        self.input_dim = input_dim
        self.params: dict = {}
        self.fusion = FusionLayer(input_dim, config.d_model, rng, self.params)
        if config.encoder == "lstm":
            self.encoder = LstmEncoder(config.d_model, config.lstm, rng, self.params)
        else:
            self.encoder = TransformerEncoder(config.d_model, config.seg_len,
                                              config.transformer, rng, self.params)
        self.head = ClassificationHead(self.encoder.output_dim, config.head,
                                       config.classes, config.head_dropout, rng, self.params)

    # -- parameter management --

    def parameters(self) -> dict:
        return self.params

    def load_state(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=DTYPE)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} "
                                 f"!= model shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr)
        return self

    # -- forward passes --

    def _encode(self, g, fused, video_id, seg_index, rng, train):
        if isinstance(self.encoder, LstmEncoder):
            return self.encoder.encode_segment(g, video_id, seg_index, fused)
        return self.encoder.forward(g, fused, rng=rng, train=train)

    def two_pass_logits(self, g: Graph, features: np.ndarray, video_id: str,
                        seg_index: int, rng) -> tuple:
        """Two stochastic forward passes over one segment (train mode).

        The deterministic parts (fusion; the LSTM, which has no dropout) run
        once and are shared; the stochastic parts run twice.
        """
        fused = self.fusion.apply(g, Tensor(features))
        if isinstance(self.encoder, LstmEncoder):
            encoded = self.encoder.encode_segment(g, video_id, seg_index, fused)
            first = self.head.forward(g, encoded, rng=rng, train=True)
            second = self.head.forward(g, encoded, rng=rng, train=True)
        else:
            first = self.head.forward(
                g, self.encoder.forward(g, fused, rng=rng, train=True), rng=rng, train=True)
            second = self.head.forward(
                g, self.encoder.forward(g, fused, rng=rng, train=True), rng=rng, train=True)
        return first, second

    def eval_logits(self, g: Graph, features: np.ndarray, video_id: str,
                    seg_index: int) -> Tensor:
        """Deterministic single pass (no dropout anywhere)."""
        fused = self.fusion.apply(g, Tensor(features))
        encoded = self._encode(g, fused, video_id, seg_index, rng=None, train=False)
        return self.head.forward(g, encoded, rng=None, train=False)

    def reset_video_state(self):
        if isinstance(self.encoder, LstmEncoder):
            self.encoder.reset()


def build_model(config: ModelConfig, input_dim: int, seed) -> ExpressionModel:
    rng = np.random.default_rng(seed)
    return ExpressionModel(config, input_dim, rng)
