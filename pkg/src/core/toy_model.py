"""
Desk-scale decoder-only language model.

Token embedding plus a fixed sinusoidal position table, a stack of
pre-norm blocks (causal multi-head attention, GELU MLP), a final norm
and a linear readout. Every linear inside a block holds its weight in
one of three states: a float matrix, LsiParams under calibration, or a
folded QuantizedTensor.
"""

import logging
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError
from .lsi_core import LsiParams, lsi_fake_quantize, reconstruct
from .ops import ActQuant, CausalAttention, Ctx, Gelu, LayerNorm
from .quantizer import (ACTIVATION_PASSTHROUGH_BITS, GROUP, PER_CHANNEL,
                        QuantConfig, QuantizedTensor, dequantize, fake_quantize,
                        quantize)
from .tensor_core import Matrix, seeded_rng

logger = logging.getLogger(__name__)

WeightState = Union[np.ndarray, LsiParams, QuantizedTensor]

STATE_FLOAT = "float"
STATE_LSI = "lsi"
STATE_QUANTIZED = "quantized"

LINEARS = ("q", "k", "v", "o", "up", "down")

MARKOV_SEED_BASE = 7919
MARKOV_CONCENTRATION = 0.05
READOUT_TEMPERATURES = np.logspace(0.0, 2.5, 31)


@dataclass(frozen=True)
class ModelSpec:
    """Shape and generator settings of a synthetic model."""

    n_layers: int = 4
    width: int = 64
    n_heads: int = 4
    vocab: int = 256
    mlp_ratio: int = 4
    seq_len: int = 32
    outlier_fraction: float = 0.05
    outlier_scale: float = 10.0
    weight_df: float = 8.0

    def __post_init__(self):
        if min(self.n_layers, self.width, self.n_heads, self.vocab, self.mlp_ratio, self.seq_len) < 1:
            raise ConfigurationError(f"model dimensions must be positive: {self}")
        if self.width % self.n_heads:
            raise ConfigurationError(
                f"width {self.width} is not divisible by {self.n_heads} heads")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigurationError(
                f"outlier_fraction must lie in [0, 1], got {self.outlier_fraction}")
        if self.weight_df <= 2.0:
            raise ConfigurationError("weight_df must exceed 2 for a finite variance")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    @property
    def hidden(self) -> int:
        return self.width * self.mlp_ratio

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Linear:
    weight: WeightState
    bias: np.ndarray

    @property
    def state(self) -> str:
        if isinstance(self.weight, LsiParams):
            return STATE_LSI
        if isinstance(self.weight, QuantizedTensor):
            return STATE_QUANTIZED
        return STATE_FLOAT

    @property
    def shape(self):
        if isinstance(self.weight, (LsiParams, QuantizedTensor)):
            return tuple(self.weight.shape)
        return self.weight.shape


@dataclass
class Block:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    up: Linear
    down: Linear

    def linears(self) -> Dict[str, Linear]:
        return {name: getattr(self, name) for name in LINEARS}

    def map_linears(self, fn: Callable[[str, Linear], Linear]) -> "Block":
        return replace(self, **{name: fn(name, lin) for name, lin in self.linears().items()})


@dataclass
class LayerGraph:
    """Ordered blocks between an embedding and a readout."""

    spec: ModelSpec
    embedding: Matrix
    blocks: List[Block]
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    head: Matrix
    head_bias: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def with_blocks(self, blocks: List[Block]) -> "LayerGraph":
        return replace(self, blocks=list(blocks))


@dataclass
class CalibSet:
    """Token sequences (n x T) or raw block-0 input activations (n x T x width)."""

    tokens: Optional[np.ndarray] = None
    activations: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.tokens is None) == (self.activations is None):
            raise ConfigurationError("a calibration set holds either tokens or activations")
        data = self.tokens if self.tokens is not None else self.activations
        if data.shape[0] < 1:
            raise DomainError("calibration set is empty")

    @property
    def n_samples(self) -> int:
        data = self.tokens if self.tokens is not None else self.activations
        return int(data.shape[0])

    @property
    def seq_len(self) -> int:
        data = self.tokens if self.tokens is not None else self.activations
        return int(data.shape[1])

    def subset(self, indices) -> "CalibSet":
        if self.tokens is not None:
            return CalibSet(tokens=self.tokens[indices])
        return CalibSet(activations=self.activations[indices])


@dataclass(frozen=True)
class ForwardMode:
    """
    fp (no bits), weight-only, or weight-activation quantization.

    Activations share one scale per tensor unless act_per_sequence is set.
    """

    weight_bits: Optional[int] = None
    act_bits: Optional[int] = None
    group_size: int = 0
    act_per_sequence: bool = False

    @property
    def is_fp(self) -> bool:
        return self.weight_bits is None

    @property
    def quantizes_activations(self) -> bool:
        return self.act_bits is not None and self.act_bits <= ACTIVATION_PASSTHROUGH_BITS

    @property
    def active_act_bits(self) -> Optional[int]:
        return self.act_bits if self.quantizes_activations else None

    def weight_config(self) -> QuantConfig:
        if self.is_fp:
            raise ConfigurationError("fp mode has no weight quantization config")
        if self.group_size:
            return QuantConfig(bits=self.weight_bits, granularity=GROUP, group_size=self.group_size)
        return QuantConfig(bits=self.weight_bits, granularity=PER_CHANNEL)

    @property
    def label(self) -> str:
        if self.is_fp:
            return "fp"
        label = f"w{self.weight_bits}a{self.act_bits or 16}"
        return label + (f"g{self.group_size}" if self.group_size else "")


def fp() -> ForwardMode:
    return ForwardMode()


def weight_only(bits: int, group_size: int = 0) -> ForwardMode:
    return ForwardMode(weight_bits=bits, group_size=group_size)


def weight_activation(weight_bits: int, act_bits: int, group_size: int = 0,
                      act_per_sequence: bool = False) -> ForwardMode:
    return ForwardMode(weight_bits=weight_bits, act_bits=act_bits, group_size=group_size,
                       act_per_sequence=act_per_sequence)


_SETTING = re.compile(r"^w(\d+)a(\d+)(?:g(\d+))?$")


def parse_setting(text: str) -> ForwardMode:
    """'w4a16g128' -> 4-bit weights, fp activations, groups of 128. 'fp' is fp."""
    text = text.strip().lower()
    if text in ("fp", "w16a16"):
        return fp()
    match = _SETTING.match(text)
    if not match:
        raise ConfigurationError(
            f"Cannot parse setting '{text}'", hint="Use the form w<bits>a<bits>[g<group>], e.g. w4a16g128")
    w_bits, a_bits, group = int(match.group(1)), int(match.group(2)), int(match.group(3) or 0)
    if not 2 <= w_bits <= 8:
        raise ConfigurationError(f"Weight bits must lie in [2, 8], got {w_bits}")
    if not 2 <= a_bits <= 16:
        raise ConfigurationError(f"Activation bits must lie in [2, 16], got {a_bits}")
    return ForwardMode(weight_bits=w_bits, act_bits=a_bits, group_size=group)


def weight_matrix(state: WeightState) -> Matrix:
    """Float view of any weight state."""
    if isinstance(state, LsiParams):
        return reconstruct(state)
    if isinstance(state, QuantizedTensor):
        return dequantize(state)
    return state


def resolve_weight(state: WeightState, mode: ForwardMode) -> Matrix:
    """The matrix a forward pass in this mode multiplies by."""
    if mode.is_fp:
        if isinstance(state, QuantizedTensor):
            raise ConfigurationError(
                "fp forward over a quantized weight",
                hint="Evaluate a quantized model with its weight setting")
        return weight_matrix(state)
    cfg = mode.weight_config()
    if isinstance(state, QuantizedTensor):
        held = state.config
        if (held.bits, held.granularity, held.group_size) != (cfg.bits, cfg.granularity, cfg.group_size):
            raise ConfigurationError(
                f"weight is quantized as {held.label} but the forward mode asks for {cfg.label}")
        return dequantize(state)
    if isinstance(state, LsiParams):
        return lsi_fake_quantize(state, cfg)
    return fake_quantize(state, cfg)


def sinusoidal_positions(seq_len: int, width: int) -> Matrix:
    pos = np.arange(seq_len)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((seq_len, width))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: width // 2])
    return table


def embed(model: LayerGraph, data: CalibSet) -> Matrix:
    """Block-0 input, one row per position, sequences stacked."""
    if data.activations is not None:
        acts = data.activations
        if acts.shape[2] != model.spec.width:
            raise ShapeError(f"activations of width {acts.shape[2]} for a width-{model.spec.width} model")
        return acts.reshape(-1, acts.shape[2]).astype(np.float64)
    tokens = np.asarray(data.tokens)
    if tokens.min() < 0 or tokens.max() >= model.spec.vocab:
        raise DomainError(f"token ids must lie in [0, {model.spec.vocab})")
    x = model.embedding[tokens] + sinusoidal_positions(tokens.shape[1], model.spec.width)
    return x.reshape(-1, model.spec.width)


def block_forward(block: Block, x: Matrix, mode: ForwardMode, n_heads: int, seq_len: int) -> Matrix:
    """
    One pre-norm block. In WA mode activations are quantized at every
    linear input; q and k enter the softmax unquantized.
    """
    bits = mode.active_act_bits
    act_seq = seq_len if mode.act_per_sequence else None

    def aq(t):
        return ActQuant.forward(Ctx(), t, bits, act_seq)

    def lin(t, name):
        layer = getattr(block, name)
        return aq(t) @ resolve_weight(layer.weight, mode) + layer.bias

    a1 = LayerNorm.forward(Ctx(), x, block.ln1_gain, block.ln1_bias)
    q, k, v = lin(a1, "q"), lin(a1, "k"), lin(a1, "v")
    o = CausalAttention.forward(Ctx(), q, k, v, n_heads, seq_len)
    h = x + lin(o, "o")
    a2 = LayerNorm.forward(Ctx(), h, block.ln2_gain, block.ln2_bias)
    u = Gelu.forward(Ctx(), lin(a2, "up"))
    return h + lin(u, "down")


def block_outputs(model: LayerGraph, data: CalibSet, mode: ForwardMode) -> List[Matrix]:
    """[block-0 input, output of block 0, ..., output of the last block]"""
    x = embed(model, data)
    outputs = [x]
    for block in model.blocks:
        x = block_forward(block, x, mode, model.spec.n_heads, data.seq_len)
        outputs.append(x)
    return outputs


def final_hidden(model: LayerGraph, data: CalibSet, mode: ForwardMode) -> Matrix:
    x = block_outputs(model, data, mode)[-1]
    return LayerNorm.forward(Ctx(), x, model.lnf_gain, model.lnf_bias)


def forward(model: LayerGraph, data: Union[CalibSet, np.ndarray], mode: ForwardMode) -> Matrix:
    """
    Logits for every position.

    Args:
        model: Model to run
        data: CalibSet or an (n, T) token array
        mode: fp, weight-only or weight-activation

    Returns:
        (n*T) x vocab logits
    """
    if not isinstance(data, CalibSet):
        data = CalibSet(tokens=np.atleast_2d(np.asarray(data, dtype=np.int64)))
    return final_hidden(model, data, mode) @ model.head + model.head_bias


def log_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def perplexity_from_logits(logits: Matrix, tokens: np.ndarray) -> float:
    """exp of the mean next-token cross-entropy."""
    n, t = tokens.shape
    if n < 1:
        raise DomainError("perplexity of an empty set")
    if t < 2:
        raise DomainError("perplexity needs sequences of length >= 2")
    logp = log_softmax(logits).reshape(n, t, -1)[:, :-1, :]
    targets = tokens[:, 1:]
    picked = np.take_along_axis(logp, targets[:, :, None], axis=2)
    return float(np.exp(-picked.mean()))


def perplexity(model: LayerGraph, eval_set: CalibSet, mode: ForwardMode) -> float:
    if eval_set.tokens is None:
        raise ConfigurationError("perplexity needs token sequences")
    return perplexity_from_logits(forward(model, eval_set, mode), eval_set.tokens)


def _draw_weight(rng, rows: int, cols: int, spec: ModelSpec) -> Matrix:
    df = spec.weight_df
    w = rng.standard_t(df, size=(rows, cols)) / np.sqrt(df / (df - 2.0)) / np.sqrt(rows)
    n_out = int(round(spec.outlier_fraction * rows))
    if spec.outlier_fraction > 0 and n_out == 0:
        n_out = 1
    if n_out:
        outliers = rng.choice(rows, size=n_out, replace=False)
        w[outliers, :] *= spec.outlier_scale
    return w


def make_synthetic_model(spec: ModelSpec, seed: int) -> LayerGraph:
    """
    Reproducible random model.

    A fraction of the input channels of every block linear is scaled by
    spec.outlier_scale, which produces the few dominant channels that
    make low-bit quantization hard.
    """
    rng = seeded_rng(seed)
    d, hid = spec.width, spec.hidden
    blocks = []
    for _ in range(spec.n_layers):
        blocks.append(Block(
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
            q=Linear(_draw_weight(rng, d, d, spec), np.zeros(d)),
            k=Linear(_draw_weight(rng, d, d, spec), np.zeros(d)),
            v=Linear(_draw_weight(rng, d, d, spec), np.zeros(d)),
            o=Linear(_draw_weight(rng, d, d, spec), np.zeros(d)),
            ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
            up=Linear(_draw_weight(rng, d, hid, spec), 0.02 * rng.standard_normal(hid)),
            down=Linear(_draw_weight(rng, hid, d, spec), 0.02 * rng.standard_normal(d)),
        ))
    embedding = rng.standard_normal((spec.vocab, d))
    head = rng.standard_normal((d, spec.vocab)) / np.sqrt(d)
    logger.info(f"Generated synthetic model: {spec.n_layers} layers, width {d}, seed {seed}")
    return LayerGraph(spec=spec, embedding=embedding, blocks=blocks,
                      lnf_gain=np.ones(d), lnf_bias=np.zeros(d),
                      head=head, head_bias=np.zeros(spec.vocab),
                      metadata={"seed": seed})


def markov_transitions(vocab: int, chain: int = 0) -> Matrix:
    """Row-stochastic next-token table of a sparse-ish Markov source."""
    rng = seeded_rng(MARKOV_SEED_BASE + chain)
    return rng.dirichlet(np.full(vocab, MARKOV_CONCENTRATION), size=vocab)


def make_synthetic_data(spec: ModelSpec, seed: int, n_samples: int = 32,
                        seq_len: Optional[int] = None, chain: int = 0) -> CalibSet:
    """
    Token sequences from a seeded Markov source.

    Args:
        spec: Model spec (vocabulary and default sequence length)
        seed: Sampling seed
        n_samples: Number of sequences
        seq_len: Sequence length, spec.seq_len by default
        chain: Which transition table; different chains are different distributions
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    seq_len = seq_len or spec.seq_len
    table = markov_transitions(spec.vocab, chain)
    cumulative = np.cumsum(table, axis=1)
    rng = seeded_rng(seed)
    tokens = np.zeros((n_samples, seq_len), dtype=np.int64)
    tokens[:, 0] = rng.integers(0, spec.vocab, size=n_samples)
    draws = rng.random((n_samples, seq_len))
    for t in range(1, seq_len):
        rows = cumulative[tokens[:, t - 1]]
        nxt = (rows < draws[:, t][:, None]).sum(axis=1)
        tokens[:, t] = np.minimum(nxt, spec.vocab - 1)
    return CalibSet(tokens=tokens)


def fit_readout(model: LayerGraph, data: CalibSet, ridge: float = 1e-2) -> LayerGraph:
    """
    Ridge-fit the readout to next-token one-hot targets on fp hidden states,
    then pick the logit temperature with the lowest cross-entropy.
    """
    if data.tokens is None:
        raise ConfigurationError("fit_readout needs token sequences")
    n, t = data.tokens.shape
    hidden = final_hidden(model, data, fp()).reshape(n, t, -1)[:, :-1, :].reshape(-1, model.spec.width)
    targets = data.tokens[:, 1:].reshape(-1)
    design = np.hstack([hidden, np.ones((hidden.shape[0], 1))])
    onehot = np.zeros((hidden.shape[0], model.spec.vocab))
    onehot[np.arange(hidden.shape[0]), targets] = 1.0
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    coef = np.linalg.solve(gram, design.T @ onehot)
    scores = design @ coef

    best_tau, best_ce = 1.0, np.inf
    for tau in READOUT_TEMPERATURES:
        ce = -log_softmax(tau * scores)[np.arange(len(targets)), targets].mean()
        if ce < best_ce:
            best_tau, best_ce = float(tau), float(ce)
    logger.info(f"Readout fitted: temperature {best_tau:.3g}, train perplexity {np.exp(best_ce):.3f}")
    metadata = dict(model.metadata, readout_temperature=best_tau)
    return replace(model, head=best_tau * coef[:-1], head_bias=best_tau * coef[-1], metadata=metadata)


def rtn_quantize(model: LayerGraph, mode: ForwardMode) -> LayerGraph:
    """Round-to-nearest baseline: every block linear folded with plain min-max qparams."""
    cfg = mode.weight_config()

    def to_codes(name: str, lin: Linear) -> Linear:
        return Linear(quantize(weight_matrix(lin.weight), cfg), lin.bias)

    return model.with_blocks([b.map_linears(to_codes) for b in model.blocks])


def dequantized_block(block: Block) -> Block:
    return block.map_linears(lambda name, lin: Linear(weight_matrix(lin.weight), lin.bias))


def channel_norm_ratio(model: LayerGraph) -> float:
    """Largest max/median input-channel norm ratio over all block linears."""
    ratio = 0.0
    for block in model.blocks:
        for lin in block.linears().values():
            norms = np.linalg.norm(weight_matrix(lin.weight), axis=1)
            ratio = max(ratio, float(norms.max() / np.median(norms)))
    return ratio
