"""Recurrent multimodal fusion cell and the shared encoder built on it.

One recurrent step, for hidden state ``h`` and candidate state ``c``::

    h_hat = LayerNorm(h)
    z_m   = Attention(h_hat, E_m)                  for each present modality m
    f     = sigmoid(z_T W_f^T + z_V W_f^V + b_f)
    i_m   = sigmoid(z_m W_i^m + b_i)
    c'    = c * f + z_T * i_T + z_V * i_V
    h'    = c' + MLP(LayerNorm(c'))

After the last selected layer the hidden state is projected by ``W_final``
and, in ReT-2 mode, the backbone pooler tokens are added. The baseline ReT
mode keeps 32 hidden tokens, adds self-attention among them before the
cross-attention, and skips the pooler injection.

Row-vector convention throughout: a linear map is ``x @ W``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import _envelope
from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, FormatError
from .features import CorpusRecord, FeatureBatch, LayerFeatures, collate
from .tensor import Tensor

RET2 = "ret2"
RET = "ret"
TOKENS_PER_MODE = {RET2: 1, RET: 32}

# (text depth or visual depth) -> selected indices, from the published backbones
KNOWN_LAYER_INDICES = {
    12: (3, 7, 11),
    24: (3, 18, 23),
    32: (4, 25, 31),
}


def select_layers(total_layers):
    """Indices of the early, middle and final backbone layers to fuse."""
    if not isinstance(total_layers, (int, np.integer)) or total_layers < 4:
        raise ConfigError(f"need at least 4 backbone layers, got {total_layers!r}",
                          field="total_layers")
    L = int(total_layers)
    if L in KNOWN_LAYER_INDICES:
        return list(KNOWN_LAYER_INDICES[L])
    last = L - 1
    mid = min(math.ceil(3 * L / 4), last - 1)
    early = min(math.ceil(L / 8), mid - 1)
    return [early, mid, last]


def pick_layers(activations, total_layers=None):
    """Slice ``(L, N, d_b)`` backbone activations down to the selected layers."""
    activations = np.asarray(activations)
    idx = select_layers(total_layers or activations.shape[0])
    return activations[idx]


@dataclass
class CellConfig:
    mode: str = RET2
    hidden_dim: int = 1024
    text_dim: Optional[int] = 768
    visual_dim: Optional[int] = 1024
    pooler_dim: int = 768
    out_dim: Optional[int] = None
    n_heads: int = 8
    num_layers: int = 3
    mlp_ratio: int = 4
    init_std: float = 0.02
    forget_bias: float = 0.0
    input_bias: float = 0.0
    ln_eps: float = T.LN_EPS

    def __post_init__(self):
        if self.out_dim is None:
            self.out_dim = self.pooler_dim

    @property
    def tokens(self):
        return TOKENS_PER_MODE[self.mode]

    @property
    def modalities(self):
        return [m for m in ("text", "visual") if getattr(self, f"{m}_dim")]

    def validate(self):
        if self.mode not in TOKENS_PER_MODE:
            raise ConfigError(f"mode must be one of {sorted(TOKENS_PER_MODE)}", field="mode")
        for name in ("hidden_dim", "pooler_dim", "out_dim", "n_heads", "num_layers", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", field=name)
        if self.hidden_dim < 2:
            raise ConfigError("hidden_dim must be >= 2", field="hidden_dim")
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads", field="n_heads")
        if not self.modalities:
            raise ConfigError("at least one of text_dim / visual_dim is required", field="text_dim")
        if self.mode == RET2 and self.out_dim != self.pooler_dim:
            raise ConfigError("ReT-2 mode adds pooler tokens to the output: out_dim must equal "
                              "pooler_dim", field="out_dim")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive", field="init_std")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cell config keys: {sorted(unknown)}",
                              field=sorted(unknown)[0])
        return cls(**d).validate()


def _param_shapes(cfg):
    d, k = cfg.hidden_dim, cfg.tokens
    shapes = {"h0": (k, d), "ln_attn.gain": (d,), "ln_attn.bias": (d,)}
    if cfg.mode == RET:
        shapes.update({"ln_self.gain": (d,), "ln_self.bias": (d,)})
        shapes.update(_attn_shapes("self_attn", d, d))
    for m in cfg.modalities:
        shapes.update(_attn_shapes(f"attn_{m}", d, getattr(cfg, f"{m}_dim")))
    for m in cfg.modalities:
        shapes[f"gate.wf_{m}"] = (d, d)
        shapes[f"gate.wi_{m}"] = (d, d)
    hid = cfg.mlp_ratio * d
    shapes.update({"ln_mlp.gain": (d,), "ln_mlp.bias": (d,),
                   "mlp.w1": (d, hid), "mlp.b1": (hid,), "mlp.w2": (hid, d), "mlp.b2": (d,),
                   "w_final": (d, cfg.out_dim)})
    return shapes


def _attn_shapes(prefix, d, d_src):
    return {f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
            f"{prefix}.wk": (d_src, d), f"{prefix}.bk": (d,),
            f"{prefix}.wv": (d_src, d), f"{prefix}.bv": (d,),
            f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,)}


class FusionCellParams:
    """All learnable tensors of the cell, keyed by dotted name.

    The gate biases are fixed scalars held in the config, never trained.
    Values are kept on the float32 grid so checkpoints are lossless.
    """

    def __init__(self, config: CellConfig, tensors):
        self.config = config
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, config: CellConfig, seed=0):
        cfg = config.validate()
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                val = np.ones(shape)
            elif leaf.startswith("b") or leaf == "bias":
                val = np.zeros(shape)
            else:
                val = rng.normal(0.0, cfg.init_std, size=shape)
            tensors[name] = Tensor(_envelope.to_f32_grid(val), requires_grad=True)
        return cls(cfg, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self):
        return list(self.tensors)

    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        return FusionCellParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True)
                                              for n, t in self.tensors.items()})

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state_dict(self, state):
        missing = set(self.tensors) ^ set(state)
        if missing:
            raise DataError(f"state mismatch on {sorted(missing)}", field=sorted(missing)[0])
        for n, t in self.tensors.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{n}: shape {arr.shape} != {t.shape}", field=n)
            self.tensors[n] = Tensor(arr, requires_grad=True)


@dataclass
class GateOverride:
    """Replace gate activations by constants (diagnostic / test hook)."""

    forget: Optional[float] = None
    input_text: Optional[float] = None
    input_visual: Optional[float] = None


@dataclass
class StepGates:
    forget: np.ndarray
    input_text: Optional[np.ndarray]
    input_visual: Optional[np.ndarray]
    text_present: Optional[np.ndarray]
    visual_present: Optional[np.ndarray]


@dataclass
class EncoderOutput:
    embedding: Tensor
    gate_log: list = field(default_factory=list)
    states: list = field(default_factory=list)


def _linear(x, p, w, b=None):
    y = x @ p[w]
    return y + p[b] if b is not None else y


def multi_head_attention(x, src, p, prefix, n_heads, key_mask=None):
    """Scaled dot-product attention with queries from ``x`` (B,k,d) and
    keys/values from ``src`` (B,N,d_src); returns (B,k,d)."""
    B, k, d = x.shape
    N = src.shape[1]
    dh = d // n_heads
    q = _linear(x, p, f"{prefix}.wq", f"{prefix}.bq")
    kk = _linear(src, p, f"{prefix}.wk", f"{prefix}.bk")
    v = _linear(src, p, f"{prefix}.wv", f"{prefix}.bv")
    q = T.permute(q.reshape(B, k, n_heads, dh), (0, 2, 1, 3))
    kk = T.permute(kk.reshape(B, N, n_heads, dh), (0, 2, 3, 1))
    v = T.permute(v.reshape(B, N, n_heads, dh), (0, 2, 1, 3))
    logits = T.scale(q @ kk, 1.0 / math.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    att = T.softmax(logits, axis=-1, mask=mask)
    out = T.permute(att @ v, (0, 2, 1, 3)).reshape(B, k, d)
    return _linear(out, p, f"{prefix}.wo", f"{prefix}.bo")


def _batched(x):
    return (x, False) if x.ndim == 3 else (T.reshape(x, (1,) + x.shape), True)


def cross_attend(h_norm, E, params, modality, key_mask=None):
    """Fuse the normalised hidden state with one modality's layer tokens.

    ``h_norm`` is (k,d) or (B,k,d); ``E`` is (N,d_b) or (B,N,d_b).
    """
    if modality not in ("text", "visual"):
        raise DataError(f"cannot attend to modality {modality!r}", field="modality")
    if f"attn_{modality}.wq" not in params:
        raise DataError(f"cell has no {modality} branch", field="modality")
    E = T.as_tensor(E)
    h_norm, squeeze = _batched(h_norm)
    E, _ = _batched(E)
    if key_mask is not None and np.ndim(key_mask) == 1:
        key_mask = np.asarray(key_mask)[None]
    out = multi_head_attention(h_norm, E, params, f"attn_{modality}",
                               params.config.n_heads, key_mask)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def _select(t, present):
    """Zero rows of samples where the modality is absent."""
    if present is None or present.all():
        return t
    return T.where(present[:, None, None], t)


def _const_like(t, value):
    return Tensor(np.full(t.shape, float(value)))


def compute_gates(zT, zV, params, text_present=None, visual_present=None, override=None):
    """Forget gate and per-modality input gates.

    An absent modality (``None``) contributes nothing to the forget gate and
    has no input gate. ``*_present`` masks absence per sample.
    """
    if zT is None and zV is None:
        raise DataError("gates need at least one modality", field="modality")
    cfg = params.config
    pre_f = None
    for z, m, present in ((zT, "text", text_present), (zV, "visual", visual_present)):
        if z is None:
            continue
        term = _select(z @ params[f"gate.wf_{m}"], present)
        pre_f = term if pre_f is None else pre_f + term
    if cfg.forget_bias:
        pre_f = pre_f + cfg.forget_bias
    gates = [T.sigmoid(pre_f)]
    for z, m in ((zT, "text"), (zV, "visual")):
        if z is None:
            gates.append(None)
            continue
        pre_i = z @ params[f"gate.wi_{m}"]
        if cfg.input_bias:
            pre_i = pre_i + cfg.input_bias
        gates.append(T.sigmoid(pre_i))
    if override is not None:
        for pos, value in enumerate((override.forget, override.input_text, override.input_visual)):
            if value is not None and gates[pos] is not None:
                gates[pos] = _const_like(gates[pos], value)
    return tuple(gates)


def _as_layer(E):
    if E is None:
        return None
    if isinstance(E, tuple):
        return E
    return (E, None, None)


def step(h, c, text, visual, params, override=None, gate_log=None):
    """One recurrent step; returns ``(h_next, c_next)``.

    ``text`` / ``visual`` are either ``None`` (absent for every sample), a
    token matrix, or a tuple ``(tokens, key_mask, present)`` for batches.
    """
    cfg = params.config
    text, visual = _as_layer(text), _as_layer(visual)
    if text is None and visual is None:
        raise DataError("a step needs at least one modality", field="modality")
    h, squeeze = _batched(h)
    c, _ = _batched(c)
    if cfg.mode == RET:
        hs = T.layer_norm(h, params["ln_self.gain"], params["ln_self.bias"], cfg.ln_eps)
        h = h + multi_head_attention(hs, hs, params, "self_attn", cfg.n_heads)
    h_norm = T.layer_norm(h, params["ln_attn.gain"], params["ln_attn.bias"], cfg.ln_eps)

    z, present = {}, {}
    for m, layer in (("text", text), ("visual", visual)):
        if layer is None:
            z[m] = present[m] = None
            continue
        E, key_mask, pres = layer
        E = T.as_tensor(E)
        if E.ndim == 2:
            E = T.reshape(E, (1,) + E.shape)
        z[m] = multi_head_attention(h_norm, E, params, f"attn_{m}", cfg.n_heads, key_mask)
        present[m] = None if pres is None else np.asarray(pres, dtype=bool)

    f, iT, iV = compute_gates(z["text"], z["visual"], params, present["text"], present["visual"],
                              override)
    c_next = c * f
    if iT is not None:
        c_next = c_next + _select(z["text"] * iT, present["text"])
    if iV is not None:
        c_next = c_next + _select(z["visual"] * iV, present["visual"])
    hn = T.layer_norm(c_next, params["ln_mlp.gain"], params["ln_mlp.bias"], cfg.ln_eps)
    mlp = T.gelu(hn @ params["mlp.w1"] + params["mlp.b1"]) @ params["mlp.w2"] + params["mlp.b2"]
    h_next = c_next + mlp

    if gate_log is not None:
        gate_log.append(StepGates(
            f.data, None if iT is None else iT.data, None if iV is None else iV.data,
            _full_presence(present["text"], f.shape[0], iT),
            _full_presence(present["visual"], f.shape[0], iV)))
    if squeeze:
        return T.reshape(h_next, h_next.shape[1:]), T.reshape(c_next, c_next.shape[1:])
    return h_next, c_next


def _full_presence(present, B, gate):
    if gate is None:
        return None
    return np.ones(B, dtype=bool) if present is None else present


def encode_batch(params, batch: FeatureBatch, override=None, log_gates=False, trace=False):
    """Encode a padded batch; the embedding has shape (B, k, out_dim)."""
    cfg = params.config
    B = len(batch)
    if B == 0:
        raise DataError("empty batch")
    layers = {}
    for m in ("text", "visual"):
        mb = getattr(batch, m)
        if mb is None or not mb.present.any():
            layers[m] = None
            continue
        if m not in cfg.modalities:
            raise DataError(f"batch has {m} features but the cell has no {m} branch", field=m)
        if mb.layers.shape[0] != cfg.num_layers:
            raise DimensionError(f"{m} features carry {mb.layers.shape[0]} layers, cell expects "
                                 f"{cfg.num_layers}", field="S")
        if mb.layers.shape[-1] != getattr(cfg, f"{m}_dim"):
            raise DimensionError(f"{m} backbone dim {mb.layers.shape[-1]} != "
                                 f"{getattr(cfg, f'{m}_dim')}", field=f"{m}_dim")
        if mb.pooler.shape[-1] != cfg.pooler_dim:
            raise DimensionError(f"pooler dim {mb.pooler.shape[-1]} != {cfg.pooler_dim}",
                                 field="pooler_dim")
        layers[m] = mb
    if layers["text"] is None and layers["visual"] is None:
        raise DataError("batch has no features in any modality", field="modality")

    h = T.expand(params["h0"], (B, cfg.tokens, cfg.hidden_dim))
    c = h
    gate_log = [] if log_gates else None
    states = [(h, c)] if trace else []
    for s in range(cfg.num_layers):
        args = []
        for m in ("text", "visual"):
            mb = layers[m]
            if mb is None:
                args.append(None)
            else:
                pres = None if mb.present.all() else mb.present
                args.append((Tensor(mb.layers[s]), mb.key_mask, pres))
        h, c = step(h, c, args[0], args[1], params, override, gate_log)
        if trace:
            states.append((h, c))

    out = h @ params["w_final"]
    if cfg.mode == RET2:
        for m in ("text", "visual"):
            mb = layers[m]
            if mb is None:
                continue
            pooler = mb.pooler[:, None, :]
            if not mb.present.all():
                pooler = np.where(mb.present[:, None, None], pooler, 0.0)
            out = out + Tensor(pooler)
    return EncoderOutput(out, gate_log or [], states)


def encode(text: LayerFeatures, visual: LayerFeatures, params, override=None, log_gates=False,
           trace=False):
    """Encode one query or document; the embedding has shape (k, out_dim).

    Queries and documents go through the same function and parameters.
    """
    rec = CorpusRecord("_", text, visual)
    out = encode_batch(params, collate([rec]), override, log_gates, trace)
    out.embedding = T.reshape(out.embedding, out.embedding.shape[1:])
    return out


def embed(params, records, batch_size=256):
    """Embeddings of ``records`` as a float64 array of shape (n, k, out_dim)."""
    records = list(records)
    if not records:
        raise DataError("no records to embed")
    chunks = []
    with T.no_grad():
        for start in range(0, len(records), batch_size):
            batch = collate(records[start:start + batch_size])
            chunks.append(encode_batch(params, batch).embedding.data)
    return np.concatenate(chunks)


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_MAGIC = b"RET2CKPT"


def save_checkpoint(path, params, temperature=None, meta=None):
    """Write parameters (and optional temperature) as a RET2CKPT file."""
    entries = [{"name": n, "shape": list(t.shape)} for n, t in params]
    arrays = [t.data for _, t in params]
    if temperature is not None:
        entries.append({"name": "temperature", "shape": []})
        arrays.append(np.asarray(float(temperature)))
    header = {"config": params.config.to_dict(), "tensors": entries, "meta": meta or {}}
    _envelope.write_file(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    """Returns ``(params, temperature or None, meta)``."""
    header, payload = _envelope.read_file(path, CHECKPOINT_MAGIC)
    try:
        cfg = CellConfig.from_dict(header["config"])
        entries = header["tensors"]
    except KeyError as exc:
        raise FormatError(f"checkpoint header missing {exc}", field=str(exc)) from None
    expected = _param_shapes(cfg)
    tensors, temperature = {}, None
    for e in entries:
        arr = payload.take(e["shape"], field=e["name"])
        if e["name"] == "temperature":
            temperature = float(arr)
            continue
        if tuple(e["shape"]) != expected.get(e["name"]):
            raise FormatError(f"tensor {e['name']} shape {e['shape']} does not match config",
                              field=e["name"])
        tensors[e["name"]] = Tensor(arr, requires_grad=True)
    payload.finish()
    if set(tensors) != set(expected):
        raise FormatError(f"checkpoint tensors differ from config: "
                          f"{sorted(set(tensors) ^ set(expected))}", field="tensors")
    return FusionCellParams(cfg, {n: tensors[n] for n in expected}), temperature, header.get("meta", {})
