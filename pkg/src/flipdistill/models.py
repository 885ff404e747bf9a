"""Teacher bi-encoder, toy decoder-only student, and LoRA adapters.

The student's frozen projections W0 carry low-rank adapters (A, B); the
A-side activations z = x A^T of a designated last-layer adapter double
as the student's text representations. The teacher is a small
bidirectional encoder whose mean-pooled output dimension equals the
adapters' rank.
"""

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import MATCH, SEP, ANS, YES, NO
from .losses import ConfigError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class InputError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 256
    # student
    student_width: int = 64          # k = d: width of every projection
    student_layers: int = 2
    student_heads: int = 2
    ffn_mult: int = 2
    max_len: int = 40
    # teacher (hidden width doubles as the LoRA rank)
    teacher_dim: int = 16
    teacher_layers: int = 2
    teacher_heads: int = 2
    # adapters
    lora_dropout: float = 0.05
    lora_init_std: float = 0.01
    pool_source: str = "o"           # which last-layer projection's z is pooled: q|k|v|o
    pool_predropout: bool = False    # pool z before the adapter dropout mask

    def rank(self):
        return self.teacher_dim


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PairEncoding:
    r_i: Tensor
    r_j: Tensor
    logits: Tensor        # [a_yes, a_no]
    span_i: tuple
    span_j: tuple


@dataclass
class LoraAdapter:
    a: Tensor             # r x k, the encoder side
    b: Tensor             # d x r, the decoder side
    dropout_rate: float = 0.05

    @classmethod
    def init(cls, d, k, r, rng, std=0.01, dropout_rate=0.05):
        if r > min(d, k):
            raise ConfigError(f"LoRA rank {r} exceeds min(d, k) = {min(d, k)}")
        if r == min(d, k):
            warnings.warn(f"LoRA rank {r} equals min(d, k); expected r strictly smaller")
        a = Tensor(rng.normal(0.0, std, size=(r, k)), requires_grad=True)
        b = Tensor(rng.normal(0.0, std, size=(d, r)), requires_grad=True)
        return cls(a=a, b=b, dropout_rate=dropout_rate)


def lora_forward(w0, adapter, x, training=False, rng=None, want_predrop_z=False):
    """Adapted projection h' = x W0^T + z B^T with z = x A^T.

    Dropout acts on the adapter input only, so z is post-dropout during
    training; pass want_predrop_z to additionally get the clean z.
    Returns (h_prime, z, z_predrop_or_None).
    """
    if x.shape[1] != w0.shape[1] or adapter.a.shape[1] != w0.shape[1]:
        raise T.DimensionError(
            f"lora_forward shapes incompatible: x {x.shape}, W0 {w0.shape}, A {adapter.a.shape}")
    z_pre = None
    if training and adapter.dropout_rate > 0.0:
        keep = 1.0 - adapter.dropout_rate
        mask = (rng.random(x.shape) < keep) / keep
        x_ad = x * Tensor(mask)
        if want_predrop_z:
            z_pre = T.matmul(x, adapter.a.T)
    else:
        x_ad = x
    z = T.matmul(x_ad, adapter.a.T)
    h_prime = T.matmul(x, w0.T) + T.matmul(z, adapter.b.T)
    return h_prime, z, z_pre


def _rms_norm(x, eps=1e-8):
    ms = T.reduce_mean(x * x, axis=1, keepdims=True)
    return x / T.sqrt(ms + eps)


def _sinusoidal_positions(max_len, width):
    pos = np.arange(max_len)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _multi_head_attention(x, q, k, v, n_heads, causal):
    t, width = x.shape
    dh = width // n_heads
    scale = 1.0 / np.sqrt(dh)
    mask = None
    if causal:
        mask = np.triu(np.full((t, t), -1e9), k=1)
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        scores = T.matmul(qh, kh.T) * scale
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = T.softmax(scores, axis=1)
        heads.append(T.matmul(attn, vh))
    return T.concat(heads, axis=1)


class TeacherEncoder:
    """Small bidirectional encoder; mean-pooled output of width teacher_dim.

    No positional encodings: attention plus mean pooling makes the
    representation a function of the token multiset, which suits topical
    matching at toy scale and keeps pooling permutation-invariant.
    """

    def __init__(self, cfg: ModelConfig, rng):
        r = cfg.teacher_dim
        std = 1.0 / np.sqrt(r)
        self.cfg = cfg
        self.frozen = False
        self.attention_enabled = True  # diagnostic switch
        self.emb = Tensor(rng.normal(0, std, size=(cfg.vocab_size, r)), requires_grad=True)
        self.layers = []
        hid = cfg.ffn_mult * r
        for _ in range(cfg.teacher_layers):
            self.layers.append({
                "wq": Tensor(rng.normal(0, std, size=(r, r)), requires_grad=True),
                "wk": Tensor(rng.normal(0, std, size=(r, r)), requires_grad=True),
                "wv": Tensor(rng.normal(0, std, size=(r, r)), requires_grad=True),
                "wo": Tensor(rng.normal(0, std, size=(r, r)), requires_grad=True),
                "w1": Tensor(rng.normal(0, std, size=(hid, r)), requires_grad=True),
                "w2": Tensor(rng.normal(0, 1.0 / np.sqrt(hid), size=(r, hid)), requires_grad=True),
            })

    def parameters(self):
        params = {"emb": self.emb}
        for li, layer in enumerate(self.layers):
            for name, p in layer.items():
                params[f"layer{li}.{name}"] = p
        return params

    def freeze(self):
        self.frozen = True
        for p in self.parameters().values():
            p.requires_grad = False
            p._parents = ()
            p._backward = None
            p.grad = None

    def encode(self, tokens):
        """Mean over token positions of the final layer's outputs."""
        if len(tokens) == 0:
            raise InputError("teacher_encode: empty token sequence")
        ids = np.asarray([t if 0 <= t < self.cfg.vocab_size else 0 for t in tokens])
        x = self.emb[ids]
        for layer in self.layers:
            if self.attention_enabled:
                h = _rms_norm(x)
                q = T.matmul(h, layer["wq"].T)
                k = T.matmul(h, layer["wk"].T)
                v = T.matmul(h, layer["wv"].T)
                attn = _multi_head_attention(h, q, k, v, self.cfg.teacher_heads, causal=False)
                x = x + T.matmul(attn, layer["wo"].T)
            h2 = _rms_norm(x)
            x = x + T.matmul(T.relu(T.matmul(h2, layer["w1"].T)), layer["w2"].T)
        x = _rms_norm(x)
        return T.reduce_mean(x, axis=0)


class StudentTransformer:
    """Toy decoder-only transformer: frozen base, trainable LoRA on the
    attention projections, yes/no readout from the final position."""

    def __init__(self, cfg: ModelConfig, rng):
        k = cfg.student_width
        r = cfg.rank()
        std = 1.0 / np.sqrt(k)
        self.cfg = cfg
        self.emb = Tensor(rng.normal(0, std, size=(cfg.vocab_size, k)))
        self.pos = _sinusoidal_positions(cfg.max_len, k)
        self.lm_head = Tensor(rng.normal(0, std, size=(cfg.vocab_size, k)))
        hid = cfg.ffn_mult * k
        self.layers = []
        for _ in range(cfg.student_layers):
            layer = {
                "w1": Tensor(rng.normal(0, std, size=(hid, k))),
                "w2": Tensor(rng.normal(0, 1.0 / np.sqrt(hid), size=(k, hid))),
            }
            for proj in ("q", "k", "v", "o"):
                layer[f"w{proj}"] = Tensor(rng.normal(0, std, size=(k, k)))
                layer[f"lora_{proj}"] = LoraAdapter.init(
                    k, k, r, rng, std=cfg.lora_init_std, dropout_rate=cfg.lora_dropout)
            self.layers.append(layer)

    def parameters(self):
        """All parameter tensors, frozen and trainable alike."""
        params = {"emb": self.emb, "lm_head": self.lm_head}
        for li, layer in enumerate(self.layers):
            for name, p in layer.items():
                if isinstance(p, LoraAdapter):
                    params[f"layer{li}.{name}.a"] = p.a
                    params[f"layer{li}.{name}.b"] = p.b
                else:
                    params[f"layer{li}.{name}"] = p
        return params

    def trainable_parameters(self):
        return {n: p for n, p in self.parameters().items() if p.requires_grad}

    def frozen_fraction(self):
        total = sum(p.size for p in self.parameters().values())
        trainable = sum(p.size for p in self.trainable_parameters().values())
        return 1.0 - trainable / total

    def forward(self, tokens, training=False, rng=None):
        """Run the causal stack; returns ([a_yes, a_no] logits, pooled-source z)."""
        tks = len(tokens)
        if tks == 0:
            raise InputError("student forward: empty token sequence")
        if tks > self.cfg.max_len:
            raise InputError(f"sequence length {tks} exceeds max_len {self.cfg.max_len}")
        ids = np.asarray([t if 0 <= t < self.cfg.vocab_size else 0 for t in tokens])
        x = self.emb[ids] + Tensor(self.pos[:tks])
        z_pool = None
        last = len(self.layers) - 1
        for li, layer in enumerate(self.layers):
            h = _rms_norm(x)
            zs = {}
            outs = {}
            for proj in ("q", "k", "v"):
                want = li == last and self.cfg.pool_source == proj
                outs[proj], z, z_pre = lora_forward(
                    layer[f"w{proj}"], layer[f"lora_{proj}"], h,
                    training=training, rng=rng,
                    want_predrop_z=want and self.cfg.pool_predropout)
                zs[proj] = z_pre if (want and self.cfg.pool_predropout) else z
            attn = _multi_head_attention(
                h, outs["q"], outs["k"], outs["v"], self.cfg.student_heads, causal=True)
            want = li == last and self.cfg.pool_source == "o"
            o, z, z_pre = lora_forward(
                layer["wo"], layer["lora_o"], attn,
                training=training, rng=rng,
                want_predrop_z=want and self.cfg.pool_predropout)
            zs["o"] = z_pre if (want and self.cfg.pool_predropout) else z
            x = x + o
            h2 = _rms_norm(x)
            x = x + T.matmul(T.relu(T.matmul(h2, layer["w1"].T)), layer["w2"].T)
            if li == last:
                z_pool = zs[self.cfg.pool_source]
        x = _rms_norm(x)
        final = x[tks - 1]
        logits = T.matmul(self.lm_head[[YES, NO]], T.reshape(final, (-1, 1)))
        return T.reshape(logits, (2,)), z_pool

    def encode_pair(self, text_i, text_j, training=False, rng=None):
        """Template the pair, run the stack, pool span representations."""
        prompt, span_i, span_j = build_prompt(text_i, text_j, self.cfg.max_len)
        logits, z = self.forward(prompt, training=training, rng=rng)
        r_i = T.reduce_mean(z[span_i[0]:span_i[1]], axis=0)
        r_j = T.reduce_mean(z[span_j[0]:span_j[1]], axis=0)
        return PairEncoding(r_i=r_i, r_j=r_j, logits=logits, span_i=span_i, span_j=span_j)


def build_prompt(text_i, text_j, max_len):
    """`[MATCH] <text_i> [SEP] <text_j> [ANS]` with half-open span ranges."""
    if not text_i or not text_j:
        raise InputError("both texts must be non-empty")
    prompt = [MATCH] + list(text_i) + [SEP] + list(text_j) + [ANS]
    if len(prompt) > max_len:
        raise InputError(f"templated prompt length {len(prompt)} exceeds max_len {max_len}")
    span_i = (1, 1 + len(text_i))
    span_j = (2 + len(text_i), 2 + len(text_i) + len(text_j))
    return prompt, span_i, span_j


def p_yes(logits):
    """Stable softmax probability of the yes logit."""
    return T.softmax(T.reshape(logits, (1, 2)), axis=1)[0, 0]


# -- checkpoints ---------------------------------------------------------
#
# Format (version 1): the magic line b"FLIPCKPT1\n", an 8-byte big-endian
# header length, a JSON header {version, config_hash, params: [{name,
# shape}...], ...}, then the raw little-endian float64 bytes of each
# parameter in header order. Fully deterministic bytes for identical
# parameters (no embedded timestamps).

_MAGIC = b"FLIPCKPT1\n"


def save_checkpoint(path, model, cfg, extra_meta=None):
    params = model.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(cfg),
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in params.items()],
    }
    if extra_meta:
        header.update(extra_meta)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(8, "big"))
        f.write(blob)
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, model, cfg):
    try:
        with open(path, "rb") as f:
            if f.read(len(_MAGIC)) != _MAGIC:
                raise CheckpointError(f"not a checkpoint file: {path}")
            n = int.from_bytes(f.read(8), "big")
            header = json.loads(f.read(n).decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
            if header.get("config_hash") != config_hash(cfg):
                raise CheckpointError(
                    f"checkpoint config hash {header.get('config_hash')} does not match "
                    f"current config {config_hash(cfg)}")
            params = model.parameters()
            stored = {e["name"]: tuple(e["shape"]) for e in header["params"]}
            if set(stored) != set(params):
                raise CheckpointError("checkpoint parameter names do not match the model")
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = f.read(count * 8)
                params[entry["name"]].data = np.frombuffer(
                    buf, dtype="<f8").reshape(shape).copy()
            return header
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
