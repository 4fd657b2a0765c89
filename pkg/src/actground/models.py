"""The learned modules: encoders E(s, s') -> a, decoders D(s, a) -> s',
and the language module L(c) -> a, for both tasks.

All modules hold named Parameters and are constructed from an
architecture config plus a representation spec, so paper-scale and
desk-scale dimensions are both expressible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .blocks import BlocksConfig, encode_grid
from .checkpoint import checkpoint_load, checkpoint_save
from .strings import BOS, CHAR_VOCAB, EOS, PAD, decode_chars, encode_chars


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ReprSpec:
    """Action-representation layout: continuous vector or n x k categoricals."""

    mode: str               # "continuous" | "discrete"
    dim: int = 0            # continuous dimensionality
    n: int = 0              # discrete variable count
    k: int = 0              # values per discrete variable

    def __post_init__(self):
        if self.mode == "continuous":
            if self.dim < 1:
                raise ModelError("continuous representation needs dim >= 1")
        elif self.mode == "discrete":
            if self.n < 1 or self.k < 2:
                raise ModelError("discrete representation needs n >= 1, k >= 2")
        else:
            raise ModelError(f"unknown representation mode {self.mode!r}")

    @property
    def flat_dim(self):
        return self.dim if self.mode == "continuous" else self.n * self.k

    def to_dict(self):
        return {"mode": self.mode, "dim": self.dim, "n": self.n, "k": self.k}

    @staticmethod
    def from_dict(d):
        return ReprSpec(**d)

    @staticmethod
    def continuous(dim):
        return ReprSpec("continuous", dim=dim)

    @staticmethod
    def discrete(n=20, k=30):
        return ReprSpec("discrete", n=n, k=k)


@dataclass(frozen=True)
class BlockArch:
    conv_dim: int = 200
    ff_dim: int = 200
    dropout: float = 0.5
    pooling: str = "mean"   # or "max"
    # encoder conv width; 0 = same as conv_dim.  With spatial pooling each
    # distinguishable (position, color, action) combination needs its own
    # channel, so the encoder often needs to be wider than the decoder.
    enc_conv_dim: int = 0

    @property
    def encoder_conv_dim(self):
        return self.enc_conv_dim or self.conv_dim


@dataclass(frozen=True)
class StringArch:
    char_embed_dim: int = 50
    hidden_dim: int = 500
    ff_dim: int = 500
    # Also concatenate the input LSTM's final state to every output step
    # (not just the init layer); accelerates copy learning at small scale.
    feed_context: bool = False
    # Dot-product attention from the output LSTM over the input LSTM's
    # per-character states; lets the decoder copy unchanged characters
    # without squeezing them through the final-state bottleneck.
    attention: bool = False


@dataclass(frozen=True)
class LangArch:
    word_embed_dim: int = 100
    hidden_dim: int = 200


# ---------------------------------------------------------------------------
# parameter plumbing


class Module:
    """Named-parameter container with checkpoint support."""

    def __init__(self, prefix, dtype):
        self.prefix = prefix
        self.dtype = dtype
        self._params = {}

    def _param(self, name, shape, rng, fan_in=None, init="fan_in"):
        full = f"{self.prefix}.{name}"
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "lstm_bias":
            # forget-gate bias starts at 1 (gate layout: i, f, g, o)
            data = np.zeros(shape, dtype=self.dtype)
            hid = shape[0] // 4
            data[hid:2 * hid] = 1.0
        else:
            scale = 1.0 / np.sqrt(fan_in if fan_in else shape[0])
            data = rng.uniform(-scale, scale, size=shape).astype(self.dtype)
        p = Parameter(data, full, dtype=self.dtype)
        self._params[full] = p
        return p

    def parameters(self):
        return list(self._params.values())

    def param_dict(self):
        return dict(self._params)

    def load_values(self, values):
        for name, p in self._params.items():
            if name not in values:
                raise ModelError(f"missing parameter {name!r} in checkpoint")
            if values[name].shape != p.data.shape:
                raise ModelError(
                    f"shape mismatch for {name!r}: "
                    f"{values[name].shape} vs {p.data.shape}")
            p.data = values[name].astype(self.dtype, copy=True)

    def copy_of_values(self):
        return {n: p.data.copy() for n, p in self._params.items()}


def save_bundle(modules, path, config=None):
    params = {}
    for m in modules:
        params.update(m.param_dict())
    checkpoint_save(params, path, config=config)


def load_bundle(modules, path):
    expect = {}
    for m in modules:
        expect.update({n: p.data.shape for n, p in m.param_dict().items()})
    values, config = checkpoint_load(path, expect_shapes=expect)
    for m in modules:
        m.load_values(values)
    return config


# ---------------------------------------------------------------------------
# representation realization


def repr_realize(a_logits: Tensor, spec: ReprSpec, train: bool, rng=None,
                 noise_override=None):
    """Continuous: identity.  Discrete train: straight-through
    Gumbel-Softmax sample.  Discrete eval: deterministic argmax mode."""
    if spec.mode == "continuous":
        return a_logits
    B = a_logits.shape[0]
    logits = ad.reshape(a_logits, (B * spec.n, spec.k))
    if train:
        noise = None if noise_override is None else \
            np.reshape(noise_override, (B * spec.n, spec.k))
        one_hot = ad.gumbel_softmax_st(logits, rng=rng, noise_override=noise)
    else:
        flat = logits.data
        hard = np.zeros_like(flat)
        hard[np.arange(flat.shape[0]), flat.argmax(axis=1)] = 1.0
        one_hot = Tensor(hard)
    return ad.reshape(one_hot, (B, spec.n * spec.k))


def discrete_mode_indices(a_logits_data, spec: ReprSpec):
    """Per-variable argmax indices, (B, n)."""
    B = a_logits_data.shape[0]
    return a_logits_data.reshape(B, spec.n, spec.k).argmax(axis=-1)


# ---------------------------------------------------------------------------
# block-stacking modules


def position_planes(env: BlocksConfig, dtype=np.float32):
    """Constant one-hot column/height planes concatenated to every conv
    input.  Convolutions are translation-equivariant, so without these an
    interior column is identifiable only through edge-padding effects and
    transitions differing only in absolute position collapse to the same
    code."""
    C, H = env.num_columns, env.max_height
    out = np.zeros((C, H, C + H), dtype=dtype)
    for ci in range(C):
        out[ci, :, ci] = 1.0
    for hi in range(H):
        out[:, hi, C + hi] = 1.0
    return out


def _with_positions(s_enc, planes):
    B = s_enc.shape[0]
    tiled = np.broadcast_to(planes, (B,) + planes.shape)
    return np.concatenate([s_enc, tiled], axis=-1)


class BlockEncoder(Module):
    """Shared conv over s and s', feature-map subtraction, spatial pooling,
    then a one-hidden-layer feedforward to the representation."""

    def __init__(self, env: BlocksConfig, arch: BlockArch, spec: ReprSpec,
                 rng, dtype=np.float32, prefix="E"):
        super().__init__(prefix, dtype)
        self.env = env
        self.arch = arch
        self.spec = spec
        self.pos = position_planes(env, dtype)
        cin = env.num_channels + env.num_columns + env.max_height
        F = arch.encoder_conv_dim
        # raw s'-s difference joins the pooled conv features in the FF: the
        # pooled pathway alone never learns which column changed (no gradient
        # pulls position into the code while the decoder ignores it, and none
        # pulls the decoder while the code lacks it)
        self.diff_dim = env.num_columns * env.max_height * env.num_channels
        self.conv_w = self._param("conv.w", (3, 3, cin, F), rng, fan_in=9 * cin)
        self.conv_b = self._param("conv.b", (F,), rng, init="zeros")
        self.ff1_w = self._param("ff1.w", (F + self.diff_dim, arch.ff_dim), rng)
        self.ff1_b = self._param("ff1.b", (arch.ff_dim,), rng, init="zeros")
        self.ff2_w = self._param("ff2.w", (arch.ff_dim, spec.flat_dim), rng)
        self.ff2_b = self._param("ff2.b", (spec.flat_dim,), rng, init="zeros")

    def encode_batch(self, grids):
        return np.stack([encode_grid(g, self.env) for g in grids]).astype(self.dtype)

    def forward(self, s_enc, sp_enc, train=False, rng=None):
        """s_enc, sp_enc: (B, C, H, ch) one-hot arrays -> (B, flat) logits."""
        if s_enc.shape != sp_enc.shape:
            raise ModelError(f"state shapes differ: {s_enc.shape} vs {sp_enc.shape}")
        f_s = ad.relu(ad.conv2d_same(Tensor(_with_positions(s_enc, self.pos)),
                                     self.conv_w, self.conv_b))
        f_sp = ad.relu(ad.conv2d_same(Tensor(_with_positions(sp_enc, self.pos)),
                                      self.conv_w, self.conv_b))
        diff = ad.sub(f_sp, f_s)
        pool = ad.max_pool_spatial(diff) if self.arch.pooling == "max" \
            else ad.mean_pool_spatial(diff)
        raw = Tensor((sp_enc - s_enc).reshape(len(s_enc), self.diff_dim))
        h = ad.relu(ad.add(ad.matmul(ad.concat([pool, raw], axis=-1),
                                     self.ff1_w), self.ff1_b))
        h = ad.dropout(h, self.arch.dropout, train, rng)
        return ad.add(ad.matmul(h, self.ff2_w), self.ff2_b)


class BlockDecoder(Module):
    """Two conv layers over s; the representation is broadcast to every
    position and concatenated into the second layer's input; per-cell
    softmax over colors + empty."""

    def __init__(self, env: BlocksConfig, arch: BlockArch, spec: ReprSpec,
                 rng, dtype=np.float32, prefix="D"):
        super().__init__(prefix, dtype)
        self.env = env
        self.arch = arch
        self.spec = spec
        ch = env.num_channels
        self.pos = position_planes(env, dtype)
        cin1 = ch + env.num_columns + env.max_height
        F = arch.conv_dim
        self.conv1_w = self._param("conv1.w", (3, 3, cin1, F), rng,
                                   fan_in=9 * cin1)
        self.conv1_b = self._param("conv1.b", (F,), rng, init="zeros")
        cin2 = F + spec.flat_dim
        self.conv2_w = self._param("conv2.w", (3, 3, cin2, F), rng, fan_in=9 * cin2)
        self.conv2_b = self._param("conv2.b", (F,), rng, init="zeros")
        # per-cell projection to color logits; the ReLU between the second
        # conv and this layer lets cells pair their own position/context
        # features with the broadcast code (a single linear layer after the
        # code injection cannot express that conjunction)
        self.out_w = self._param("out.w", (F, ch), rng)
        self.out_b = self._param("out.b", (ch,), rng, init="zeros")

    def logits(self, s_enc, a, train=False, rng=None):
        """(B, C, H, ch) per-cell logits over colors + empty."""
        B, C, H, _ = s_enc.shape
        if a.shape != (B, self.spec.flat_dim):
            raise ModelError(
                f"representation shape {a.shape} != ({B}, {self.spec.flat_dim})")
        f = ad.relu(ad.conv2d_same(Tensor(_with_positions(s_enc, self.pos)),
                                   self.conv1_w, self.conv1_b))
        f = ad.dropout(f, self.arch.dropout, train, rng)
        a_map = ad.reshape(ad.broadcast_spatial(a, C, H), (B, C, H, self.spec.flat_dim))
        stacked = ad.concat([f, a_map], axis=-1)
        g = ad.relu(ad.conv2d_same(stacked, self.conv2_w, self.conv2_b))
        F = self.arch.conv_dim
        flat = ad.reshape(g, (B * C * H, F))
        out = ad.add(ad.matmul(flat, self.out_w), self.out_b)
        return ad.reshape(out, (B, C, H, self.env.num_channels))

    def nll(self, s_enc, a, target_indices, train=False, rng=None):
        """Mean (over batch) summed per-cell NLL of the target grid."""
        B, C, H, ch = s_enc.shape
        logits = self.logits(s_enc, a, train=train, rng=rng)
        flat = ad.reshape(logits, (B * C * H, ch))
        targets = np.asarray(target_indices).reshape(-1)
        total = ad.masked_cross_entropy_sum(
            flat, targets, np.ones(B * C * H, dtype=s_enc.dtype))
        return ad.mul(total, Tensor(np.asarray(1.0 / B, dtype=s_enc.dtype)))

    def predict_indices(self, s_enc, a):
        """Per-cell argmax prediction, (B, C, H) channel indices."""
        with ad.no_grad():
            logits = self.logits(s_enc, a, train=False)
        return logits.data.argmax(axis=-1)


# ---------------------------------------------------------------------------
# LSTM helpers


def run_lstm(table, ids, lengths, wx, wh, b, extra=None, dtype=np.float32,
             return_all=False):
    """Run an LSTM over padded id sequences; returns final (h, c).

    ids: (B, T) ints padded with PAD; lengths: (B,).  When `extra` is
    given, it is concatenated to the input embedding at every step.
    States freeze once a sequence's length is exhausted.  With
    `return_all`, also returns the per-step hidden states as (B, T, hid).
    """
    B, T = ids.shape
    hid = wh.shape[0]
    h = Tensor(np.zeros((B, hid), dtype=dtype))
    c = Tensor(np.zeros((B, hid), dtype=dtype))
    uniform = lengths.min() == lengths.max()
    steps = []
    for t in range(T):
        x = ad.embedding(table, ids[:, t])
        if extra is not None:
            x = ad.concat([x, extra], axis=-1)
        h_new, c_new = ad.lstm_step(x, h, c, wx, wh, b)
        if uniform:
            h, c = h_new, c_new
        else:
            m = Tensor((t < lengths).astype(dtype)[:, None])
            keep = Tensor(1.0 - m.data)
            h = ad.add(ad.mul(m, h_new), ad.mul(keep, h))
            c = ad.add(ad.mul(m, c_new), ad.mul(keep, c))
        if return_all:
            steps.append(ad.reshape(h, (B, 1, hid)))
    if return_all:
        return h, c, ad.concat(steps, axis=1)
    return h, c


def pad_sequences(seqs, pad=PAD):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = max(1, int(lengths.max()))
    out = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


# ---------------------------------------------------------------------------
# string-manipulation modules


class StringEncoder(Module):
    """Tied-parameter LSTMs over s and s'; final states concatenated into a
    one-hidden-layer feedforward."""

    def __init__(self, arch: StringArch, spec: ReprSpec, rng,
                 dtype=np.float32, prefix="E"):
        super().__init__(prefix, dtype)
        self.arch = arch
        self.spec = spec
        E, H = arch.char_embed_dim, arch.hidden_dim
        self.embed = self._param("embed", (CHAR_VOCAB, E), rng, fan_in=E)
        self.wx = self._param("lstm.wx", (E, 4 * H), rng)
        self.wh = self._param("lstm.wh", (H, 4 * H), rng)
        self.b = self._param("lstm.b", (4 * H,), rng, init="lstm_bias")
        self.ff1_w = self._param("ff1.w", (2 * H, arch.ff_dim), rng)
        self.ff1_b = self._param("ff1.b", (arch.ff_dim,), rng, init="zeros")
        self.ff2_w = self._param("ff2.w", (arch.ff_dim, spec.flat_dim), rng)
        self.ff2_b = self._param("ff2.b", (spec.flat_dim,), rng, init="zeros")

    def forward(self, s_strs, sp_strs, train=False, rng=None):
        ids_s, len_s = pad_sequences([encode_chars(s) for s in s_strs])
        ids_sp, len_sp = pad_sequences([encode_chars(s) for s in sp_strs])
        # the same LSTM parameters read both sequences (tied)
        h_s, _ = run_lstm(self.embed, ids_s, len_s, self.wx, self.wh, self.b,
                          dtype=self.dtype)
        h_sp, _ = run_lstm(self.embed, ids_sp, len_sp, self.wx, self.wh, self.b,
                           dtype=self.dtype)
        h = ad.relu(ad.add(ad.matmul(ad.concat([h_s, h_sp], axis=-1),
                                     self.ff1_w), self.ff1_b))
        return ad.add(ad.matmul(h, self.ff2_w), self.ff2_b)


class StringDecoder(Module):
    """LSTM over s; a linear layer combining the final state with the
    representation initializes an output LSTM; the representation is also
    concatenated to the previous-output embedding at every step.  Optional
    dot-product attention over the input states (arch.attention)."""

    def __init__(self, arch: StringArch, spec: ReprSpec, rng,
                 dtype=np.float32, prefix="D", max_len=48):
        super().__init__(prefix, dtype)
        self.arch = arch
        self.spec = spec
        self.max_len = max_len
        E, H = arch.char_embed_dim, arch.hidden_dim
        flat = spec.flat_dim
        self.embed = self._param("embed", (CHAR_VOCAB, E), rng, fan_in=E)
        self.in_wx = self._param("in_lstm.wx", (E, 4 * H), rng)
        self.in_wh = self._param("in_lstm.wh", (H, 4 * H), rng)
        self.in_b = self._param("in_lstm.b", (4 * H,), rng, init="lstm_bias")
        self.init_w = self._param("init.w", (H + flat, 2 * H), rng)
        self.init_b = self._param("init.b", (2 * H,), rng, init="zeros")
        in_dim = E + flat + (H if arch.feed_context else 0)
        self.out_wx = self._param("out_lstm.wx", (in_dim, 4 * H), rng)
        self.out_wh = self._param("out_lstm.wh", (H, 4 * H), rng)
        self.out_b = self._param("out_lstm.b", (4 * H,), rng, init="lstm_bias")
        if arch.attention:
            self.attn_w = self._param("attn.w", (2 * H, H), rng)
            self.attn_b = self._param("attn.b", (H,), rng, init="zeros")
        self.proj_w = self._param("proj.w", (H, CHAR_VOCAB), rng)
        self.proj_b = self._param("proj.b", (CHAR_VOCAB,), rng, init="zeros")

    def _init_state(self, s_strs, a):
        ids, lengths = pad_sequences([encode_chars(s) for s in s_strs])
        if self.arch.attention:
            h_in, _, states = run_lstm(self.embed, ids, lengths, self.in_wx,
                                       self.in_wh, self.in_b,
                                       dtype=self.dtype, return_all=True)
            # padded positions repeat the final state; bias them out
            bias = np.where(np.arange(ids.shape[1])[None] < lengths[:, None],
                            0.0, -1e9).astype(self.dtype)
            attn = (states, Tensor(bias))
        else:
            h_in, _ = run_lstm(self.embed, ids, lengths, self.in_wx,
                               self.in_wh, self.in_b, dtype=self.dtype)
            attn = None
        hc = ad.add(ad.matmul(ad.concat([h_in, a], axis=-1), self.init_w),
                    self.init_b)
        H = self.arch.hidden_dim
        ctx = h_in if self.arch.feed_context else None
        return ad.narrow(hc, 1, 0, H), ad.narrow(hc, 1, H, H), ctx, attn

    def _step_input(self, prev_ids, a, ctx):
        x = ad.concat([ad.embedding(self.embed, prev_ids), a], axis=-1)
        if ctx is not None:
            x = ad.concat([x, ctx], axis=-1)
        return x

    def _step_output(self, h, attn):
        if attn is not None:
            states, bias = attn
            B, T, H = states.shape
            scores = ad.reshape(ad.bmm(states, ad.reshape(h, (B, H, 1))),
                                (B, T))
            scores = ad.mul(scores, Tensor(
                np.asarray(1.0 / np.sqrt(H), dtype=self.dtype)))
            alpha = ad.softmax(ad.add(scores, bias))
            ctx_t = ad.reshape(ad.bmm(ad.reshape(alpha, (B, 1, T)), states),
                               (B, H))
            h = ad.tanh(ad.add(ad.matmul(ad.concat([h, ctx_t], axis=-1),
                                         self.attn_w), self.attn_b))
        return ad.add(ad.matmul(h, self.proj_w), self.proj_b)

    def nll(self, s_strs, a, sp_strs, train=False, rng=None):
        """Mean (over batch) summed NLL of s' characters plus end symbol."""
        B = len(s_strs)
        h, c, ctx, attn = self._init_state(s_strs, a)
        targets = [list(encode_chars(sp)) + [EOS] for sp in sp_strs]
        tgt, lengths = pad_sequences(targets)
        inputs = np.full_like(tgt, BOS)
        inputs[:, 1:] = tgt[:, :-1]
        total = None
        T = tgt.shape[1]
        for t in range(T):
            x = self._step_input(inputs[:, t], a, ctx)
            h, c = ad.lstm_step(x, h, c, self.out_wx, self.out_wh, self.out_b)
            logits = self._step_output(h, attn)
            mask = (t < lengths).astype(self.dtype)
            step = ad.masked_cross_entropy_sum(logits, tgt[:, t], mask)
            total = step if total is None else ad.add(total, step)
        return ad.mul(total, Tensor(np.asarray(1.0 / B, dtype=self.dtype)))

    def greedy_decode(self, s_strs, a):
        """Argmax decoding until the end symbol or the length cap."""
        B = len(s_strs)
        with ad.no_grad():
            h, c, ctx, attn = self._init_state(s_strs, a)
            prev = np.full(B, BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            rows = [[] for _ in range(B)]
            for _ in range(self.max_len):
                x = self._step_input(prev, a, ctx)
                h, c = ad.lstm_step(x, h, c, self.out_wx, self.out_wh, self.out_b)
                logits = self._step_output(h, attn).data
                prev = logits.argmax(axis=-1)
                for i in range(B):
                    if not done[i]:
                        rows[i].append(int(prev[i]))
                        if prev[i] == EOS:
                            done[i] = True
                if done.all():
                    break
        return [decode_chars(r) for r in rows]


# ---------------------------------------------------------------------------
# language module


UNK = "<unk>"


class Vocab:
    """Token vocabulary built from training commands; index 0 is UNK."""

    def __init__(self, tokens=()):
        self.index = {UNK: 0}
        for t in tokens:
            if t not in self.index:
                self.index[t] = len(self.index)

    @staticmethod
    def from_commands(commands):
        v = Vocab()
        for cmd in commands:
            for tok in cmd:
                if tok not in v.index:
                    v.index[tok] = len(v.index)
        return v

    def __len__(self):
        return len(self.index)

    def encode(self, tokens):
        return np.array([self.index.get(t, 0) for t in tokens], dtype=np.int64)

    def to_list(self):
        return [t for t, _ in sorted(self.index.items(), key=lambda kv: kv[1])]

    @staticmethod
    def from_list(tokens):
        v = Vocab.__new__(Vocab)
        v.index = {t: i for i, t in enumerate(tokens)}
        return v


class LanguageModule(Module):
    """Word embeddings -> LSTM -> projection from the final cell state."""

    def __init__(self, vocab_size, arch: LangArch, spec: ReprSpec, rng,
                 dtype=np.float32, prefix="L"):
        super().__init__(prefix, dtype)
        self.arch = arch
        self.spec = spec
        self.vocab_size = vocab_size
        E, H = arch.word_embed_dim, arch.hidden_dim
        self.embed = self._param("embed", (vocab_size, E), rng, fan_in=E)
        self.wx = self._param("lstm.wx", (E, 4 * H), rng)
        self.wh = self._param("lstm.wh", (H, 4 * H), rng)
        self.b = self._param("lstm.b", (4 * H,), rng, init="lstm_bias")
        self.proj_w = self._param("proj.w", (H, spec.flat_dim), rng)
        self.proj_b = self._param("proj.b", (spec.flat_dim,), rng, init="zeros")

    def forward(self, token_id_seqs, train=False, rng=None):
        """token_id_seqs: list of int arrays -> (B, flat) logits."""
        if any(len(s) == 0 for s in token_id_seqs):
            raise ModelError("empty command")
        ids, lengths = pad_sequences(token_id_seqs)
        _, c = run_lstm(self.embed, ids, lengths, self.wx, self.wh, self.b,
                        dtype=self.dtype)
        return ad.add(ad.matmul(c, self.proj_w), self.proj_b)
