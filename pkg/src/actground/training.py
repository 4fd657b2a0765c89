"""Two-phase training: environment learning (conditional autoencoder over
language-free transitions) and language learning (commands through the
pre-trained decoder, with optional encoder-matching loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import BlocksConfig, encode_grid, grid_to_indices, transition_stream
from .models import ReprSpec, discrete_mode_indices, repr_realize
from .optim import AdamState, adam_step, clear_grads, clip_grad_norm
from .strings import StringsConfig, build_env_batch, load_dictionary


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class EnvLearnConfig:
    total_batches: int = 20_000       # paper scale: 500,000
    batch_size: int = 20
    lr: float = 0.001
    clip_norm: float = 0.0            # global grad-norm clip; 0 disables
    trace_every: int = 200

    def __post_init__(self):
        if self.total_batches <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise TrainingError("EnvLearnConfig values must be positive")
        if self.clip_norm < 0:
            raise TrainingError("clip_norm must be >= 0")


@dataclass(frozen=True)
class LangLearnConfig:
    lam: float = 0.0                  # encoder matching weight; 0.01 when on
    decoder_frozen: bool = True       # blocks: frozen; strings: fine-tuned
    epochs_per_new_example: int = 50  # online-harness convergence recipe
    batch_size: int = 1
    lr: float = 0.001
    # data-size sweep convergence recipe
    sweep_epochs: int = 150
    sweep_batch_size: int = 16
    sweep_patience: int = 5           # epochs of 100% train exact match

    def __post_init__(self):
        if self.lam < 0:
            raise TrainingError("encoder matching weight must be >= 0")


def freeze(module):
    for p in module.parameters():
        p.requires_grad = False


def unfreeze(module):
    for p in module.parameters():
        p.requires_grad = True


def _check_loss(loss, step):
    v = loss.item()
    if not np.isfinite(v):
        raise TrainingError(f"non-finite loss {v} at step {step}")
    return v


# ---------------------------------------------------------------------------
# environment learning


def env_learn(task, enc, dec, cfg: EnvLearnConfig, rng, env_cfg=None,
              sample_batch=None):
    """Joint conditional-autoencoder training of (E, D) on fresh batches.

    task: "blocks" or "strings".  `sample_batch(rng)` overrides the data
    source (used by tests); by default fresh transitions are generated
    every batch.  Returns the loss trace [(step, loss), ...].
    """
    spec = enc.spec
    data_rng = rng.substream("data")
    gumbel_rng = rng.substream("gumbel")
    drop_rng = rng.substream("dropout")
    if sample_batch is None:
        if task == "blocks":
            env_cfg = env_cfg or BlocksConfig()
            stream = transition_stream(data_rng, cfg.batch_size, env_cfg)
            sample_batch = lambda _rng: [(t.s, t.s_prime) for t in next(stream)]
        elif task == "strings":
            env_cfg = env_cfg or StringsConfig()
            words = load_dictionary(max_len=env_cfg.max_state_len)
            sample_batch = lambda _rng: [
                (p.s, p.s_prime)
                for p in build_env_batch(_rng, cfg.batch_size, words, env_cfg)]
        else:
            raise TrainingError(f"unknown task {task!r}")

    opt = AdamState(enc.parameters() + dec.parameters(), lr=cfg.lr)
    trace = []
    for step in range(cfg.total_batches):
        pairs = sample_batch(data_rng)
        if task == "blocks":
            s_enc = enc.encode_batch([s for s, _ in pairs])
            sp_enc = enc.encode_batch([sp for _, sp in pairs])
            tgt = np.stack([grid_to_indices(sp, env_cfg) for _, sp in pairs])
            a_logits = enc.forward(s_enc, sp_enc, train=True, rng=drop_rng)
            a = repr_realize(a_logits, spec, train=True, rng=gumbel_rng)
            loss = dec.nll(s_enc, a, tgt, train=True, rng=drop_rng)
        else:
            s_list = [s for s, _ in pairs]
            sp_list = [sp for _, sp in pairs]
            a_logits = enc.forward(s_list, sp_list, train=True, rng=drop_rng)
            a = repr_realize(a_logits, spec, train=True, rng=gumbel_rng)
            loss = dec.nll(s_list, a, sp_list, train=True, rng=drop_rng)
        v = _check_loss(loss, step)
        if step % cfg.trace_every == 0 or step == cfg.total_batches - 1:
            trace.append((step, v))
        loss.backward()
        if cfg.clip_norm > 0:
            clip_grad_norm(opt.params, cfg.clip_norm)
        adam_step(opt)
    return trace


def eval_representation(enc, spec: ReprSpec, pairs, task, env_cfg=None):
    """Eval-mode action representation for (s, s') pairs -> Tensor (B, flat)."""
    with ad.no_grad():
        if task == "blocks":
            s_enc = enc.encode_batch([s for s, _ in pairs])
            sp_enc = enc.encode_batch([sp for _, sp in pairs])
            logits = enc.forward(s_enc, sp_enc)
        else:
            logits = enc.forward([s for s, _ in pairs], [sp for _, sp in pairs])
    return repr_realize(logits, spec, train=False), logits.data


def blocks_recon_accuracy(enc, dec, pairs, env_cfg, batch_size=64):
    """Exact-match rate of argmax-decoding D(s, E(s, s')) against s'."""
    correct = 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        a, _ = eval_representation(enc, enc.spec, chunk, "blocks", env_cfg)
        s_enc = enc.encode_batch([s for s, _ in chunk])
        pred = dec.predict_indices(s_enc, a)
        tgt = np.stack([grid_to_indices(sp, env_cfg) for _, sp in chunk])
        correct += int((pred == tgt).all(axis=(1, 2)).sum())
    return correct / len(pairs)


def strings_recon_accuracy(enc, dec, pairs, batch_size=64):
    correct = 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        a, _ = eval_representation(enc, enc.spec, chunk, "strings")
        preds = dec.greedy_decode([s for s, _ in chunk], a)
        correct += sum(p == sp for p, (_, sp) in zip(preds, chunk))
    return correct / len(pairs)


# ---------------------------------------------------------------------------
# language learning


@dataclass
class LangExample:
    """One supervised (c, s, s') example, preprocessed for its task."""

    token_ids: np.ndarray
    # blocks payload
    s_enc: np.ndarray | None = None
    tgt_idx: np.ndarray | None = None
    # strings payload
    s: str | None = None
    sp: str | None = None
    # encoder-matching target (discrete mode indices or continuous vector)
    a_match: np.ndarray | None = None


def make_block_example(ex, vocab, env_cfg, enc=None):
    """Preprocess an AnnotatedExample; computes the matching target when an
    encoder is supplied (detached: the encoder is a target, not trained)."""
    item = LangExample(
        token_ids=vocab.encode(ex.command),
        s_enc=encode_grid(ex.s, env_cfg),
        tgt_idx=grid_to_indices(ex.s_prime, env_cfg),
    )
    if enc is not None:
        _, logits = eval_representation(enc, enc.spec, [(ex.s, ex.s_prime)],
                                        "blocks", env_cfg)
        item.a_match = _match_target(logits, enc.spec)[0]
    return item


def make_string_example(command, s, sp, vocab, enc=None):
    item = LangExample(token_ids=vocab.encode(command), s=s, sp=sp)
    if enc is not None:
        _, logits = eval_representation(enc, enc.spec, [(s, sp)], "strings")
        item.a_match = _match_target(logits, enc.spec)[0]
    return item


def _match_target(logits_data, spec):
    if spec.mode == "discrete":
        return discrete_mode_indices(logits_data, spec)
    return logits_data


def language_batch_loss(lang, dec, batch, cfg: LangLearnConfig, rng,
                        train=True):
    """Eq.-style objective on one batch: decoder NLL of s' given L(c),
    plus lam times the encoder-matching term."""
    spec = lang.spec
    gumbel = rng.substream("gumbel") if train else None
    drop = rng.substream("dropout") if train else None
    token_seqs = [ex.token_ids for ex in batch]
    a_logits = lang.forward(token_seqs, train=train, rng=drop)
    a = repr_realize(a_logits, spec, train=train, rng=gumbel)
    dec_train = train and not cfg.decoder_frozen
    if batch[0].s_enc is not None:
        s_enc = np.stack([ex.s_enc for ex in batch]).astype(lang.dtype)
        tgt = np.stack([ex.tgt_idx for ex in batch])
        loss = dec.nll(s_enc, a, tgt, train=dec_train, rng=drop)
    else:
        loss = dec.nll([ex.s for ex in batch], a, [ex.sp for ex in batch],
                       train=dec_train, rng=drop)
    if cfg.lam > 0:
        if batch[0].a_match is None:
            raise TrainingError(
                "encoder matching enabled but examples carry no encoder target")
        B = len(batch)
        if spec.mode == "discrete":
            flat = ad.reshape(a_logits, (B * spec.n, spec.k))
            targets = np.stack([ex.a_match for ex in batch]).reshape(-1)
            match = ad.masked_cross_entropy_sum(
                flat, targets, np.ones(B * spec.n, dtype=lang.dtype))
        else:
            target = np.stack([ex.a_match for ex in batch]).astype(lang.dtype)
            match = ad.tsum(ad.square(ad.sub(a_logits, Tensor(target))))
        scaled = ad.mul(match, Tensor(np.asarray(cfg.lam / B, dtype=lang.dtype)))
        loss = ad.add(loss, scaled)
    return loss


def train_to_convergence(lang, dec, examples, cfg: LangLearnConfig, rng,
                         optimizer=None):
    """The online-harness convergence recipe: a fixed number of epochs over
    all seen examples at batch size 1, shuffled per epoch."""
    if not examples:
        raise TrainingError("train_to_convergence needs at least one example")
    if optimizer is None:
        params = lang.parameters()
        if not cfg.decoder_frozen:
            params = params + dec.parameters()
        optimizer = AdamState(params, lr=cfg.lr)
    shuffle = rng.substream("shuffle")
    steps = 0
    for _ in range(cfg.epochs_per_new_example):
        order = shuffle.permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            loss = language_batch_loss(lang, dec, batch, cfg, rng)
            _check_loss(loss, steps)
            loss.backward()
            adam_step(optimizer)
            steps += 1
    return steps


def train_sweep(lang, dec, examples, cfg: LangLearnConfig, rng,
                eval_exact_match):
    """Fixed-budget convergence recipe for the data-size sweep: up to
    `sweep_epochs` epochs, early-stopped once training exact match holds at
    100% for `sweep_patience` consecutive epochs.

    eval_exact_match(lang, dec) -> fraction over the training examples.
    """
    params = lang.parameters()
    if not cfg.decoder_frozen:
        params = params + dec.parameters()
    optimizer = AdamState(params, lr=cfg.lr)
    shuffle = rng.substream("shuffle")
    perfect_streak = 0
    epochs_run = 0
    losses = []
    for epoch in range(cfg.sweep_epochs):
        order = shuffle.permutation(len(examples))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.sweep_batch_size):
            batch = [examples[i] for i in order[start:start + cfg.sweep_batch_size]]
            loss = language_batch_loss(lang, dec, batch, cfg, rng)
            epoch_loss += _check_loss(loss, epoch) * len(batch)
            loss.backward()
            adam_step(optimizer)
        losses.append(epoch_loss / len(examples))
        epochs_run += 1
        if eval_exact_match(lang, dec) >= 1.0:
            perfect_streak += 1
            if perfect_streak >= cfg.sweep_patience:
                break
        else:
            perfect_streak = 0
    clear_grads(params)
    return epochs_run, losses
