"""Evaluation protocols: online accuracy over command sessions (blocks) and
accuracy-vs-training-size sweeps (strings), plus prediction helpers and
metric persistence.

The harnesses are structurally prediction-before-reveal: a model's predict
method sees only (s, c), never s'.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import grid_to_indices
from .models import repr_realize
from .optim import AdamState
from .training import (LangLearnConfig, freeze, make_block_example,
                       make_string_example, train_sweep, train_to_convergence)


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# prediction


def predict_blocks(lang, dec, vocab, s_enc, commands):
    """Per-cell argmax prediction of the next grid, (B, C, H) channel
    indices.  No projection onto gravity-consistent states."""
    token_seqs = [vocab.encode(c) for c in commands]
    a = repr_realize(lang.forward(token_seqs), lang.spec, train=False)
    return dec.predict_indices(s_enc.astype(lang.dtype), a)


def predict_strings(lang, dec, vocab, s_strs, commands):
    """Greedy-decoded next strings (length-capped by the decoder)."""
    token_seqs = [vocab.encode(c) for c in commands]
    a = repr_realize(lang.forward(token_seqs), lang.spec, train=False)
    return dec.greedy_decode(s_strs, a)


# ---------------------------------------------------------------------------
# run records and result persistence


@dataclass
class RunRecord:
    """Provenance for every reported number: config snapshot, per-example
    predictions, metric values, wall-clock timings."""

    run_id: str
    task: str
    condition: str
    seed: int
    config: dict = field(default_factory=dict)
    per_example: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as f:
            return RunRecord(**json.load(f))


@dataclass(frozen=True)
class ResultRow:
    run_id: str
    task: str
    condition: str
    seed: int
    x: int          # training-set size (sweep) or stream position bucket
    accuracy: float
    timestamp: str = ""


RESULT_COLUMNS = ("run_id", "task", "condition", "seed", "x", "accuracy",
                  "timestamp")


def emit_results(rows, path):
    """CSV with a fixed header, sorted by (condition, x) then the remaining
    key fields; timestamps live in their own column so reruns differ only
    there."""
    ordered = sorted(rows, key=lambda r: (r.condition, r.x, r.task, r.seed,
                                          r.run_id))
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in ordered:
            w.writerow([r.run_id, r.task, r.condition, r.seed, r.x,
                        repr(r.accuracy), r.timestamp])


def read_results(path):
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != RESULT_COLUMNS:
            raise EvalError(f"{path}: unexpected header {header}")
        for rec in reader:
            rows.append(ResultRow(rec[0], rec[1], rec[2], int(rec[3]),
                                  int(rec[4]), float(rec[5]), rec[6]))
    return rows


# ---------------------------------------------------------------------------
# online accuracy (blocks)


class NeuralBlocksModel:
    """Online learner: predicts with the language module through the
    decoder, then retrains on all seen examples after each reveal."""

    def __init__(self, lang, dec, vocab, cfg: LangLearnConfig, env_cfg, rng,
                 enc=None):
        if cfg.lam > 0 and enc is None:
            raise EvalError("encoder matching (lam > 0) requires an encoder")
        self.lang = lang
        self.dec = dec
        self.enc = enc
        self.vocab = vocab
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.rng = rng
        self.seen = []
        params = lang.parameters()
        if cfg.decoder_frozen:
            freeze(dec)
        else:
            params = params + dec.parameters()
        if enc is not None:
            freeze(enc)
        # one optimizer per stream: Adam moments persist across reveals
        self.optimizer = AdamState(params, lr=cfg.lr)

    def predict(self, s, command):
        s_enc = np.stack([self._encode(s)])
        return predict_blocks(self.lang, self.dec, self.vocab, s_enc,
                              [command])[0]

    def _encode(self, grid):
        from .blocks import encode_grid
        return encode_grid(grid, self.env_cfg)

    def learn(self, example):
        enc = self.enc if self.cfg.lam > 0 else None
        self.seen.append(make_block_example(example, self.vocab, self.env_cfg,
                                            enc))
        train_to_convergence(self.lang, self.dec, self.seen, self.cfg,
                             self.rng, optimizer=self.optimizer)


def _run_session(args):
    session_index, session, model_factory, env_cfg, rng = args
    model = model_factory(session_index, rng)
    log = []
    for position, ex in enumerate(session.examples):
        pred = model.predict(ex.s, ex.command)
        target = grid_to_indices(ex.s_prime, env_cfg)
        correct = int(np.array_equal(np.asarray(pred), target))
        log.append({"session": session.annotator_id or str(session_index),
                    "position": position,
                    "command": " ".join(ex.command),
                    "correct": correct})
        model.learn(ex)
    return session_index, log


def online_accuracy(sessions, model_factory, env_cfg, rng, parallel=1):
    """Stream each session through a fresh model: predict, score exact
    match, reveal, retrain on all seen.  Returns (accuracy, per-example
    log); accuracy is correct predictions over all predictions."""
    if not sessions:
        raise EvalError("online_accuracy needs at least one session")
    jobs = [(i, s, model_factory, env_cfg, rng.fork(i))
            for i, s in enumerate(sessions)]
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_session, jobs))
    else:
        results = [_run_session(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    log = [entry for _, session_log in results for entry in session_log]
    accuracy = sum(e["correct"] for e in log) / len(log)
    return accuracy, log


# ---------------------------------------------------------------------------
# data-size sweep (strings)


def strings_exact_match(lang, dec, vocab, examples, batch_size=64):
    """Fraction of (command, s, s') triples whose greedy decode equals s'."""
    correct = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        preds = predict_strings(lang, dec, vocab,
                                [s for _, s, _ in chunk],
                                [c for c, _, _ in chunk])
        correct += sum(p == sp for p, (_, _, sp) in zip(preds, chunk))
    return correct / len(examples)


class NeuralStringsModel:
    """Sweep-point learner: trained once on a fixed-size training set."""

    def __init__(self, lang, dec, vocab, cfg: LangLearnConfig, rng, enc=None):
        if cfg.lam > 0 and enc is None:
            raise EvalError("encoder matching (lam > 0) requires an encoder")
        self.lang = lang
        self.dec = dec
        self.enc = enc
        self.vocab = vocab
        self.cfg = cfg
        self.rng = rng
        if cfg.decoder_frozen:
            freeze(dec)
        if enc is not None:
            freeze(enc)

    def train(self, triples):
        enc = self.enc if self.cfg.lam > 0 else None
        examples = [make_string_example(c, s, sp, self.vocab, enc)
                    for c, s, sp in triples]
        train_triples = list(triples)

        def exact_on_train(lang, dec):
            return strings_exact_match(lang, dec, self.vocab, train_triples)

        return train_sweep(self.lang, self.dec, examples, self.cfg, self.rng,
                           exact_on_train)

    def evaluate(self, triples):
        return strings_exact_match(self.lang, self.dec, self.vocab, triples)


def group_triples(group, split):
    """(command, s, s') triples for a group's 'train' or 'heldout' rows."""
    rows = group.train if split == "train" else group.heldout
    return [(group.instructions[ii].command, s, sp) for ii, s, sp in rows]


def _run_sweep_point(args):
    group_index, size, group, model_factory, rng = args
    triples = group_triples(group, "train")
    if size > len(triples):
        raise EvalError(
            f"size {size} exceeds group {group_index} train set ({len(triples)})")
    model = model_factory(group_index, size, rng)
    model.train(triples[:size])
    acc = model.evaluate(group_triples(group, "heldout"))
    return group_index, size, acc


def datasize_sweep(groups, model_factory, sizes, rng, parallel=1):
    """Held-out exact-match accuracy per training-set size, averaged over
    the instruction groups.  Every point trains from scratch (the factory
    builds a fresh model; no optimizer state crosses points)."""
    if not groups:
        raise EvalError("datasize_sweep needs at least one group")
    jobs = []
    for si, size in enumerate(sizes):
        for gi, group in enumerate(groups):
            jobs.append((gi, size, group, model_factory,
                         rng.fork(si * len(groups) + gi)))
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_sweep_point, jobs))
    else:
        results = [_run_sweep_point(j) for j in jobs]
    by_size = {}
    for gi, size, acc in sorted(results, key=lambda r: (r[1], r[0])):
        by_size.setdefault(size, []).append(acc)
    curve = {size: float(np.mean(accs)) for size, accs in by_size.items()}
    points = [{"group": gi, "size": size, "accuracy": acc}
              for gi, size, acc in sorted(results, key=lambda r: (r[1], r[0]))]
    return curve, points


def now_stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%S")
