"""Post-hoc analyses of a trained conditional autoencoder: does the decoder
generalize an encoded action to fresh states the way some logical form
would, and how much of the discrete code space does the encoder use?
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .blocks import (decode_indices, enumerate_applicable_forms,
                     grid_to_indices, sample_start_state, transition_stream)
from .training import eval_representation


class AnalysisError(Exception):
    pass


@dataclass
class ConsistencyResult:
    num_samples: int
    included: int            # samples whose original transition some single
    excluded: int            # grammar form explains (F1 nonempty) / the rest
    consistent: int
    failures: list = field(default_factory=list)

    @property
    def fraction(self):
        """Consistent fraction over included samples."""
        return self.consistent / self.included if self.included else 0.0

    @property
    def fraction_unfiltered(self):
        return self.consistent / self.num_samples if self.num_samples else 0.0


def neural_codec(enc, dec, env_cfg):
    """(encode_fn, decode_fn) callables over grids for a trained model."""

    def encode_fn(pairs):
        a, _ = eval_representation(enc, enc.spec, pairs, "blocks", env_cfg)
        return list(a.data)

    def decode_fn(codes, s2_grids):
        s_enc = enc.encode_batch(s2_grids)
        a = Tensor(np.stack(codes).astype(enc.dtype))
        return list(dec.predict_indices(s_enc, a))

    return encode_fn, decode_fn


def consistency_metric(encode_fn, decode_fn, env_cfg, num_samples, rng,
                       dump_path=None, batch_size=64, fresh_state_fn=None):
    """Fraction of encoded transitions whose generalization to a fresh state
    is explainable by a grammar form that also explains the original.

    Per sample: draw (s1, s1') from the environment-learning distribution,
    encode it, decode the code against a fresh s2, and intersect the sets of
    applicable forms F1 = forms(s1 -> s1') and F2 = forms(s2 -> s̄2).
    Samples with F1 empty (no single form explains the original transition)
    are excluded and counted separately.  Inconsistent samples are dumped as
    line-delimited JSON for manual inspection.

    fresh_state_fn(rng, f1) overrides how s2 is drawn; the default is the
    environment's start-state distribution.  Harness-validation codecs use
    the hook to condition s2 on form applicability.
    """
    if fresh_state_fn is None:
        fresh_state_fn = lambda r, _f1: sample_start_state(r, env_cfg)
    stream = transition_stream(rng.substream("transitions"), batch_size,
                               env_cfg)
    fresh = rng.substream("fresh-states")
    result = ConsistencyResult(num_samples, 0, 0, 0)
    done = 0
    while done < num_samples:
        n = min(batch_size, num_samples - done)
        batch = next(stream)[:n]
        kept = []
        for t in batch:
            f1 = enumerate_applicable_forms(t.s, t.s_prime, env_cfg)
            if f1:
                kept.append(((t.s, t.s_prime), f1))
            else:
                result.excluded += 1
        done += n
        if not kept:
            continue
        pairs = [p for p, _ in kept]
        codes = encode_fn(pairs)
        s2_grids = [fresh_state_fn(fresh, f1) for _, f1 in kept]
        preds = decode_fn(codes, s2_grids)
        for ((s1, s1p), f1), s2, pred in zip(kept, s2_grids, preds):
            result.included += 1
            s2bar = decode_indices(np.asarray(pred), env_cfg)
            f2 = enumerate_applicable_forms(s2, s2bar, env_cfg) \
                if s2bar is not None else []
            if set(f1) & set(f2):
                result.consistent += 1
            else:
                result.failures.append({
                    "s1": s1.to_lists(), "s1_prime": s1p.to_lists(),
                    "s2": s2.to_lists(),
                    "s2_bar": s2bar.to_lists() if s2bar is not None
                    else np.asarray(pred).tolist(),
                    "s2_bar_valid": s2bar is not None,
                    "f1": [lf.describe() for lf in f1],
                    "f2": [lf.describe() for lf in f2],
                })
    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as f:
            for rec in result.failures:
                f.write(json.dumps(rec) + "\n")
    return result


def oracle_codec(env_cfg):
    """Reference codec for harness validation: the code is the set of forms
    explaining the transition, and decoding applies the first one applicable
    to the fresh state.  Paired with `oracle_fresh_state`, every included
    sample is consistent by construction."""
    from .blocks import InapplicableForm, apply_form

    def encode_fn(pairs):
        return [sorted(enumerate_applicable_forms(s, sp, env_cfg),
                       key=lambda lf: lf.describe()) for s, sp in pairs]

    def decode_fn(codes, s2_grids):
        preds = []
        for forms, s2 in zip(codes, s2_grids):
            out = s2
            for lf in forms:
                try:
                    out = apply_form(lf, s2, env_cfg)
                    break
                except InapplicableForm:
                    continue
            preds.append(grid_to_indices(out, env_cfg))
        return preds

    return encode_fn, decode_fn


def oracle_fresh_state(env_cfg, max_tries=1000):
    """Fresh-state sampler conditioned on some explaining form applying, so
    the oracle codec realizes a shared form on every sample."""
    from .blocks import InapplicableForm, apply_form

    def sample(rng, f1):
        for _ in range(max_tries):
            s2 = sample_start_state(rng, env_cfg)
            for lf in f1:
                try:
                    apply_form(lf, s2, env_cfg)
                    return s2
                except InapplicableForm:
                    continue
        raise AnalysisError("no fresh state admits any explaining form")

    return sample


@dataclass
class CodeUsage:
    counts: np.ndarray       # (n, k) activations of each (variable, value)
    total: int

    @property
    def entropy(self):
        """Per-variable entropy of the empirical value distribution, nats."""
        p = self.counts / max(self.total, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return terms.sum(axis=1)

    @property
    def distinct_per_variable(self):
        return (self.counts > 0).sum(axis=1)


def code_usage_stats(enc, pairs, task, env_cfg=None, batch_size=64):
    """Histogram of encoder mode assignments over sampled transitions;
    flags code collapse (tiny entropy / few distinct values)."""
    spec = enc.spec
    if spec.mode != "discrete":
        raise AnalysisError("code usage statistics need a discrete code")
    counts = np.zeros((spec.n, spec.k), dtype=np.int64)
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        _, logits = eval_representation(enc, spec, chunk, task, env_cfg)
        modes = logits.reshape(len(chunk), spec.n, spec.k).argmax(axis=-1)
        for v in range(spec.n):
            np.add.at(counts[v], modes[:, v], 1)
    return CodeUsage(counts, len(pairs))
