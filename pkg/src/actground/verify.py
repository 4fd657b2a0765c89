"""Built-in verification suite: gradient checks against central finite
differences, Gumbel-Softmax sampling checks, and environment-semantics
oracle checks.  Shared by the `verify` CLI subcommand and the acceptance
tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (BlocksConfig, applicable_forms, apply_form, encode_grid,
                     enumerate_applicable_forms, grid_to_indices,
                     sample_start_state)
from .gradcheck import check_gradients
from .models import (BlockArch, BlockDecoder, BlockEncoder, LangArch,
                     LanguageModule, ReprSpec, StringArch, StringDecoder,
                     StringEncoder)
from .oracle import oracle_apply
from .rng import RngStream
from .strings import (ALPHABET, StringsConfig, StringsError, Transformation,
                      apply_transformation, load_dictionary,
                      sample_transformation)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _t(rng, *shape, away_from_zero=False):
    data = rng.normal(size=shape)
    if away_from_zero:
        data = data + 0.2 * np.sign(data)
    return Tensor(data, requires_grad=True)


def _scalarize(x, rng):
    w = Tensor(rng.normal(size=x.shape))
    return ad.tsum(ad.mul(x, w))


def _op_catalog():
    """name -> builder(rng) returning (fn, tensors) for one random case."""

    def binary(op):
        def build(rng):
            a = _t(rng, 3, 4)
            b = _t(rng, 3, 4) if rng.random() < 0.5 else _t(rng, 4)
            return (lambda: _scalarize(op(a, b), np.random.default_rng(0)),
                    [a, b])
        return build

    def unary(op, away=False):
        def build(rng):
            a = _t(rng, 3, 5, away_from_zero=away)
            return (lambda: _scalarize(op(a), np.random.default_rng(0)), [a])
        return build

    def matmul(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4, 2)
        return lambda: _scalarize(ad.matmul(a, b), np.random.default_rng(0)), [a, b]

    def bmm(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
        return lambda: _scalarize(ad.bmm(a, b), np.random.default_rng(0)), [a, b]

    def reshape(rng):
        a = _t(rng, 2, 6)
        return lambda: _scalarize(ad.reshape(a, (3, 4)), np.random.default_rng(0)), [a]

    def concat(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 4)
        return (lambda: _scalarize(ad.concat([a, b], axis=-1),
                                   np.random.default_rng(0)), [a, b])

    def narrow(rng):
        a = _t(rng, 3, 6)
        return lambda: _scalarize(ad.narrow(a, 1, 2, 3), np.random.default_rng(0)), [a]

    def cross_entropy(rng):
        a = _t(rng, 4, 5)
        tgt = rng.integers(0, 5, size=4)
        return lambda: ad.cross_entropy_from_logits(a, tgt), [a]

    def masked_ce(rng):
        a = _t(rng, 4, 5)
        tgt = rng.integers(0, 5, size=4)
        mask = (rng.random(4) < 0.7).astype(np.float64)
        return lambda: ad.masked_cross_entropy_sum(a, tgt, mask), [a]

    def dropout(rng):
        a = _t(rng, 4, 6)
        seed = int(rng.integers(1 << 30))
        return (lambda: _scalarize(
            ad.dropout(a, 0.4, True, np.random.default_rng(seed)),
            np.random.default_rng(0)), [a])

    def embedding(rng):
        table = _t(rng, 7, 3)
        ids = rng.integers(0, 7, size=5)
        return (lambda: _scalarize(ad.embedding(table, ids),
                                   np.random.default_rng(0)), [table])

    def conv(rng):
        x, w, b = _t(rng, 2, 4, 3, 2), _t(rng, 3, 3, 2, 3), _t(rng, 3)
        return (lambda: _scalarize(ad.conv2d_same(x, w, b),
                                   np.random.default_rng(0)), [x, w, b])

    def mean_pool(rng):
        x = _t(rng, 2, 3, 4, 3)
        return (lambda: _scalarize(ad.mean_pool_spatial(x),
                                   np.random.default_rng(0)), [x])

    def max_pool(rng):
        x = _t(rng, 2, 3, 4, 3)
        return (lambda: _scalarize(ad.max_pool_spatial(x),
                                   np.random.default_rng(0)), [x])

    def broadcast(rng):
        a = _t(rng, 2, 5)
        return (lambda: _scalarize(ad.broadcast_spatial(a, 3, 4),
                                   np.random.default_rng(0)), [a])

    def lstm(rng):
        x, h, c = _t(rng, 2, 3), _t(rng, 2, 4), _t(rng, 2, 4)
        wx, wh, b = _t(rng, 3, 16), _t(rng, 4, 16), _t(rng, 16)

        def fn():
            h2, c2 = ad.lstm_step(x, h, c, wx, wh, b)
            r = np.random.default_rng(0)
            return ad.add(_scalarize(h2, r), _scalarize(c2, r))
        return fn, [x, h, c, wx, wh, b]

    return {
        "add": binary(ad.add), "sub": binary(ad.sub), "mul": binary(ad.mul),
        "neg": unary(ad.neg), "square": unary(ad.square),
        "tsum": unary(lambda a: ad.mul(a, a)),
        "tmean": unary(lambda a: ad.square(ad.tmean(a))),
        "relu": unary(ad.relu, away=True),
        "sigmoid": unary(ad.sigmoid), "tanh": unary(ad.tanh),
        "softmax": unary(ad.softmax), "log_softmax": unary(ad.log_softmax),
        "matmul": matmul, "bmm": bmm, "reshape": reshape, "concat": concat,
        "narrow": narrow, "cross_entropy": cross_entropy,
        "masked_cross_entropy": masked_ce, "dropout": dropout,
        "embedding": embedding, "conv2d": conv, "mean_pool": mean_pool,
        "max_pool": max_pool, "broadcast_spatial": broadcast,
        "lstm_step": lstm,
    }


def _f64(model):
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    model.dtype = np.float64
    return model


def _composed_checks(rng):
    """Gradient checks of the full encoder/decoder/language compositions at
    tiny dimensions."""
    init = RngStream(int(rng.integers(1 << 30)))
    env = BlocksConfig(num_columns=3, max_height=2, palette=("red", "blue"))
    spec = ReprSpec.continuous(3)
    arch = BlockArch(conv_dim=3, ff_dim=3, dropout=0.0)
    enc = _f64(BlockEncoder(env, arch, spec, init.substream("be"),
                            dtype=np.float64))
    dec = _f64(BlockDecoder(env, arch, spec, init.substream("bd"),
                            dtype=np.float64))
    s = sample_start_state(rng, env)
    forms = applicable_forms(s, env)
    sp = apply_form(forms[int(rng.integers(len(forms)))], s, env)
    s_enc = encode_grid(s, env)[None].astype(np.float64)
    sp_enc = encode_grid(sp, env)[None].astype(np.float64)
    tgt = grid_to_indices(sp, env)[None]
    yield ("composed/block-autoencoder",
           lambda: dec.nll(s_enc, enc.forward(s_enc, sp_enc), tgt),
           enc.parameters() + dec.parameters())

    sarch = StringArch(char_embed_dim=3, hidden_dim=4, ff_dim=4,
                       feed_context=True, attention=True)
    senc = _f64(StringEncoder(sarch, spec, init.substream("se"),
                              dtype=np.float64))
    sdec = _f64(StringDecoder(sarch, spec, init.substream("sd"),
                              dtype=np.float64))
    yield ("composed/string-autoencoder",
           lambda: sdec.nll(["cab"], senc.forward(["cab"], ["cxab"]), ["cxab"]),
           senc.parameters() + sdec.parameters())

    dspec = ReprSpec.discrete(2, 3)
    lang = _f64(LanguageModule(5, LangArch(3, 4), dspec, init.substream("l"),
                               dtype=np.float64))
    ldec = _f64(StringDecoder(sarch, dspec, init.substream("ld"),
                              dtype=np.float64))
    noise = rng.gumbel(size=(dspec.n, dspec.k))

    def lang_fn():
        # the straight-through forward is piecewise constant, so the check
        # runs on the soft relaxation whose gradient it reuses
        logits = lang.forward([np.array([1, 2, 3])])
        soft = ad.softmax(ad.add(ad.reshape(logits, (dspec.n, dspec.k)),
                                 Tensor(noise)))
        return ldec.nll(["ab"], ad.reshape(soft, (1, dspec.flat_dim)), ["axb"])

    yield ("composed/language-decoder", lang_fn,
           lang.parameters() + ldec.parameters())


def run_gradient_checks(seed=0, num_cases=200):
    """Per-op random-case checks plus the composed-architecture checks.
    Every case compares analytic gradients to central finite differences at
    64-bit with relative tolerance 1e-4."""
    rng = np.random.default_rng(seed)
    catalog = _op_catalog()
    names = sorted(catalog)
    results = []
    worst_by_name = {}
    per_op = max(1, num_cases // len(names))
    for name in names:
        worst = 0.0
        ok = True
        detail = ""
        for _ in range(per_op):
            fn, tensors = catalog[name](rng)
            try:
                worst = max(worst, check_gradients(fn, tensors))
            except AssertionError as e:
                ok = False
                detail = str(e)
                break
        worst_by_name[name] = worst
        results.append(CheckResult(f"grad/{name}", ok,
                                   detail or f"worst rel err {worst:.2e} "
                                   f"over {per_op} cases"))
    for name, fn, params in _composed_checks(rng):
        try:
            worst = check_gradients(fn, params)
            results.append(CheckResult(f"grad/{name}", True,
                                       f"worst rel err {worst:.2e}"))
        except AssertionError as e:
            results.append(CheckResult(f"grad/{name}", False, str(e)))
    return results


def gumbel_checks(seed=0, draws=100_000):
    rng = np.random.default_rng(seed)
    results = []

    logits = Tensor(rng.normal(size=(200, 6)))
    out = ad.gumbel_softmax_st(logits, rng=rng)
    one_hot = (np.isin(out.data, (0.0, 1.0)).all()
               and (out.data.sum(axis=1) == 1.0).all())
    results.append(CheckResult("gumbel/one-hot-forward", bool(one_hot)))

    # frequencies over `draws` samples match softmax probabilities
    probs = np.array([0.5, 0.3, 0.2])
    tiled = Tensor(np.tile(np.log(probs), (draws, 1)))
    sampled = ad.gumbel_softmax_st(tiled, rng=rng).data.mean(axis=0)
    err = float(np.abs(sampled - probs).max())
    results.append(CheckResult("gumbel/sample-frequencies", err < 0.01,
                               f"max abs freq error {err:.4f} over {draws}"))

    # straight-through backward equals the gradient of the relaxed value
    logits = Tensor(rng.normal(size=(4, 3)).astype(np.float64),
                    requires_grad=True)
    noise = rng.gumbel(size=(4, 3))
    w = rng.normal(size=(4, 3))

    def relaxed():
        return ad.tsum(ad.mul(ad.softmax(ad.add(logits, Tensor(noise))),
                              Tensor(w)))

    st = ad.tsum(ad.mul(ad.gumbel_softmax_st(logits, noise_override=noise),
                        Tensor(w)))
    st.backward()
    analytic = logits.grad.copy()
    logits.grad = None
    try:
        check_gradients(relaxed, [logits])
        relaxed_loss = relaxed()
        relaxed_loss.backward()
        match = np.allclose(analytic, logits.grad, rtol=1e-6, atol=1e-9)
        results.append(CheckResult("gumbel/straight-through-backward",
                                   bool(match)))
    except AssertionError as e:
        results.append(CheckResult("gumbel/straight-through-backward", False,
                                   str(e)))
    return results


FIGURE_EXAMPLES = (
    (Transformation("replace", ("CONSONANT",), "px"), "fines", "pxipxepx"),
    (Transformation("insert_before", ("b",), "k"), "rabbles", "rakbkbles"),
    (Transformation("replace", ("VOWEL", "CONSONANT"), "vg"), "thatched",
     "thvgchvg"),
    (Transformation("insert_at", (), "b", 3), "thanks", "thbanks"),
)


def env_semantics_checks(seed=0, string_cases=100_000, block_cases=10_000):
    results = []

    ok = all(apply_transformation(t, s) == expect
             for t, s, expect in FIGURE_EXAMPLES)
    results.append(CheckResult("strings/reference-examples", ok))

    # dual-route agreement: hand-rolled scanner vs regex-based oracle
    rng = np.random.default_rng(seed)
    cfg = StringsConfig()
    words = load_dictionary(max_len=cfg.max_state_len)
    disagreements = 0
    first = ""
    for i in range(string_cases):
        t = sample_transformation(rng, cfg)
        if rng.random() < 0.5:
            s = words[rng.integers(len(words))]
        else:
            s = "".join(rng.choice(list(ALPHABET), size=rng.integers(0, 16)))
        try:
            mine = apply_transformation(t, s)
        except StringsError:
            mine = None
        try:
            ref = oracle_apply(t, s)
        except StringsError:
            ref = None
        if mine != ref:
            disagreements += 1
            if not first:
                first = f"case {i}: {t} on {s!r}: {mine!r} vs {ref!r}"
    results.append(CheckResult("strings/oracle-agreement",
                               disagreements == 0,
                               first or f"{string_cases} cases agree"))

    env = BlocksConfig()
    bad = 0
    for _ in range(block_cases):
        s = sample_start_state(rng, env)
        forms = applicable_forms(s, env)
        if not forms:
            continue
        lf = forms[int(rng.integers(len(forms)))]
        sp = apply_form(lf, s, env)
        if lf not in enumerate_applicable_forms(s, sp, env):
            bad += 1
    results.append(CheckResult("blocks/apply-enumerate-roundtrip", bad == 0,
                               f"{bad} misses over {block_cases} cases"))
    return results


def run_all_checks(seed=0, num_grad_cases=200, gumbel_draws=100_000,
                   string_cases=100_000, block_cases=10_000):
    return (run_gradient_checks(seed, num_grad_cases)
            + gumbel_checks(seed, gumbel_draws)
            + env_semantics_checks(seed, string_cases, block_cases))
