"""Operator entry point.

Subcommands: gen-data, env-learn, lang-eval, analyze, verify.  Every run
writes a RunRecord; result CSVs are merged idempotently (rerunning with the
same config and seed reproduces identical rows, timestamps aside).

Exit codes: 0 success, 1 failure, 2 invalid configuration, 3 missing
checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .blocks import BlocksConfig, generate_sessions, load_sessions, save_sessions
from .config import (CONDITIONS, ConfigError, ExperimentConfig, env_overrides,
                     load_config, preset)
from .evaluation import (NeuralBlocksModel, NeuralStringsModel, ResultRow,
                         RunRecord, datasize_sweep, emit_results, now_stamp,
                         online_accuracy, read_results)
from .models import (BlockDecoder, BlockEncoder, LanguageModule, ReprSpec,
                     StringDecoder, StringEncoder, Vocab, load_bundle,
                     save_bundle)
from .rng import RngStream
from .strings import GroupsConfig, build_eval_groups, load_groups, save_groups
from .training import (blocks_recon_accuracy, env_learn, freeze,
                       strings_recon_accuracy)


class MissingCheckpoint(Exception):
    pass


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# data plumbing


def data_path(cfg: ExperimentConfig):
    return os.path.join(cfg.data_dir, f"{cfg.task}-{cfg.scale}.jsonl")


def ensure_blocks_sessions(cfg: ExperimentConfig, env_cfg=None):
    env_cfg = env_cfg or BlocksConfig()
    path = data_path(cfg)
    if not os.path.exists(path):
        os.makedirs(cfg.data_dir, exist_ok=True)
        rng = RngStream(cfg.data_seed).substream("sessions")
        sessions = generate_sessions(rng, env_cfg, cfg.num_sessions,
                                     cfg.session_length)
        save_sessions(sessions, path)
        _log(f"wrote {path}")
    return load_sessions(path, env_cfg)


def ensure_string_groups(cfg: ExperimentConfig):
    path = data_path(cfg)
    if not os.path.exists(path):
        os.makedirs(cfg.data_dir, exist_ok=True)
        rng = RngStream(cfg.data_seed).substream("groups")
        groups = build_eval_groups(rng, GroupsConfig())
        save_groups(groups, path)
        _log(f"wrote {path}")
    return load_groups(path)


# ---------------------------------------------------------------------------
# model construction


def build_env_models(cfg: ExperimentConfig, seed):
    rng = RngStream(seed)
    if cfg.task == "blocks":
        env_cfg = BlocksConfig()
        enc = BlockEncoder(env_cfg, cfg.block_arch, cfg.repr_spec,
                           rng.substream("enc-init"))
        dec = BlockDecoder(env_cfg, cfg.block_arch, cfg.repr_spec,
                           rng.substream("dec-init"))
    else:
        enc = StringEncoder(cfg.string_arch, cfg.repr_spec,
                            rng.substream("enc-init"))
        dec = StringDecoder(cfg.string_arch, cfg.repr_spec,
                            rng.substream("dec-init"))
    return enc, dec


def load_pretrained(cfg: ExperimentConfig, seed):
    """Encoder and decoder restored from the env-learning checkpoint."""
    path = cfg.checkpoint_path(seed)
    if not os.path.exists(path):
        raise MissingCheckpoint(
            f"checkpoint {path} not found; run `actground env-learn` first")
    enc, dec = build_env_models(cfg, seed)
    meta = load_bundle([enc, dec], path)
    return enc, dec, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig):
    if cfg.task == "blocks":
        sessions = ensure_blocks_sessions(cfg)
        _log(f"{len(sessions)} sessions x {len(sessions[0].examples)} examples "
             f"at {data_path(cfg)}")
    else:
        groups = ensure_string_groups(cfg)
        _log(f"{len(groups)} instruction groups at {data_path(cfg)}")
    return 0


def cmd_env_learn(cfg: ExperimentConfig, seed=None):
    seed = cfg.seeds[0] if seed is None else seed
    t0 = time.time()
    enc, dec = build_env_models(cfg, seed)
    trace = env_learn(cfg.task, enc, dec, cfg.env_learn, RngStream(seed))
    train_s = time.time() - t0

    held_rng = RngStream(cfg.data_seed).substream("heldout-transitions")
    if cfg.task == "blocks":
        from .blocks import transition_stream
        env_cfg = BlocksConfig()
        pairs = [(t.s, t.s_prime)
                 for t in next(transition_stream(held_rng, 500, env_cfg))]
        recon = blocks_recon_accuracy(enc, dec, pairs, env_cfg)
    else:
        from .strings import StringsConfig, build_env_batch, load_dictionary
        s_cfg = StringsConfig()
        words = load_dictionary(max_len=s_cfg.max_state_len)
        pairs = [(p.s, p.s_prime)
                 for p in build_env_batch(held_rng, 500, words, s_cfg)]
        recon = strings_recon_accuracy(enc, dec, pairs)

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    path = cfg.checkpoint_path(seed)
    save_bundle([enc, dec], path,
                config={"experiment": cfg.to_dict(), "seed": seed})
    os.makedirs(cfg.results_dir, exist_ok=True)
    record = RunRecord(
        run_id=f"envlearn-{os.path.basename(path)}",
        task=cfg.task, condition="envlearn", seed=seed,
        config=cfg.to_dict(),
        metrics={"recon_exact_match": recon,
                 "final_loss": trace[-1][1]},
        timings={"train_s": train_s})
    record.per_example = [{"step": s, "loss": v} for s, v in trace]
    record.save(os.path.join(cfg.results_dir, record.run_id + ".json"))
    _log(f"saved {path}; held-out exact-match reconstruction {recon:.3f}")
    return 0


def _merge_results(rows, path):
    existing = read_results(path) if os.path.exists(path) else []
    fresh_keys = {(r.run_id, r.x) for r in rows}
    kept = [r for r in existing if (r.run_id, r.x) not in fresh_keys]
    emit_results(kept + rows, path)


def _blocks_lang_eval(cfg: ExperimentConfig, seed, parallel):
    env_cfg = BlocksConfig()
    sessions = ensure_blocks_sessions(cfg, env_cfg)
    vocab = Vocab.from_commands(
        [ex.command for s in sessions for ex in s.examples])
    pretrained = load_pretrained(cfg, seed) if cfg.uses_pretraining else None
    lang_cfg = cfg.lang_learn
    if lang_cfg.decoder_frozen != cfg.decoder_frozen:
        from dataclasses import replace
        lang_cfg = replace(lang_cfg, decoder_frozen=cfg.decoder_frozen)

    def factory(session_index, rng):
        lang = LanguageModule(len(vocab), cfg.lang_arch, cfg.repr_spec,
                              rng.substream("lang-init"))
        if pretrained is not None:
            enc0, dec0, _ = pretrained
            dec = dec0  # frozen and shared across sessions
            enc = enc0 if lang_cfg.lam > 0 else None
        else:
            dec = BlockDecoder(env_cfg, cfg.block_arch, cfg.repr_spec,
                               rng.substream("dec-init"))
            enc = None
        return NeuralBlocksModel(lang, dec, vocab, lang_cfg, env_cfg, rng,
                                 enc=enc)

    accuracy, log = online_accuracy(sessions, factory, env_cfg,
                                    RngStream(seed), parallel=parallel)
    x = len(log)
    return accuracy, log, [(x, accuracy)]


def _strings_lang_eval(cfg: ExperimentConfig, seed, parallel):
    groups = ensure_string_groups(cfg)
    pretrained = load_pretrained(cfg, seed) if cfg.uses_pretraining else None
    lang_cfg = cfg.lang_learn
    if lang_cfg.decoder_frozen != cfg.decoder_frozen:
        from dataclasses import replace
        lang_cfg = replace(lang_cfg, decoder_frozen=cfg.decoder_frozen)
    dec_init = pretrained[1].copy_of_values() if pretrained else None

    def factory(group_index, size, rng):
        triples = [(c, s, sp) for c, s, sp in
                   (lambda g: [(g.instructions[ii].command, s, sp)
                               for ii, s, sp in g.train[:size]])(groups[group_index])]
        vocab = Vocab.from_commands([c for c, _, _ in triples])
        lang = LanguageModule(len(vocab), cfg.lang_arch, cfg.repr_spec,
                              rng.substream("lang-init"))
        dec = StringDecoder(cfg.string_arch, cfg.repr_spec,
                            rng.substream("dec-init"))
        if dec_init is not None:
            # pre-trained decoder used as initialization, then fine-tuned
            dec.load_values({k.replace(pretrained[1].prefix, dec.prefix, 1): v
                             for k, v in dec_init.items()})
        enc = pretrained[0] if (pretrained and lang_cfg.lam > 0) else None
        return NeuralStringsModel(lang, dec, vocab, lang_cfg, rng, enc=enc)

    curve, points = datasize_sweep(groups, factory, list(cfg.sweep_sizes),
                                   RngStream(seed), parallel=parallel)
    return curve, points, sorted(curve.items())


def cmd_lang_eval(cfg: ExperimentConfig, parallel=1, seeds=None):
    os.makedirs(cfg.results_dir, exist_ok=True)
    csv_path = os.path.join(cfg.results_dir, f"{cfg.task}-{cfg.scale}.csv")
    rows = []
    for seed in (seeds or cfg.seeds):
        t0 = time.time()
        if cfg.task == "blocks":
            metric, log, points = _blocks_lang_eval(cfg, seed, parallel)
            metrics = {"online_accuracy": metric}
        else:
            metric, log, points = _strings_lang_eval(cfg, seed, parallel)
            metrics = {f"accuracy@{size}": acc for size, acc in points}
        elapsed = time.time() - t0
        run_id = cfg.run_id(seed)
        record = RunRecord(run_id=run_id, task=cfg.task,
                           condition=cfg.condition, seed=seed,
                           config=cfg.to_dict(), per_example=list(log),
                           metrics=metrics, timings={"eval_s": elapsed})
        record.save(os.path.join(cfg.results_dir, run_id + ".json"))
        stamp = now_stamp()
        for x, acc in points:
            rows.append(ResultRow(run_id, cfg.task, cfg.condition, seed,
                                  int(x), float(acc), stamp))
        _log(f"{run_id}: {metrics} ({elapsed:.0f}s)")
    _merge_results(rows, csv_path)
    _log(f"results merged into {csv_path}")
    return 0


def cmd_analyze(cfg: ExperimentConfig, seed=None):
    from .analysis import code_usage_stats, consistency_metric, neural_codec
    if cfg.task != "blocks":
        raise ConfigError("task: consistency analysis is defined for blocks")
    seed = cfg.seeds[0] if seed is None else seed
    enc, dec, _ = load_pretrained(cfg, seed)
    env_cfg = BlocksConfig()
    os.makedirs(cfg.results_dir, exist_ok=True)
    dump = os.path.join(cfg.results_dir,
                        f"consistency-failures-s{seed}.jsonl")
    enc_fn, dec_fn = neural_codec(enc, dec, env_cfg)
    res = consistency_metric(enc_fn, dec_fn, env_cfg,
                             cfg.consistency_samples, RngStream(seed),
                             dump_path=dump)
    metrics = {
        "consistency": res.fraction,
        "consistency_unfiltered": res.fraction_unfiltered,
        "included": res.included, "excluded": res.excluded,
    }
    if cfg.repr_spec.mode == "discrete":
        from .blocks import transition_stream
        rng = RngStream(cfg.data_seed).substream("usage-transitions")
        pairs = [(t.s, t.s_prime)
                 for t in next(transition_stream(rng, 1000, env_cfg))]
        usage = code_usage_stats(enc, pairs, "blocks", env_cfg)
        metrics["code_entropy_per_variable"] = usage.entropy.tolist()
        metrics["distinct_values_per_variable"] = \
            usage.distinct_per_variable.tolist()
    record = RunRecord(run_id=f"analyze-{cfg.run_id(seed)}", task=cfg.task,
                       condition=cfg.condition, seed=seed,
                       config=cfg.to_dict(), metrics=metrics)
    record.save(os.path.join(cfg.results_dir, record.run_id + ".json"))
    _log(f"consistency {res.fraction:.3f} "
         f"({res.consistent}/{res.included} included, {res.excluded} excluded); "
         f"failures dumped to {dump}")
    return 0


def cmd_verify(fast=False):
    from .verify import run_all_checks
    kwargs = dict(num_grad_cases=40, gumbel_draws=20_000, string_cases=5_000,
                  block_cases=500) if fast else {}
    results = run_all_checks(**kwargs)
    for r in results:
        _log(f"{'PASS' if r.passed else 'FAIL'} {r.name}"
             + (f"  ({r.detail})" if r.detail else ""))
    failed = [r for r in results if not r.passed]
    _log(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# argument handling


def _resolve_config(args):
    overrides = env_overrides()
    for flag in ("condition", "scale"):
        value = getattr(args, flag, None)
        if value:
            overrides[flag] = value
    if getattr(args, "out", None):
        overrides["results_dir"] = args.out
    if getattr(args, "checkpoint", None):
        overrides["checkpoint_dir"] = args.checkpoint
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if args.config:
        return load_config(args.config, overrides)
    name = f"{args.task}-{overrides.get('scale', 'desk')}"
    base = preset(name, overrides.get("condition")).to_dict()
    from .config import _deep_merge, _from_dict
    return _from_dict(_deep_merge(base, overrides)).validate()


def _add_common(p):
    p.add_argument("--task", choices=("blocks", "strings"), default="blocks")
    p.add_argument("--config", help="JSON config file (preset/include aware)")
    p.add_argument("--condition", choices=CONDITIONS)
    p.add_argument("--scale", choices=("desk", "paper"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="results directory")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--parallel", type=int, default=1)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="actground",
        description="Grounded instruction following with pre-learned "
                    "action representations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "env-learn", "lang-eval", "analyze"):
        _add_common(sub.add_parser(name))
    vp = sub.add_parser("verify")
    vp.add_argument("--fast", action="store_true",
                    help="reduced case counts for smoke testing")
    args = parser.parse_args(argv)

    try:
        if args.command == "verify":
            return cmd_verify(fast=args.fast)
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "env-learn":
            return cmd_env_learn(cfg, seed=args.seed)
        if args.command == "lang-eval":
            seeds = None if args.seed is None else [args.seed]
            return cmd_lang_eval(cfg, parallel=args.parallel, seeds=seeds)
        if args.command == "analyze":
            return cmd_analyze(cfg, seed=args.seed)
        raise AssertionError(args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingCheckpoint as e:
        print(f"missing checkpoint: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
