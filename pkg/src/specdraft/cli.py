"""Command-line front end: pretrain, distill-gen, finetune, eval, report.

Exit codes: 0 success, 2 bad config or malformed input, 3 I/O failure,
4 training divergence. Failures print one line to stderr::

    specdraft: error code=<n> kind=<kind> msg="<message>"
"""
import argparse
import csv
import dataclasses
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import synthetic
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .errors import TrainingError, ValidationError
from .losses import LossConfig
from .model import ToyLMConfig, TransformerLM
from .pipeline import (LinearWarmupDecay, default_tasks, eval_sweep, finetune,
                       generate_distillation_dataset, make_synthetic_corpus, pretrain,
                       read_corpus, read_distill_dataset, read_prompt_file, train_target,
                       write_corpus, write_distill_dataset, write_prompt_file)
from .specdec import read_metrics, write_metrics


class CLIError(Exception):
    def __init__(self, code, kind, msg):
        super().__init__(msg)
        self.code, self.kind = code, kind


def _paths(cfg):
    out = cfg.out_dir
    return {
        "corpus": out / "corpus.bin",
        "target": Path(cfg.target_ckpt) if cfg.target_ckpt else out / "target.ckpt",
        "draft": out / "draft_pretrain.ckpt",
        "prompts": Path(cfg.prompts_file) if cfg.prompts_file else out / "seed_prompts.txt",
        "distill": out / "distill.jsonl",
        "finetune": Path(cfg.checkpoints) if cfg.checkpoints else out / f"finetune_{cfg.loss_kind}",
        "metrics": Path(cfg.metrics) if cfg.metrics else out / f"metrics_{cfg.loss_kind}.jsonl",
    }


def _model_config(cfg, role):
    return ToyLMConfig(vocab_size=64, context_len=cfg.context_len,
                       layers=getattr(cfg, f"{role}_layers"), heads=getattr(cfg, f"{role}_heads"),
                       hidden_dim=getattr(cfg, f"{role}_hidden"),
                       intermediate_dim=getattr(cfg, f"{role}_intermediate"))


def _log(msg):
    print(msg, file=sys.stderr)


def _get_target(cfg, paths, train_if_missing=False):
    path = paths["target"]
    if path.exists():
        return load_checkpoint(path).model
    if not train_if_missing:
        raise FileNotFoundError(f"target checkpoint not found: {path}")
    _log(f"training toy target -> {path}")
    ck = train_target(_model_config(cfg, "target"), seed=cfg.seed, steps=cfg.target_steps)
    save_checkpoint(ck, path)
    return ck.model


def cmd_pretrain(cfg):
    paths = _paths(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    corpus = make_synthetic_corpus(cfg.seed, cfg.corpus_chunks, cfg.chunk_len, cfg.context_len)
    write_corpus(corpus, paths["corpus"])
    _get_target(cfg, paths, train_if_missing=True)
    draft = TransformerLM.init(_model_config(cfg, "draft"), seed=cfg.seed + 100)
    sched = LinearWarmupDecay(cfg.pretrain_lr, max(cfg.pretrain_steps // 20, 1), cfg.pretrain_steps)
    ck = pretrain(draft, corpus, cfg.pretrain_steps, sched, cfg.batch_size, cfg.seq_len,
                  seed=cfg.seed + 200, clip_norm=cfg.clip_norm)
    save_checkpoint(ck, paths["draft"])
    if ck.history:
        _log(f"pretrain: final loss {np.mean(ck.history[-20:]):.4f}")
    return 0


def cmd_distill_gen(cfg):
    paths = _paths(cfg)
    target = _get_target(cfg, paths)
    if not cfg.prompts_file and not paths["prompts"].exists():
        write_prompt_file(synthetic.make_prompts("qa", cfg.n_seed_prompts, cfg.seed + 300),
                          paths["prompts"])
    prompts = read_prompt_file(paths["prompts"])
    ds = generate_distillation_dataset(target, prompts, cfg.temps, cfg.top_p, cfg.per_prompt,
                                       seed=cfg.seed + 400, max_new_tokens=cfg.max_new_tokens)
    write_distill_dataset(ds, paths["distill"])
    _log(f"distill-gen: {len(ds)} samples -> {paths['distill']}")
    return 0


def cmd_finetune(cfg):
    paths = _paths(cfg)
    target = _get_target(cfg, paths)
    base = load_checkpoint(paths["draft"])
    ds = read_distill_dataset(paths["distill"])
    corpus = read_corpus(paths["corpus"])
    loss_cfg = LossConfig(cfg.loss_kind, cfg.kl_direction, cfg.tvdpp_mode, cfg.tvdpp_population,
                          cfg.tvdpp_sign, pretrain_loss=cfg.pretrain_loss)
    sched = LinearWarmupDecay(cfg.finetune_lr, max(cfg.finetune_steps // 30, 1), max(cfg.finetune_steps, 1))
    cks = finetune(base, target, ds, corpus, loss_cfg, cfg.finetune_steps, cfg.mix,
                   cfg.finetune_batch, sched, cfg.n_checkpoints, seed=cfg.seed + 500,
                   clip_norm=cfg.clip_norm, checkpoint_dir=paths["finetune"])
    _log(f"finetune: {len(cks)} checkpoints -> {paths['finetune']}")
    return 0


def cmd_eval(cfg):
    paths = _paths(cfg)
    target = _get_target(cfg, paths)
    src = paths["finetune"]
    if src.is_dir():
        files = sorted(src.glob("*.ckpt"))
        if not files:
            raise FileNotFoundError(f"no checkpoints in {src}")
    else:
        files = [src]
    tasks = default_tasks(n_prompts=cfg.n_eval_prompts)
    recs = eval_sweep(files, target, tasks, cfg.gammas, cfg.eval_seeds, c=cfg.c or None,
                      formula=cfg.mbsu_formula)
    paths["metrics"].parent.mkdir(parents=True, exist_ok=True)
    write_metrics(recs, paths["metrics"])
    _log(f"eval: {len(recs)} records -> {paths['metrics']}")
    return 0


def _stats(vals):
    a = np.asarray(vals, dtype=float)
    se = a.std(ddof=1) / np.sqrt(a.size) if a.size > 1 else 0.0
    return float(a.mean()), float(se)


def build_report(records, trend_gamma=3):
    """Aggregate rows, trend rows and TVD++-vs-TVD flags from metrics records.

    Aggregates use each (task, loss, gamma) group's last checkpoint and take
    mean and standard error over seeds. The trend averages tau over seeds
    per (checkpoint, task, loss) at ``trend_gamma`` (or the smallest gamma
    present when that one is absent).
    """
    groups = defaultdict(list)
    for r in records:
        groups[(r.task, r.loss_kind, r.gamma)].append(r)
    agg = []
    for (task, loss, g), rs in sorted(groups.items()):
        last = max(r.checkpoint for r in rs)
        rs = [r for r in rs if r.checkpoint == last]
        row = {"task": task, "loss_kind": loss, "gamma": g, "checkpoint": last, "n": len(rs)}
        for m in ("tau", "mbsu", "token_rate_ratio", "accept_rate"):
            row[m + "_mean"], row[m + "_stderr"] = _stats([getattr(r, m) for r in rs])
        agg.append(row)
    gammas = {r.gamma for r in records}
    tg = trend_gamma if trend_gamma in gammas else min(gammas)
    tr = defaultdict(list)
    for r in records:
        if r.gamma == tg:
            tr[(r.checkpoint, r.task, r.loss_kind)].append(r.tau)
    trend = [{"checkpoint": c, "task": t, "loss_kind": l, "gamma": tg, "tau_mean": float(np.mean(v)),
              "n": len(v)} for (c, t, l), v in sorted(tr.items())]
    by = {(a["task"], a["loss_kind"], a["gamma"]): a for a in agg}
    flags = []
    for (task, loss, g), a in by.items():
        if loss == "tvdpp" and (task, "tvd", g) in by:
            ref = by[(task, "tvd", g)]["tau_mean"]
            if a["tau_mean"] < ref - 0.02:
                flags.append(f"FLAG tvdpp below tvd: task={task} gamma={g} "
                             f"tvdpp={a['tau_mean']:.4f} tvd={ref:.4f}")
    return agg, trend, flags


def _write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_report(cfg, files):
    if not files:
        raise ConfigError("report needs at least one metrics file")
    records = []
    for f in files:
        if not Path(f).exists():
            raise FileNotFoundError(f"metrics file not found: {f}")
        records += read_metrics(f)
    if not records:
        raise ValidationError("no metrics records")
    agg, trend, flags = build_report(records, cfg.trend_gamma)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(agg, cfg.out_dir / "report_aggregate.csv")
    _write_csv(trend, cfg.out_dir / "report_trend.csv")
    print(f"{'task':6} {'loss':6} {'gamma':>5} {'tau':>15} {'mbsu':>15}")
    for a in agg:
        print(f"{a['task']:6} {a['loss_kind']:6} {a['gamma']:5d} "
              f"{a['tau_mean']:8.4f}±{a['tau_stderr']:.4f} {a['mbsu_mean']:8.4f}±{a['mbsu_stderr']:.4f}")
    for f in flags:
        print(f)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "distill-gen": cmd_distill_gen, "finetune": cmd_finetune,
            "eval": cmd_eval}


# short spellings; --steps means the phase's own step count
_ALIASES = {("finetune", "loss_kind"): ["--loss"], ("eval", "loss_kind"): ["--loss"],
            ("finetune", "finetune_steps"): ["--steps"], ("pretrain", "pretrain_steps"): ["--steps"]}


def build_parser():
    parser = argparse.ArgumentParser(prog="specdraft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        for f in dataclasses.fields(RunConfig):
            flags = ["--" + f.name.replace("_", "-")] + _ALIASES.get((name, f.name), [])
            if f.name in ("gammas", "eval_seeds", "temps"):
                p.add_argument(*flags, dest=f.name, default=None, help="comma separated")
            else:
                p.add_argument(*flags, dest=f.name, default=None)
        p.add_argument("--gamma", dest="gamma_list", action="append", type=int,
                       help="repeatable; same as --gammas")
        if name == "report":
            p.add_argument("files", nargs="*", help="metrics JSON-lines files")
    return parser


def _fail(code, kind, msg):
    msg = str(msg).replace('"', "'").replace("\n", " ")
    print(f'specdraft: error code={code} kind={kind} msg="{msg}"', file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)
                 if getattr(args, f.name) is not None}
    if args.gamma_list:
        overrides["gammas"] = args.gamma_list
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "report":
            return cmd_report(cfg, args.files)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / f"config_{args.command}.txt").write_text(dump_config(cfg))
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValidationError) as exc:
        return _fail(2, "config", exc)
    except OSError as exc:
        return _fail(3, "io", exc)
    except TrainingError as exc:
        return _fail(4, "divergence", exc)


if __name__ == "__main__":
    sys.exit(main())
