"""Flat typed run configuration.

File format: one ``key = value`` per line, ``#`` starts a comment, lists are
comma separated. Every key below has a default; unknown keys are rejected.
Command-line flags mirror keys one to one (``--finetune-steps`` sets
``finetune_steps``).
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    out: str = "runs/default"
    seed: int = 0
    # models
    target_ckpt: str = ""  # empty: <out>/target.ckpt, trained on first use
    target_layers: int = 4
    target_heads: int = 4
    target_hidden: int = 128
    target_intermediate: int = 352
    target_steps: int = 800
    draft_layers: int = 2
    draft_heads: int = 2
    draft_hidden: int = 32
    draft_intermediate: int = 88
    context_len: int = 256
    # phase 1
    corpus_chunks: int = 200
    chunk_len: int = 256
    pretrain_steps: int = 600
    pretrain_lr: float = 3.0
    batch_size: int = 8
    seq_len: int = 64
    # phase 2
    prompts_file: str = ""  # empty: synthetic qa prompts written to <out>/seed_prompts.txt
    n_seed_prompts: int = 48
    temps: list = field(default_factory=lambda: [0.0, 0.3, 0.7, 1.0])
    top_p: float = 0.95
    per_prompt: int = 1
    max_new_tokens: int = 48
    # phase 3
    loss_kind: str = "tvdpp"
    kl_direction: str = "forward"
    tvdpp_mode: str = "full_support"
    tvdpp_population: str = "batch"
    tvdpp_sign: str = "descent"
    pretrain_loss: str = "distill"
    finetune_steps: int = 600
    finetune_lr: float = 3.0
    finetune_batch: int = 10
    mix_ratio: str = "9:1"
    n_checkpoints: int = 8
    clip_norm: float = 1.0
    # evaluation
    checkpoints: str = ""  # empty: <out>/finetune_<loss_kind>
    metrics: str = ""  # empty: <out>/metrics_<loss_kind>.jsonl
    gammas: list = field(default_factory=lambda: [3, 5])
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_eval_prompts: int = 16
    c: float = 0.0  # 0: draft/target parameter ratio
    mbsu_formula: str = "tau_over_cgamma_plus_1"
    trend_gamma: int = 3

    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def mix(self):
        try:
            a, b = (int(x) for x in self.mix_ratio.split(":"))
        except ValueError:
            raise ConfigError(f"mix_ratio must look like '9:1', got {self.mix_ratio!r}") from None
        return a, b


_LIST_TYPES = {"temps": float, "gammas": int, "eval_seeds": int}


def field_types():
    hints = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    return {k: (list if k in _LIST_TYPES else {"int": int, "float": float, "str": str}.get(v, v))
            for k, v in hints.items()}


def convert(key, raw):
    types = field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if key in _LIST_TYPES:
            if isinstance(raw, (list, tuple)):
                return [_LIST_TYPES[key](x) for x in raw]
            return [_LIST_TYPES[key](x) for x in str(raw).split(",") if x.strip()]
        return types[key](raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        values[k] = convert(k, v)
    cfg = RunConfig(**values)
    cfg.mix  # validate eagerly
    return cfg


def dump_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"
