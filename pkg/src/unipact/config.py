"""Run configuration: plain-text ``key = value`` files with ``[section]`` headers."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .dataset import PromptStyle
from .experiments import Schedule
from .fusion import ModelConfig
from .synth import CATEGORIES, LATENTS, CohortConfig
from .training import StageConfig

SEED_ENV = "UNIPACT_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    n_train: int = 2000
    n_test: int = 500
    n_val: int = 200


@dataclass
class RunSection:
    seed: int = 42
    threads: int = 1


@dataclass
class EvalConfig:
    n_boot: int = 1000
    boot_seed: int = 0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    style: PromptStyle = field(default_factory=PromptStyle)
    schedule: Schedule = field(default_factory=Schedule)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed_source: str = "config"  # or the environment variable name when overridden

    def __post_init__(self):
        # one global seed drives the cohort as well as training
        self.cohort = replace(self.cohort, seed=self.run.seed)

    @property
    def seed(self) -> int:
        return self.run.seed

    def stage(self, k: int) -> StageConfig:
        return {0: self.schedule.pretrain, 1: self.schedule.stage1, 2: self.schedule.stage2}[k]


# -- value coercion -------------------------------------------------------------------


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if like is None:
            return None if raw.lower() in ("", "none") else int(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _plain_keys(obj, skip=()) -> list:
    return [f.name for f in fields(obj) if f.name not in skip]


_STAGE_SKIP = ("stage", "lora", "require_previous", "category_weights")
_STAGE_EXTRA = ("lora_r", "lora_alpha", "lora_dropout")
_SECTIONS = ("run", "cohort", "split", "encoder", "decoder", "model", "prompt", "pretrain", "stage1", "stage2",
             "eval")


def _stage_items(s: StageConfig) -> dict:
    d = {k: getattr(s, k) for k in _plain_keys(s, _STAGE_SKIP)}
    d.update(lora_r=s.lora.r, lora_alpha=s.lora.alpha, lora_dropout=s.lora.dropout)
    return d


def _sections(cfg: RunConfig) -> dict:
    cohort = {k: getattr(cfg.cohort, k) for k in _plain_keys(cfg.cohort, ("category_betas", "seed"))}
    for cat in sorted(cfg.cohort.category_betas):
        for lat, b in sorted(cfg.cohort.category_betas[cat].items()):
            cohort[f"beta.{cat}.{lat}"] = b
    return {
        "run": {k: getattr(cfg.run, k) for k in _plain_keys(cfg.run)},
        "cohort": cohort,
        "split": {k: getattr(cfg.split, k) for k in _plain_keys(cfg.split)},
        "encoder": {k: getattr(cfg.model.encoder, k) for k in _plain_keys(cfg.model.encoder)},
        "decoder": {k: getattr(cfg.model.decoder, k) for k in _plain_keys(cfg.model.decoder, ("vocab_size",))},
        "model": {"d_proj_hidden": cfg.model.d_proj_hidden},
        "prompt": {"role": cfg.style.role, "task_desc": cfg.style.task_desc},
        "pretrain": _stage_items(cfg.schedule.pretrain),
        "stage1": _stage_items(cfg.schedule.stage1),
        "stage2": _stage_items(cfg.schedule.stage2),
        "eval": {k: getattr(cfg.eval, k) for k in _plain_keys(cfg.eval)},
    }


def dumps(cfg: RunConfig) -> str:
    """Canonical text form; ``loads(dumps(c)) == c`` up to the seed source."""
    out = io.StringIO()
    for name, items in _sections(cfg).items():
        out.write(f"[{name}]\n")
        for k, v in items.items():
            out.write(f"{k} = {_fmt(v)}\n")
        out.write("\n")
    return out.getvalue()


def _apply(obj, items: dict, section: str, unknown: list):
    changes = {}
    for k, raw in items.items():
        if not hasattr(obj, k) or (section == "cohort" and k in ("category_betas", "seed")):
            unknown.append(f"{section}.{k}")
            continue
        changes[k] = _coerce(raw, getattr(obj, k), f"{section}.{k}")
    return changes


def _stage_from(base: StageConfig, items: dict, section: str, unknown: list) -> StageConfig:
    lora = {}
    rest = {}
    for k, raw in items.items():
        if k in _STAGE_EXTRA:
            attr = k[len("lora_"):]
            lora[attr] = _coerce(raw, getattr(base.lora, attr), f"{section}.{k}")
        elif k in _STAGE_SKIP:
            unknown.append(f"{section}.{k}")
        else:
            rest[k] = raw
    changes = _apply(base, rest, section, unknown)
    return replace(base, lora=replace(base.lora, **lora), **changes)


def loads(text: str, source: str = "<config>", env: Optional[dict] = None) -> RunConfig:
    """Parse a config; missing keys keep defaults, unknown sections or keys raise ConfigError."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}".replace("\n", " ")) from None
    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    sec = {s: dict(parser[s]) for s in parser.sections() if s in _SECTIONS}
    base = RunConfig()

    run = replace(base.run, **_apply(base.run, sec.get("run", {}), "run", unknown))
    betas = {}
    cohort_items = {}
    for k, raw in sec.get("cohort", {}).items():
        parts = k.split(".")
        if parts[0] == "beta" and len(parts) == 3 and parts[1] in CATEGORIES and parts[2] in LATENTS:
            betas.setdefault(parts[1], {})[parts[2]] = _coerce(raw, 0.0, f"cohort.{k}")
        else:
            cohort_items[k] = raw
    split = replace(base.split, **_apply(base.split, sec.get("split", {}), "split", unknown))
    ev = replace(base.eval, **_apply(base.eval, sec.get("eval", {}), "eval", unknown))
    enc_ch = _apply(base.model.encoder, sec.get("encoder", {}), "encoder", unknown)
    dec_items = dict(sec.get("decoder", {}))
    if "vocab_size" in dec_items:
        unknown.append("decoder.vocab_size")
        dec_items.pop("vocab_size")
    dec_ch = _apply(base.model.decoder, dec_items, "decoder", unknown)
    model_ch = _apply(base.model, sec.get("model", {}), "model", unknown)
    for k in ("encoder", "decoder"):
        if k in model_ch:
            unknown.append(f"model.{k}")
            model_ch.pop(k)
    prompt = sec.get("prompt", {})
    for k in prompt:
        if k not in ("role", "task_desc"):
            unknown.append(f"prompt.{k}")
    stages = {}
    for name, k in (("pretrain", 0), ("stage1", 1), ("stage2", 2)):
        default = getattr(base.schedule, name)
        stages[name] = _stage_from(default, sec.get(name, {}), name, unknown)
    cohort_ch = _apply(base.cohort, cohort_items, "cohort", unknown)
    if unknown:
        raise ConfigError(f"{source}: unknown config keys: {', '.join(unknown)}")
    try:
        cohort = replace(base.cohort, category_betas=betas, **cohort_ch)
        model = ModelConfig(replace(base.model.encoder, **enc_ch), replace(base.model.decoder, **dec_ch),
                            model_ch.get("d_proj_hidden", base.model.d_proj_hidden))
        style = PromptStyle(prompt.get("role", base.style.role), prompt.get("task_desc", base.style.task_desc))
        schedule = Schedule(**stages)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from None
    cfg = RunConfig(run, cohort, split, model, style, schedule, ev)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            cfg.run.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg.seed_source = SEED_ENV
    cfg.cohort = replace(cfg.cohort, seed=cfg.run.seed)
    return cfg


def load(path, env: Optional[dict] = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text(encoding="utf-8"), str(p), env)


def default_text() -> str:
    return dumps(RunConfig())
