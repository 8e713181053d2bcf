"""Answer-masked training: batch packing, staged trainable sets, the step loop.

A batch row holds one patient context (ECG rows then prompt tokens) followed
by any number of question blocks.  Each block sees the shared context and
itself only, and its position ids continue from the end of the context, so a
block computes exactly what the standalone sequence
``[ecg | prompt | question | answer]`` would.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .dataset import Sample
from .fusion import FusionModel, yes_no_probability
from .layers import LoraConfig
from .optim import Adam
from .tokenizer import Vocab


class StageOrderError(RuntimeError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class TrainBatch:
    token_ids: np.ndarray  # (B, Tt) text ids, PAD after each row's end
    ecg_patches: Optional[np.ndarray]  # (B, N, patch_len * C) or None
    n_ecg: int
    positions: np.ndarray  # (B, T) position ids, T = n_ecg + Tt
    attn: np.ndarray  # (B, T, T) True where query row may attend key column
    targets: np.ndarray  # (B, T) id of the token each position predicts (PAD if none)
    answer_mask: np.ndarray  # (B, T) position predicts an answer token
    lm_mask: np.ndarray  # (B, T) position predicts the next text token of its block
    valid: np.ndarray  # (B, T) non-padding positions
    score_index: list  # (row, position, sample_id, task_id, label) per question

    @property
    def shape(self) -> tuple:
        return self.positions.shape


def build_batch(samples: Sequence[Sample], vocab: Vocab, model: Optional[FusionModel] = None,
                teacher_forced: bool = True) -> TrainBatch:
    """Pack samples into one right-padded batch.

    With ``teacher_forced`` each answer token is placed after its question
    and the position before it is marked in ``answer_mask``; otherwise only
    the scoring positions are recorded.
    """
    if not samples:
        raise BatchError("empty batch")
    has_ecg = [s.ecg is not None for s in samples]
    if any(has_ecg) and not all(has_ecg):
        raise BatchError("a batch must be all with-ECG or all without-ECG")
    patches = None
    n_e = 0
    if all(has_ecg):
        if model is None:
            raise BatchError("a model is needed to patch ECG inputs")
        patches = model.encoder.prepare([s.ecg for s in samples])
        n_e = patches.shape[1]

    rows = []
    for s in samples:
        text = list(s.prompt_ids)
        blk = [0] * len(text)
        pos = list(range(n_e, n_e + len(text)))
        start = n_e + len(text)
        scoring = []  # (text index, item)
        for j, it in enumerate(s.items):
            if teacher_forced:
                if it.answer_id not in (vocab.yes_id, vocab.no_id):
                    raise BatchError(f"sample {s.sample_id} task {it.task_id}: answer is neither Yes nor No")
            q = list(it.question_ids)
            if not q:
                raise BatchError(f"sample {s.sample_id} task {it.task_id}: empty question")
            seg = q + ([it.answer_id] if teacher_forced else [])
            scoring.append((len(text) + len(q) - 1, it))
            text += seg
            blk += [j + 1] * len(seg)
            pos += list(range(start, start + len(seg)))
        rows.append((text, blk, pos, scoring))

    b = len(samples)
    tt = max(len(r[0]) for r in rows)
    t = n_e + tt
    token_ids = np.full((b, tt), vocab.pad_id, dtype=np.int64)
    block = np.full((b, t), -1, dtype=np.int64)
    positions = np.zeros((b, t), dtype=np.int64)
    targets = np.full((b, t), vocab.pad_id, dtype=np.int64)
    answer_mask = np.zeros((b, t), dtype=bool)
    lm_mask = np.zeros((b, t), dtype=bool)
    score_index = []
    for r, (text, blk, pos, scoring) in enumerate(rows):
        n = len(text)
        token_ids[r, :n] = text
        block[r, :n_e] = 0
        block[r, n_e:n_e + n] = blk
        positions[r, :n_e] = np.arange(n_e)
        positions[r, n_e:n_e + n] = pos
        # next-token targets within a block; the context's last token feeds the first block
        nxt = np.asarray(text[1:], dtype=np.int64)
        same = np.asarray(blk[1:]) == np.asarray(blk[:-1])
        first_block = (np.asarray(blk[:-1]) == 0) & (np.asarray(blk[1:]) == 1)
        ok = same | first_block
        targets[r, n_e:n_e + n - 1] = np.where(ok, nxt, vocab.pad_id)
        lm_mask[r, n_e:n_e + n - 1] = ok
        for ti, it in scoring:
            p = n_e + ti
            if teacher_forced:
                targets[r, p] = it.answer_id
                answer_mask[r, p] = True
            score_index.append((r, p, samples[r].sample_id, it.task_id, it.label))
    valid = block >= 0
    idx = np.arange(t)
    causal = idx[None, :] <= idx[:, None]
    bq = block[:, :, None]
    bk = block[:, None, :]
    attn = causal[None] & valid[:, None, :] & valid[:, :, None] & ((bk == 0) | (bk == bq))
    attn |= np.eye(t, dtype=bool)[None]  # padding rows attend to themselves only
    return TrainBatch(token_ids, patches, n_e, positions, attn, targets, answer_mask, lm_mask, valid, score_index)


# -- forward pieces -------------------------------------------------------------


def batch_hidden(model: FusionModel, batch: TrainBatch, rng: Optional[np.random.Generator] = None) -> T.Tensor:
    text = model.decoder.embed(batch.token_ids)
    if batch.n_ecg:
        rows = model.ecg_rows_from_patches(batch.ecg_patches, rng)
        x = T.concat([rows, text], axis=1)
    else:
        x = text
    return model.decoder.hidden(x, rng, batch.positions, batch.attn)


def gather_positions(h: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Rows of (B, T, d) ``h`` where ``mask`` is true, as (K, d) in row-major order."""
    b, t, d = h.shape
    return T.take_rows(T.reshape(h, (b * t, d)), np.flatnonzero(mask.reshape(-1)))


def batch_logits(model: FusionModel, batch: TrainBatch, rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Full (B*T, V) logits; mostly for tests, training gathers first."""
    h = batch_hidden(model, batch, rng)
    b, t, d = h.shape
    return model.decoder.head(T.reshape(h, (b * t, d)))


def answer_logits(model: FusionModel, batch: TrainBatch, rng: Optional[np.random.Generator] = None,
                  select: Optional[np.ndarray] = None) -> T.Tensor:
    h = batch_hidden(model, batch, rng)
    sel = batch.answer_mask if select is None else select
    return model.decoder.head(gather_positions(h, sel))


def batch_loss(model: FusionModel, batch: TrainBatch, rng: Optional[np.random.Generator] = None,
               objective: str = "answer") -> T.Tensor:
    """Mean cross-entropy over answer positions (or every in-block next token for ``lm``)."""
    if objective == "answer":
        sel = batch.answer_mask
    elif objective == "lm":
        sel = batch.lm_mask
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if not sel.any():
        raise T.NoSupervisedPositions("no supervised positions: answer mask is empty")
    logits = answer_logits(model, batch, rng, sel)
    tgt = batch.targets.reshape(-1)[np.flatnonzero(sel.reshape(-1))]
    return T.cross_entropy(logits, tgt, np.ones(tgt.shape, dtype=bool))


# -- sample streams ---------------------------------------------------------------


def multitask_mix(datasets: dict, weights: Optional[dict] = None, seed: int = 0) -> Iterator:
    """Endless stream of ``(name, item)``; the dataset is drawn per ``weights``.

    Within a dataset items come from a shuffled cycle, reshuffled on every
    pass, so a single dataset yields a permutation per pass.
    """
    names = [n for n in datasets if len(datasets[n]) > 0]
    if not names:
        raise ValueError("multitask_mix needs at least one nonempty dataset")
    w = np.array([1.0 if weights is None else float(weights.get(n, 0.0)) for n in names])
    if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
        raise ValueError(f"weights must be non-negative with a positive total, got {dict(zip(names, w))}")
    w = w / w.sum()
    rng = np.random.default_rng([seed, 3])
    orders = {n: iter(()) for n in names}

    def next_item(n):
        try:
            return next(orders[n])
        except StopIteration:
            perm = rng.permutation(len(datasets[n]))
            orders[n] = iter(perm.tolist())
            return next(orders[n])

    single = len(names) == 1
    while True:
        k = 0 if single else int(rng.choice(len(names), p=w))
        n = names[k]
        yield n, datasets[n][next_item(n)]


# -- stages -----------------------------------------------------------------------

STAGE_NAMES = {0: "pretrain", 1: "projector", 2: "lora"}


@dataclass
class StageConfig:
    stage: int = 1
    lr: float = 1e-3
    epochs: float = 1.0
    batch_size: int = 8
    lora: LoraConfig = field(default_factory=LoraConfig)
    train_projector: bool = True  # stage 2 keeps updating the projector
    eval_every: int = 0  # steps between validation passes; 0 = once per epoch
    max_steps: int = 0  # 0 = no cap
    target_loss: float = 0.0  # stop once the mean of the last 10 losses is below this; 0 = off
    require_previous: bool = True
    category_weights: Optional[dict] = None
    questions_per_row: int = 0  # random subset of a sample's questions per row; 0 = all
    objective: str = ""  # default: lm for stage 0, answer otherwise

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise ValueError(f"stage must be one of {sorted(STAGE_NAMES)}, got {self.stage}")
        if self.batch_size <= 0 or self.epochs <= 0 or self.lr <= 0:
            raise ValueError("batch_size, epochs and lr must be positive")

    @property
    def loss_objective(self) -> str:
        return self.objective or ("lm" if self.stage == 0 else "answer")


@dataclass
class StageResult:
    stage: int
    steps: int
    losses: list  # (step, stage, loss)
    best_step: int = -1
    best_val: float = float("nan")
    seconds: float = 0.0


def trainable_set(model: FusionModel, cfg: StageConfig) -> list:
    if cfg.stage == 0:
        return [p for _, p in model.decoder.named_parameters()
                if not (p.name.endswith(".lora_A") or p.name.endswith(".lora_B"))]
    if cfg.stage == 1:
        return model.projector.parameters()
    return model.adapter_parameters() + (model.projector.parameters() if cfg.train_projector else [])


def _check_order(model: FusionModel, cfg: StageConfig) -> None:
    if cfg.stage == 2 and cfg.require_previous and 1 not in model.stages:
        raise StageOrderError("stage 2 needs a stage-1 checkpoint (pass --init, or disable the check)")
    if cfg.stage == 0 and model.lora is not None:
        raise StageOrderError("decoder pretraining must run before adapters are attached")


def _subsample(s: Sample, k: int, rng: np.random.Generator) -> Sample:
    if not k or len(s.items) <= k:
        return s
    keep = np.sort(rng.choice(len(s.items), size=k, replace=False))
    return Sample(s.sample_id, s.prompt_ids, [s.items[i] for i in keep], s.ecg, s.meta)


def _snapshot(params) -> list:
    return [p.data.copy() for p in params]


def _restore(params, saved) -> None:
    for p, d in zip(params, saved):
        p.data = d.copy()


def train_stage(model: FusionModel, data: Union[Sequence[Sample], dict], vocab: Vocab, cfg: StageConfig,
                seed: int = 0, val: Optional[Callable[[FusionModel], float]] = None,
                log: Optional[Callable[[str], None]] = None) -> StageResult:
    """Run one training stage in place and return its loss curve.

    ``data`` is a list of samples or a ``{name: samples}`` mapping mixed by
    :func:`multitask_mix`.  ``val`` (model -> score, higher is better) picks
    the best parameters seen at each evaluation point.
    """
    _check_order(model, cfg)
    datasets = data if isinstance(data, dict) else {"all": list(data)}
    n_items = sum(len(v) for v in datasets.values())
    if n_items == 0:
        raise ValueError("no training samples")
    t0 = time.time()
    with_ecg = any(s.ecg is not None for v in datasets.values() for s in v)
    if cfg.stage == 1 and not with_ecg:
        # nothing reaches the projector without ECG rows
        model.stages.append(1)
        return StageResult(1, 0, [])
    if cfg.stage == 2 and model.lora is None:
        model.add_lora(cfg.lora, seed)

    params = trainable_set(model, cfg)
    model.set_trainable(params)
    opt = Adam(params, lr=cfg.lr)
    weights = cfg.category_weights
    if weights is None and len(datasets) > 1:
        # every sub-task equally represented
        weights = {n: float(len(v[0].items)) if v else 0.0 for n, v in datasets.items()}
    stream = multitask_mix(datasets, weights, seed=seed * 7919 + cfg.stage)
    steps_per_epoch = max(1, int(np.ceil(n_items / cfg.batch_size)))
    total = int(np.ceil(cfg.epochs * steps_per_epoch))
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    eval_every = cfg.eval_every or steps_per_epoch
    drop_rng = np.random.default_rng([seed, 5, cfg.stage])
    pick_rng = np.random.default_rng([seed, 6, cfg.stage])
    objective = cfg.loss_objective

    losses = []
    best = (-np.inf, -1, None)
    for step in range(1, total + 1):
        items = [_subsample(next(stream)[1], cfg.questions_per_row, pick_rng) for _ in range(cfg.batch_size)]
        batch = build_batch(items, vocab, model)
        opt.zero_grad()
        loss = batch_loss(model, batch, drop_rng, objective)
        T.backward(loss)
        opt.step()
        lv = loss.item()
        losses.append((step, cfg.stage, lv))
        if log and (step % 50 == 0 or step == total):
            recent = np.mean([x[2] for x in losses[-50:]])
            log(f"stage {cfg.stage} step {step}/{total} loss {recent:.4f} ({time.time() - t0:.0f}s)")
        if val is not None and (step % eval_every == 0 or step == total):
            score = float(val(model))
            if log:
                log(f"stage {cfg.stage} step {step} validation {score:.4f}")
            if score > best[0]:
                best = (score, step, _snapshot(params))
        if cfg.target_loss > 0 and len(losses) >= 10 and np.mean([x[2] for x in losses[-10:]]) < cfg.target_loss:
            total = step
            break
    model.set_trainable([])
    result = StageResult(cfg.stage, total, losses, seconds=time.time() - t0)
    if best[2] is not None:
        _restore(params, best[2])
        result.best_val, result.best_step = best[0], best[1]
    model.stages.append(cfg.stage)
    return result


# -- scoring ----------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    subtask_id: str
    sample_id: str
    score: float
    label: Optional[int]


def score_samples(model: FusionModel, samples: Sequence[Sample], vocab: Vocab, batch_size: int = 16) -> list:
    """P(Yes) for every (sample, question) pair, in input order."""
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            groups = {}
            # ECG and no-ECG samples cannot share a batch
            for s in chunk:
                groups.setdefault(s.ecg is not None, []).append(s)
            rows = {}
            for group in groups.values():
                batch = build_batch(group, vocab, model, teacher_forced=False)
                sel = np.zeros(batch.shape, dtype=bool)
                for r, p, *_ in batch.score_index:
                    sel[r, p] = True
                logits = answer_logits(model, batch, None, sel).data
                # gathered rows follow row-major order, which score_index also follows
                order = sorted(range(len(batch.score_index)), key=lambda k: batch.score_index[k][:2])
                for k, li in zip(order, range(len(order))):
                    _, _, sid, tid, lab = batch.score_index[k]
                    z = logits[li]
                    rows[(sid, tid)] = ScoreRow(tid, sid, float(yes_no_probability(z[vocab.yes_id], z[vocab.no_id])), lab)
            for s in chunk:
                for it in s.items:
                    out.append(rows[(s.sample_id, it.task_id)])
    return out


def write_loss_csv(path, losses: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "stage", "loss"])
        for step, stage, loss in losses:
            w.writerow([step, stage, repr(float(loss))])


def read_loss_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.DictReader(f)
        return [(int(row["step"]), int(row["stage"]), float(row["loss"])) for row in r]
