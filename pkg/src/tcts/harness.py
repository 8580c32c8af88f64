"""Training and evaluation loops for the teacher and the four student regimes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import __version__, checkpoint
from .autodiff import Tape
from .errors import ConfigError, DataContract, IncompatibleCheckpoint
from .losses import combined_xe_tcts, kl_loss, soft_targets_from_teacher, xe_loss
from .metrics import IdfTable, MetricReport, build_idf, cider, score_all
from .model import (Inventory, ModelParams, SceneBatch, bind, init_params, make_batch,
                    rollout, teacher_forced)
from .rl import pg_loss, scst_reward, tcts_adjustment, tcts_reward_vector
from .synthgen import DatasetRecord, GenConfig, gen_dataset, read_jsonl, split
from .textcore import PAD, Caption, Vocab, build_vocab, decode, encode, lcs_partition

log = logging.getLogger(__name__)

MODES = ("teacher", "xe", "tcts-xe", "scst", "tcts-rl")
OPTIMIZERS = ("adam", "sgd")
XE_LR, RL_LR = 5e-3, 5e-4


@dataclass
class ExperimentConfig:
    mode: str = "xe"
    lambda1: float = 0.2
    lambda2: float = 0.02
    epochs: int = 15
    batch_size: int = 32
    lr: float | None = None  # None: 5e-3 for XE-stage modes, 5e-4 for RL modes
    lr_decay: float = 0.5
    optimizer: str = "adam"
    seed: int = 0
    hidden: int = 64
    max_len: int = 16
    # dataset (used when ``data`` is unset, and by the ``gen`` command)
    num_records: int = 2000
    attr_vocab_size: int = 50
    min_count: int = 5
    # training details
    grad_clip: float = 5.0
    teacher_rl_epochs: int = 0
    cache_teacher_captions: bool = True
    early_stopping: bool = False
    temperature: float = 1.0
    # paths
    data: str | None = None
    ckpt_in: str | None = None
    teacher_ckpt: str | None = None
    ckpt_out: str | None = None
    report: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.epochs < 0 or self.teacher_rl_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.hidden < 1 or self.max_len < 1:
            raise ConfigError("batch_size, hidden and max_len must be positive")
        if (self.lr is not None and self.lr <= 0) or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be > 0 and lr_decay in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")

    @property
    def base_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return RL_LR if self.mode in ("scst", "tcts-rl") else XE_LR

    def require_paths(self):
        """Checkpoint prerequisites of the CLI ``train`` command."""
        if self.mode in ("tcts-xe", "tcts-rl") and not self.teacher_ckpt:
            raise ConfigError(f"mode {self.mode} needs teacher_ckpt")
        if self.mode in ("scst", "tcts-rl") and not self.ckpt_in:
            raise ConfigError(f"mode {self.mode} needs an XE-stage ckpt_in")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(**{**asdict(self), **changes})

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Corpus:
    """Records with their vocabulary, visual inventory and encoded references."""

    def __init__(self, records: Sequence[DatasetRecord], min_count: int = 5, max_len: int = 16,
                 max_objects: int = 4):
        self.records = list(records)
        self.max_len = max_len
        self.max_objects = max_objects
        train = split(self.records, "train")
        if not train:
            raise DataContract("dataset has no train split")
        self.vocab: Vocab = build_vocab((t for r in train for t in r.ref_tokens), min_count)
        self.inventory = Inventory.from_records(self.records)
        self.refs: dict[int, list[Caption]] = {
            r.id: [encode(t, self.vocab, max_len) for t in r.ref_tokens] for r in self.records
        }
        self._idf: dict[str, IdfTable] = {}

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "Corpus":
        if config.data:
            try:
                records = read_jsonl(config.data)
            except (OSError, ValueError, TypeError) as exc:
                raise DataContract(f"cannot read dataset {config.data}: {exc}") from None
        else:
            records = gen_dataset(GenConfig(config.num_records, config.seed, config.attr_vocab_size))
        return cls(records, config.min_count, config.max_len)

    def split(self, name: str) -> list[DatasetRecord]:
        return split(self.records, name)

    def idf(self, name: str) -> IdfTable:
        if name not in self._idf:
            self._idf[name] = build_idf([self.ref_ids(r) for r in self.split(name)])
        return self._idf[name]

    def ref_ids(self, record: DatasetRecord) -> list[tuple[int, ...]]:
        return [c.interior for c in self.refs[record.id]]

    def vocab_hash(self) -> str:
        return checkpoint.vocab_hash(self.vocab.id_to_token, self.inventory.tokens)

    def new_params(self, hidden: int, uses_attributes: bool, rng) -> ModelParams:
        return init_params(hidden, self.vocab.size, len(self.inventory), self.max_objects,
                           uses_attributes, rng)

    def batch(self, records, with_attributes: bool) -> SceneBatch:
        return make_batch(records, self.inventory, self.vocab if with_attributes else None,
                          self.max_objects)

    def xe_targets(self, records) -> tuple[np.ndarray, np.ndarray]:
        """Padded targets for every reference of every record, and the row -> record map."""
        caps, owner = [], []
        for i, r in enumerate(records):
            for c in self.refs[r.id]:
                caps.append(c.targets)
                owner.append(i)
        width = max(len(c) for c in caps)
        targets = np.full((len(caps), width), PAD, dtype=np.int64)
        for row, c in enumerate(caps):
            targets[row, : len(c)] = c
        return targets, np.asarray(owner)


@dataclass
class TrainReport:
    mode: str
    config_hash: str
    batch_size: int
    rows: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    test: MetricReport | None = None
    wall_time: float = 0.0
    max_reward_mean_gap: float = 0.0

    COLUMNS = ("epoch", "train_loss", "mean_reward", "val_bleu1", "val_bleu2", "val_bleu3",
               "val_bleu4", "val_rougeL", "val_cider")

    def digest(self) -> str:
        """Hash of everything except wall time."""
        payload = {
            "mode": self.mode,
            "config_hash": self.config_hash,
            "batch_size": self.batch_size,
            "rows": self.rows,
            "step_losses": [repr(x) for x in self.step_losses],
            "test": None if self.test is None else self.test.as_row(),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=repr).encode()).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in self.COLUMNS})
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "mode": self.mode,
            "config_hash": self.config_hash,
            "batch_size": self.batch_size,
            "report_hash": self.digest(),
            "test": None if self.test is None else self.test.as_row(),
            "wall_time": self.wall_time,
            "max_reward_mean_gap": self.max_reward_mean_gap,
            "versions": versions(),
        }

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)


def versions() -> dict:
    return {"tcts": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _rngs(seed: int):
    init, shuffle, sample = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(sample))


def _lr_at(config: ExperimentConfig, epoch: int, epochs: int) -> float:
    step = max(1, epochs // 3)
    return config.base_lr * config.lr_decay ** (epoch // step)


def _clip(grads: dict[str, np.ndarray], clip: float) -> float:
    """Rescale ``grads`` in place to global norm at most ``clip``; returns the raw norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if clip and norm > clip:
        for name in grads:
            grads[name] = grads[name] * (clip / norm)
    return norm


class Optimizer:
    """Gradient descent ("sgd") or Adam over a parameter dict, after global-norm clipping."""

    def __init__(self, kind: str, clip: float, betas=(0.9, 0.999), eps=1e-8):
        self.kind = kind
        self.clip = clip
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> float:
        grads = dict(grads)
        norm = _clip(grads, self.clip)
        self.t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            if self.kind == "sgd":
                update = g
            else:
                m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
                v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
            params.weights[name] = params.weights[name] - lr * update
        return norm


def _batches(records, size, rng):
    order = rng.permutation(len(records))
    for start in range(0, len(records), size):
        yield [records[i] for i in order[start:start + size]]


def greedy_captions(params: ModelParams, corpus: Corpus, records, max_len: int,
                    chunk: int = 256) -> list[Caption]:
    out = []
    for start in range(0, len(records), chunk):
        rows = records[start:start + chunk]
        tape = Tape(record=False)
        W = bind(tape, params, as_params=False)
        batch = corpus.batch(rows, params.uses_attributes)
        out.extend(rollout(tape, W, batch, params.hidden, max_len).captions)
    return out


def evaluate(params: ModelParams, corpus: Corpus, split_name: str = "test",
             max_len: int | None = None):
    """Greedy-decode a split and score it; CIDEr uses the split's own references as corpus."""
    records = corpus.split(split_name)
    if not records:
        raise DataContract(f"split {split_name!r} is empty")
    caps = greedy_captions(params, corpus, records, max_len or corpus.max_len)
    refs = [corpus.ref_ids(r) for r in records]
    reports, mean = score_all([c.interior for c in caps], refs, corpus.idf(split_name))
    return records, caps, reports, mean


def evaluation_csv(records, reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider"])
    for r, rep in zip(records, reports):
        writer.writerow([r.id, *rep.bleu, rep.rouge_l, rep.cider])
    return buf.getvalue()


def _epoch_row(epoch, losses, rewards, params, corpus, config) -> dict:
    row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
           "mean_reward": float(np.mean(rewards)) if rewards else None}
    if corpus.split("val"):
        _, _, _, val = evaluate(params, corpus, "val", config.max_len)
        row.update({f"val_{k}": v for k, v in val.as_row().items()})
    return row


def _finish(report, params, corpus, config, started):
    if corpus.split("test"):
        report.test = evaluate(params, corpus, "test", config.max_len)[3]
    report.wall_time = time.perf_counter() - started
    return report


def _xe_epochs(params, corpus, config, report, rng_shuffle, epochs, teacher=None):
    train = corpus.split("train")
    best = (-math.inf, None)
    use_kl = teacher is not None
    opt = Optimizer(config.optimizer, config.grad_clip)
    for epoch in range(epochs):
        lr = _lr_at(config, epoch, epochs)
        losses = []
        for rows in _batches(train, config.batch_size, rng_shuffle):
            targets, owner = corpus.xe_targets(rows)
            scene = corpus.batch(rows, params.uses_attributes).take(owner)
            tape = Tape()
            W = bind(tape, params)
            dists = teacher_forced(tape, W, scene, targets, params.hidden)
            loss = xe_loss(dists, targets)
            if use_kl:
                teacher_scene = corpus.batch(rows, True).take(owner)
                q = soft_targets_from_teacher(teacher, teacher_scene, targets, config.temperature)
                loss = combined_xe_tcts(loss, kl_loss(dists, q, targets), config.lambda1)
            grads = tape.backward(loss)
            opt.step(params, grads, lr)
            losses.append(loss.item())
            report.step_losses.append(loss.item())
        row = _epoch_row(epoch + 1, losses, None, params, corpus, config)
        report.rows.append(row)
        log.info("%s epoch %d loss %.4f val cider %s", report.mode, epoch + 1, row["train_loss"],
                 row.get("val_cider"))
        if config.early_stopping and row.get("val_cider", -math.inf) > best[0]:
            best = (row["val_cider"], params.copy())
    if config.early_stopping and best[1] is not None:
        params.weights = best[1].weights
    return params


def train_teacher(config: ExperimentConfig, corpus: Corpus | None = None):
    """XE training with ground-truth attributes, optionally followed by SCST."""
    if config.mode != "teacher":
        raise ConfigError("train_teacher needs mode='teacher'")
    corpus = corpus or Corpus.from_config(config)
    if any(not r.attributes for r in corpus.records):
        raise DataContract("teacher training needs attributes on every record")
    started = time.perf_counter()
    rng_init, rng_shuffle, rng_sample = _rngs(config.seed)
    params = corpus.new_params(config.hidden, True, rng_init)
    report = TrainReport("teacher", config.hash(), config.batch_size)
    _xe_epochs(params, corpus, config, report, rng_shuffle, config.epochs)
    if config.teacher_rl_epochs:
        rl_config = config if config.lr is not None else config.replace(lr=RL_LR)
        _rl_epochs(params, corpus, rl_config, report, rng_shuffle, rng_sample,
                   config.teacher_rl_epochs, teacher=None, lambda2=0.0)
    return params, _finish(report, params, corpus, config, started)


def train_student_xe(config: ExperimentConfig, teacher: ModelParams | None = None,
                     corpus: Corpus | None = None):
    if config.mode not in ("xe", "tcts-xe"):
        raise ConfigError("train_student_xe needs mode 'xe' or 'tcts-xe'")
    if config.mode == "tcts-xe" and teacher is None:
        raise ConfigError("tcts-xe needs a teacher")
    corpus = corpus or Corpus.from_config(config)
    started = time.perf_counter()
    rng_init, rng_shuffle, _ = _rngs(config.seed)
    params = corpus.new_params(config.hidden, False, rng_init)
    report = TrainReport(config.mode, config.hash(), config.batch_size)
    _xe_epochs(params, corpus, config, report, rng_shuffle, config.epochs,
               teacher if config.mode == "tcts-xe" else None)
    return params, _finish(report, params, corpus, config, started)


def sample_rewards(sample: Caption, greedy: Caption, refs, idf: IdfTable, emitted: int,
                   teacher_caption: Caption | None = None, lambda2: float = 0.0):
    """Reward vector for one sampled caption and its SCST scalar.

    ``emitted`` is the number of policy-chosen tokens (words, plus EOS when
    the policy chose it).
    """
    scst = scst_reward(cider(sample, refs, idf), cider(greedy, refs, idf))
    if teacher_caption is None:
        return np.full(emitted, scst), scst
    part = lcs_partition(sample, teacher_caption)
    if emitted == len(part) + 1:
        part = part.with_eos()
    adj = tcts_adjustment(part.n, part.m, cider(teacher_caption, refs, idf))
    return tcts_reward_vector(part, scst, adj, lambda2), scst


def _rl_epochs(params, corpus, config, report, rng_shuffle, rng_sample, epochs,
               teacher=None, lambda2=0.0, reward_refs=None):
    train = corpus.split("train")
    idf = corpus.idf("train") if reward_refs is None else build_idf(
        [reward_refs[r.id] for r in train])
    teacher_cache: dict[int, Caption] = {}
    opt = Optimizer(config.optimizer, config.grad_clip)
    for epoch in range(epochs):
        lr = _lr_at(config, epoch, epochs)
        losses, rewards_seen = [], []
        for rows in _batches(train, config.batch_size, rng_shuffle):
            scene = corpus.batch(rows, params.uses_attributes)
            tape = Tape()
            W = bind(tape, params)
            sampled = rollout(tape, W, scene, params.hidden, config.max_len, rng=rng_sample)
            greedy = greedy_captions(params, corpus, rows, config.max_len)
            tea_caps = None
            if teacher is not None:
                missing = [r for r in rows if r.id not in teacher_cache]
                fresh = dict(zip((r.id for r in missing),
                                 greedy_captions(teacher, corpus, missing, config.max_len)))
                tea_caps = [fresh[r.id] if r.id in fresh else teacher_cache[r.id] for r in rows]
                if config.cache_teacher_captions:
                    teacher_cache.update(fresh)
            reward = np.zeros(sampled.tokens.shape)
            for b, r in enumerate(rows):
                refs = reward_refs[r.id] if reward_refs is not None else corpus.ref_ids(r)
                n_emit = int(sampled.emitted[b].sum())
                vec, scst = sample_rewards(sampled.captions[b], greedy[b], refs, idf, n_emit,
                                           None if tea_caps is None else tea_caps[b], lambda2)
                gap = abs(float(vec.mean()) - scst)
                report.max_reward_mean_gap = max(report.max_reward_mean_gap, gap)
                if gap > 1e-9:
                    raise AssertionError(f"reward vector mean drifted from SCST by {gap}")
                reward[b, np.flatnonzero(sampled.emitted[b])] = vec
                rewards_seen.append(scst)
            loss = pg_loss(sampled.log_probs, reward)
            grads = tape.backward(loss)
            opt.step(params, grads, lr)
            losses.append(loss.item())
            report.step_losses.append(loss.item())
        row = _epoch_row(epoch + 1, losses, rewards_seen, params, corpus, config)
        report.rows.append(row)
        log.info("%s epoch %d reward %.4f val cider %s", report.mode, epoch + 1,
                 row["mean_reward"], row.get("val_cider"))
    return params


def train_student_rl(config: ExperimentConfig, student: ModelParams,
                     teacher: ModelParams | None = None, corpus: Corpus | None = None,
                     reward_refs: dict | None = None):
    """Self-critical training from an XE checkpoint; tcts-rl adds teacher-critical rewards.

    ``reward_refs`` optionally replaces each train record's references (as id
    tuples) in the reward computation.
    """
    if config.mode not in ("scst", "tcts-rl"):
        raise ConfigError("train_student_rl needs mode 'scst' or 'tcts-rl'")
    if config.mode == "tcts-rl" and teacher is None:
        raise ConfigError("tcts-rl needs a teacher")
    if student.uses_attributes:
        raise ConfigError("the RL student must be a student-mode model")
    corpus = corpus or Corpus.from_config(config)
    started = time.perf_counter()
    _, rng_shuffle, rng_sample = _rngs(config.seed)
    params = student.copy()
    report = TrainReport(config.mode, config.hash(), config.batch_size)
    _rl_epochs(params, corpus, config, report, rng_shuffle, rng_sample, config.epochs,
               teacher if config.mode == "tcts-rl" else None,
               config.lambda2 if config.mode == "tcts-rl" else 0.0, reward_refs)
    return params, _finish(report, params, corpus, config, started)


def run_teacher_as_gt_ablation(config: ExperimentConfig, student: ModelParams,
                               teacher: ModelParams, corpus: Corpus | None = None):
    """Two SCST runs: rewards against the teacher's caption vs one random reference.

    Returns both reports and a paired table with one row per epoch.
    """
    corpus = corpus or Corpus.from_config(config)
    cfg = config.replace(mode="scst")
    train = corpus.split("train")
    tea = greedy_captions(teacher, corpus, train, cfg.max_len)
    teacher_refs = {r.id: [c.interior] for r, c in zip(train, tea)}
    pick = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    one_gt = {r.id: [corpus.ref_ids(r)[pick.integers(len(r.refs))]] for r in train}
    _, rep_tea = train_student_rl(cfg, student, None, corpus, teacher_refs)
    _, rep_gt = train_student_rl(cfg, student, None, corpus, one_gt)
    table = []
    for a, b in zip(rep_tea.rows, rep_gt.rows):
        row = {"epoch": a["epoch"]}
        row.update({f"teachercap_{k}": v for k, v in a.items() if k != "epoch"})
        row.update({f"onegt_{k}": v for k, v in b.items() if k != "epoch"})
        table.append(row)
    return {"teachercap": rep_tea, "onegt": rep_gt, "table": table}


def save_checkpoint(path, params: ModelParams, corpus: Corpus, config: ExperimentConfig):
    checkpoint.save(path, params, {
        "mode": config.mode,
        "config_hash": config.hash(),
        "min_count": config.min_count,
        "max_len": config.max_len,
        "vocab": list(corpus.vocab.id_to_token),
        "inventory": list(corpus.inventory.tokens),
        "vocab_hash": corpus.vocab_hash(),
    })


def load_checkpoint(path, corpus: Corpus) -> ModelParams:
    params, header = checkpoint.load(path)
    if header.get("vocab_hash") != corpus.vocab_hash():
        raise IncompatibleCheckpoint(f"{path} was trained against a different vocabulary")
    return params


def caption_text(caption: Caption, corpus: Corpus) -> str:
    return " ".join(decode(caption, corpus.vocab))
