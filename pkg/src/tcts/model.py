"""Student and teacher caption decoders.

Both share one implementation. The teacher (``uses_attributes=True``) adds an
attribute encoder, a second attention stream and the sigmoid fusion gates;
the student passes the attended visual feature straight to the GLU head.

Per decoding step::

    h_t     = GRU([embed(w_{t-1}); mean(features)], h_{t-1})
    v_t     = attend(h_t, scene features)
    a_t     = attend(h_t, attribute features)            # teacher only
    alpha_t = sigmoid([h_t; v_t] W_v)                    # teacher only
    beta_t  = sigmoid([h_t; a_t] W_a)                    # teacher only
    f_t     = alpha_t * v_t + beta_t * a_t   (teacher)   |   v_t   (student)
    c_t     = GLU([h_t; f_t] W_glu)
    p_t     = softmax(c_t W_p)

All functions operate on batches; row ``b`` of every array belongs to one
caption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .errors import DataContract, ModeViolation
from .textcore import BOS, EOS, PAD, UNK, Caption, Vocab

MASK_BIAS = -1e9

SHARED_SHAPES = {
    "embed": ("K", "d"),
    "obj_embed": ("V", "d"),
    "pos_embed": ("N", "d"),
    "W_scene": ("d", "d"),
    "W_xz": ("2d", "d"),
    "W_xr": ("2d", "d"),
    "W_xn": ("2d", "d"),
    "W_hz": ("d", "d"),
    "W_hr": ("d", "d"),
    "W_hn": ("d", "d"),
    "b_z": ("d",),
    "b_r": ("d",),
    "b_n": ("d",),
    "W_q": ("d", "d"),
    "W_k": ("d", "d"),
    "W_glu": ("2d", "2d"),
    "W_p": ("d", "K"),
}
ATTRIBUTE_SHAPES = {
    "W_attr": ("d", "d"),
    "W_qa": ("d", "d"),
    "W_ka": ("d", "d"),
    "W_v": ("2d", "d"),
    "W_a": ("2d", "d"),
}


@dataclass
class ModelParams:
    """Trainable weights plus the dimensions they were built for.

    ``visual_size`` is the size of the object-token inventory and
    ``max_objects`` the number of object slots with a position embedding.
    """

    hidden: int
    vocab_size: int
    visual_size: int
    max_objects: int
    uses_attributes: bool
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def shape_of(self, name: str) -> tuple[int, ...]:
        spec = SHARED_SHAPES.get(name) or ATTRIBUTE_SHAPES[name]
        dims = {"d": self.hidden, "2d": 2 * self.hidden, "K": self.vocab_size,
                "V": self.visual_size, "N": self.max_objects}
        return tuple(dims[s] for s in spec)

    def names(self) -> list[str]:
        names = list(SHARED_SHAPES)
        if self.uses_attributes:
            names += list(ATTRIBUTE_SHAPES)
        return names

    def validate(self):
        expected = set(self.names())
        if set(self.weights) != expected:
            missing, extra = expected - set(self.weights), set(self.weights) - expected
            raise ModeViolation(f"weights mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name in self.names():
            w = self.weights[name]
            if w.shape != self.shape_of(name):
                raise ValueError(f"{name}: shape {w.shape} != {self.shape_of(name)}")
            if not np.isfinite(w).all():
                raise ValueError(f"{name}: non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams(self.hidden, self.vocab_size, self.visual_size, self.max_objects,
                           self.uses_attributes, {k: v.copy() for k, v in self.weights.items()})

    def student_view(self) -> "ModelParams":
        """Same shared weights with the attribute stream switched off."""
        shared = {k: self.weights[k].copy() for k in SHARED_SHAPES}
        return ModelParams(self.hidden, self.vocab_size, self.visual_size, self.max_objects,
                           False, shared)

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())


def init_params(hidden, vocab_size, visual_size, max_objects=4, uses_attributes=False,
                rng=None, scale=None) -> ModelParams:
    """Uniform init in ``[-s, s]`` with ``s = 1/sqrt(fan_in)`` unless ``scale`` is given.

    ``scale=0`` gives the all-zero model. Draw order is the fixed name order,
    so the shared weights of a teacher and a student built from the same seed
    coincide.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = ModelParams(hidden, vocab_size, visual_size, max_objects, uses_attributes)
    for name in params.names():
        shape = params.shape_of(name)
        if name.startswith("b_"):
            params.weights[name] = np.zeros(shape)
            continue
        s = scale if scale is not None else 1.0 / math.sqrt(shape[0])
        params.weights[name] = rng.uniform(-s, s, size=shape)
    return params


class Inventory:
    """Object-token vocabulary for the visual stream; id 0 pads empty slots."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = ("<none>",) + tuple(sorted(set(tokens)))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_records(cls, records) -> "Inventory":
        return cls({tok for r in records for obj in r.objects for tok in obj.split()})

    def __len__(self):
        return len(self.tokens)

    def ids(self, obj: str) -> list[int]:
        try:
            return [self.index[tok] for tok in obj.split()]
        except KeyError as exc:
            raise DataContract(f"object token {exc.args[0]!r} not in the visual inventory") from None


@dataclass
class SceneBatch:
    """Padded per-row inputs. Object slots hold (modifier, noun) token pairs."""

    obj_ids: np.ndarray  # [B, N, 2]
    obj_mask: np.ndarray  # [B, N]
    attr_ids: np.ndarray | None = None  # [B, A] word ids
    attr_mask: np.ndarray | None = None

    def __len__(self):
        return self.obj_ids.shape[0]

    def take(self, rows) -> "SceneBatch":
        rows = np.asarray(rows)
        return SceneBatch(
            self.obj_ids[rows], self.obj_mask[rows],
            None if self.attr_ids is None else self.attr_ids[rows],
            None if self.attr_mask is None else self.attr_mask[rows],
        )

    def repeat(self, k: int) -> "SceneBatch":
        return self.take(np.repeat(np.arange(len(self)), k))


def make_batch(records, inventory: Inventory, vocab: Vocab | None = None,
               max_objects: int = 4) -> SceneBatch:
    """Pad scenes (and attributes when ``vocab`` is given) into arrays."""
    n_obj = max(len(r.objects) for r in records)
    if n_obj > max_objects or min(len(r.objects) for r in records) < 1:
        raise DataContract(f"scenes need 1..{max_objects} objects")
    obj_ids = np.zeros((len(records), n_obj, 2), dtype=np.int64)
    obj_mask = np.zeros((len(records), n_obj))
    for b, r in enumerate(records):
        for i, obj in enumerate(r.objects):
            ids = inventory.ids(obj)
            obj_ids[b, i, : len(ids)] = ids[:2]
            obj_mask[b, i] = 1.0
    batch = SceneBatch(obj_ids, obj_mask)
    if vocab is not None:
        n_attr = max(len(r.attributes) for r in records)
        if n_attr == 0:
            raise DataContract("teacher inputs need ground-truth attributes")
        attr_ids = np.full((len(records), n_attr), PAD, dtype=np.int64)
        attr_mask = np.zeros((len(records), n_attr))
        for b, r in enumerate(records):
            if not r.attributes:
                raise DataContract(f"record {r.id} has no attributes")
            for i, tok in enumerate(r.attributes):
                # rare attribute words outside the caption vocabulary read as UNK
                attr_ids[b, i] = vocab.id(tok)
                attr_mask[b, i] = 1.0
        batch.attr_ids, batch.attr_mask = attr_ids, attr_mask
    return batch


@dataclass
class Encoded:
    """Per-sequence constants reused at every decoding step."""

    feats: Tensor
    keys: Tensor
    bias: np.ndarray | None
    mean_feat: Tensor
    attr_feats: Tensor | None = None
    attr_keys: Tensor | None = None
    attr_bias: np.ndarray | None = None


@dataclass
class DecoderState:
    h: Tensor
    t: int = 0

    @property
    def carry(self) -> Tensor:
        # a GRU carries its hidden state only
        return self.h


def bind(tape: Tape, params: ModelParams, as_params: bool = True) -> dict[str, Tensor]:
    """Put weights on a tape, as registered parameters or as constants."""
    if as_params:
        return {k: tape.param(k, params.weights[k]) for k in params.names()}
    return {k: tape.const(params.weights[k]) for k in params.names()}


def _mask_bias(mask):
    if mask.all():
        return None
    return np.where(mask > 0, 0.0, MASK_BIAS)


def encode_scene(tape: Tape, W: dict[str, Tensor], batch: SceneBatch) -> Tensor:
    """One feature per object slot: (modifier + noun + position embedding) W_scene."""
    B, N, _ = batch.obj_ids.shape
    tokens = tape.sum(tape.gather_row(W["obj_embed"], batch.obj_ids), axis=2)
    pos = tape.gather_row(W["pos_embed"], np.broadcast_to(np.arange(N), (B, N)))
    return tape.matmul(tape.add(tokens, pos), W["W_scene"])


def encode_attributes(tape: Tape, W: dict[str, Tensor], batch: SceneBatch) -> Tensor:
    if "W_attr" not in W:
        raise ModeViolation("attribute encoder used with student parameters")
    if batch.attr_ids is None:
        raise ModeViolation("batch carries no attributes")
    return tape.matmul(tape.gather_row(W["embed"], batch.attr_ids), W["W_attr"])


def attend(tape: Tape, query: Tensor, feats: Tensor, keys: Tensor, W_query: Tensor,
           bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``feats`` [B, N, d].

    ``query`` is [B, d] (one step) or [B, S, d] (all steps at once); the
    result has the same shape. ``keys`` are the projected features and
    ``bias`` [B, N] is 0 for real slots and a large negative number for
    padding.
    """
    d = feats.shape[2]
    single = query.data.ndim == 2
    q = tape.matmul(query, W_query)
    if single:
        q = tape.reshape(q, (q.shape[0], 1, d))
    scores = tape.scale(tape.bmm(q, keys, transpose_b=True), 1.0 / math.sqrt(d))
    if bias is not None:
        scores = tape.add(scores, tape.const(bias[:, None, :]))
    out = tape.bmm(tape.softmax(scores), feats)
    return tape.reshape(out, (out.shape[0], d)) if single else out


def fuse(tape: Tape, h: Tensor, v_hat: Tensor, a_hat: Tensor | None,
         W: dict[str, Tensor]) -> Tensor:
    teacher = "W_a" in W
    if teacher != (a_hat is not None):
        raise ModeViolation("attended attributes must be given exactly in teacher mode")
    if not teacher:
        return v_hat
    alpha = tape.sigmoid(tape.matmul(tape.concat(h, v_hat), W["W_v"]))
    beta = tape.sigmoid(tape.matmul(tape.concat(h, a_hat), W["W_a"]))
    return tape.add(tape.mul(alpha, v_hat), tape.mul(beta, a_hat))


def encode(tape: Tape, W: dict[str, Tensor], batch: SceneBatch) -> Encoded:
    feats = encode_scene(tape, W, batch)
    keys = tape.matmul(feats, W["W_k"])
    weights = batch.obj_mask / batch.obj_mask.sum(axis=1, keepdims=True)
    mean_feat = tape.sum(tape.mul(tape.const(weights[:, :, None]), feats), axis=1)
    enc = Encoded(feats, keys, _mask_bias(batch.obj_mask), mean_feat)
    if "W_attr" in W:
        enc.attr_feats = encode_attributes(tape, W, batch)
        enc.attr_keys = tape.matmul(enc.attr_feats, W["W_ka"])
        enc.attr_bias = _mask_bias(batch.attr_mask)
    return enc


def initial_state(tape: Tape, batch_size: int, hidden: int) -> DecoderState:
    return DecoderState(tape.const(np.zeros((batch_size, hidden))), 0)


_GATES = (("W_xz", "W_hz", "b_z"), ("W_xr", "W_hr", "b_r"), ("W_xn", "W_hn", "b_n"))


def _input_gates(tape, emb: Tensor, mean_feat: Tensor, W) -> list[Tensor]:
    """Input halves of the three GRU gates for x = [emb; mean_feat].

    ``emb`` is [B, d] or [B, S, d]. The feature half is projected once and
    broadcast over steps, which equals multiplying the concatenation.
    """
    d = mean_feat.shape[1]
    out = []
    for wx, _, b in _GATES:
        halves = tape.reshape(W[wx], (2, d, d))
        feat = tape.add(tape.matmul(mean_feat, tape.take(halves, 1, axis=0)), W[b])
        if emb.data.ndim == 3:
            feat = tape.reshape(feat, (feat.shape[0], 1, d))
        out.append(tape.add(tape.matmul(emb, tape.take(halves, 0, axis=0)), feat))
    return out


def _gru(tape, gates_x: list[Tensor], h: Tensor, W) -> Tensor:
    xz, xr, xn = gates_x
    z = tape.sigmoid(tape.add(xz, tape.matmul(h, W["W_hz"])))
    r = tape.sigmoid(tape.add(xr, tape.matmul(h, W["W_hr"])))
    n = tape.tanh(tape.add(xn, tape.matmul(tape.mul(r, h), W["W_hn"])))
    return tape.add(n, tape.mul(z, tape.add(h, tape.scale(n, -1.0))))


def _head(tape, h, enc: Encoded, W):
    """Attention, fusion, GLU and output softmax for [B, d] or [B, S, d] states."""
    v_hat = attend(tape, h, enc.feats, enc.keys, W["W_q"], enc.bias)
    a_hat = None
    if enc.attr_feats is not None:
        a_hat = attend(tape, h, enc.attr_feats, enc.attr_keys, W["W_qa"], enc.attr_bias)
    f_hat = fuse(tape, h, v_hat, a_hat, W)
    context = tape.glu(tape.matmul(tape.concat(h, f_hat), W["W_glu"]))
    return tape.softmax(tape.matmul(context, W["W_p"]))


def decode_step(tape: Tape, state: DecoderState, prev_words, enc: Encoded,
                W: dict[str, Tensor]) -> tuple[Tensor, DecoderState]:
    """Next-word distribution [B, K] and the advanced state."""
    gates_x = _input_gates(tape, tape.gather_row(W["embed"], prev_words), enc.mean_feat, W)
    h = _gru(tape, gates_x, state.h, W)
    return _head(tape, h, enc, W), DecoderState(h, state.t + 1)


def teacher_forced(tape: Tape, W: dict[str, Tensor], batch: SceneBatch,
                   targets: np.ndarray, hidden: int) -> Tensor:
    """Distributions [B, S, K] along ground-truth prefixes; ``targets`` is [B, S], PAD-padded.

    Same equations as stepping :func:`decode_step`, with only the recurrence
    unrolled and everything downstream of it evaluated for all steps at once.
    """
    B, S = targets.shape
    enc = encode(tape, W, batch)
    state = initial_state(tape, B, hidden)
    prev = np.concatenate([np.full((B, 1), BOS), targets[:, :-1]], axis=1)
    gates_all = _input_gates(tape, tape.gather_row(W["embed"], prev), enc.mean_feat, W)
    hs = []
    for t in range(S):
        gates_x = [tape.take(g, t, axis=1) for g in gates_all]
        state = DecoderState(_gru(tape, gates_x, state.h, W), t + 1)
        hs.append(tape.reshape(state.h, (B, 1, hidden)))
    return _head(tape, tape.concat(*hs, axis=1), enc, W)


def allowed_mask(vocab_size: int, step: int) -> np.ndarray:
    """Tokens a decoder may emit: words always, EOS from the second step on."""
    mask = np.zeros(vocab_size)
    mask[UNK + 1:] = 1.0
    if step > 0:
        mask[EOS] = 1.0
    return mask


def _greedy_pick(probs: np.ndarray, step: int) -> np.ndarray:
    # candidates ordered words-first so EOS only wins when strictly larger
    K = probs.shape[1]
    order = np.arange(UNK + 1, K)
    if step > 0:
        order = np.append(order, EOS)
    return order[np.argmax(probs[:, order], axis=1)]


def _sample_pick(probs: np.ndarray, step: int, rng: np.random.Generator) -> np.ndarray:
    p = probs * allowed_mask(probs.shape[1], step)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    picks = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(picks, probs.shape[1] - 1)


@dataclass
class Rollout:
    """Result of free-running decoding for a batch.

    ``tokens`` [B, S] holds the emitted tokens PAD-padded; ``log_probs`` holds
    one [B] tensor per step with the log-probability of the emitted token
    under the policy renormalised over allowed tokens (0 after a row ends).
    ``emitted`` [B, S] flags which entries were actually chosen by the policy.
    """

    captions: list[Caption]
    tokens: np.ndarray
    emitted: np.ndarray
    log_probs: list[Tensor]


def rollout(tape: Tape, W: dict[str, Tensor], batch: SceneBatch, hidden: int,
            max_len: int, rng: np.random.Generator | None = None) -> Rollout:
    """Greedy decoding when ``rng`` is None, multinomial sampling otherwise.

    At most ``max_len`` words are emitted; a row still running afterwards is
    closed with an EOS that is not attributed to the policy.
    """
    B = len(batch)
    enc = encode(tape, W, batch)
    state = initial_state(tape, B, hidden)
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    tokens, emitted, log_probs = [], [], []
    for step in range(max_len + 1):
        if done.all():
            break
        probs, state = decode_step(tape, state, prev, enc, W)
        if step == max_len:
            pick = np.full(B, EOS)
            live = np.zeros(B, dtype=bool)
        else:
            pick = _greedy_pick(probs.data, step) if rng is None else _sample_pick(probs.data, step, rng)
            live = ~done
        if rng is not None:
            log_probs.append(_policy_log_prob(tape, probs, pick, live, step))
        pick = np.where(done, PAD, pick)
        tokens.append(pick)
        emitted.append(live)
        done = done | (pick == EOS)
        prev = np.where(pick == PAD, EOS, pick)
    tokens = np.stack(tokens, axis=1)
    emitted = np.stack(emitted, axis=1)
    captions = []
    for row, chosen in zip(tokens, emitted):
        end = int(np.argmax(row == EOS))
        captions.append(Caption.from_interior(row[:end].tolist(), truncated=not chosen[end]))
    return Rollout(captions, tokens, emitted, log_probs)


def _policy_log_prob(tape: Tape, probs: Tensor, pick: np.ndarray, live: np.ndarray,
                     step: int) -> Tensor:
    """log p(pick) - log p(allowed set) for live rows, 0 elsewhere."""
    B, K = probs.shape
    if not live.any():
        return tape.const(np.zeros(B))
    onehot = np.zeros((B, K))
    onehot[np.arange(B), pick] = live
    chosen = tape.sum(tape.mul(probs, tape.const(onehot)), axis=1)
    # dead rows select nothing; give them probability 1 so the log is 0
    chosen = tape.add(chosen, tape.const((~live).astype(float)))
    total = tape.sum(tape.mul(probs, tape.const(allowed_mask(K, step)[None, :])), axis=1)
    total = tape.add(tape.mul(total, tape.const(live.astype(float))), tape.const((~live).astype(float)))
    return tape.add(tape.log(chosen), tape.scale(tape.log(total), -1.0))
