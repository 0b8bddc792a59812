"""Localization-and-captioning heads: baseline, S-LSTM, SC-LSTM, T-LSTM, plus context fusion.

Every variant runs the caption-LSTM on ``[region, <SOS>, w1, w2, ...]``.  The
first input only primes the state; each later step ("word step") predicts the
next word.  For a caption of ``n`` words there are ``n + 1`` word steps and the
last one predicts ``<EOS>``; recurrent variants read the box offset at that
EOS step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import EOS_ID, PAD_ID, SOS_ID
from .errors import ConfigError, DimensionError
from .nn import Linear, Module, uniform_init
from .tensor import Tensor

VARIANTS = ("baseline", "s-lstm", "sc-lstm", "t-lstm")
FUSIONS = ("none", "early", "late")
FUSION_OPS = ("concat", "sum", "mul")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "t-lstm"
    fusion: str = "none"
    op: str = "mul"
    hidden_dim: int = 512
    embed_dim: int = 512
    max_steps: int = 11  # 10 words + EOS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown head variant {self.variant!r}; choose from {VARIANTS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        if self.op not in FUSION_OPS:
            raise ConfigError(f"unknown fusion op {self.op!r}; choose from {FUSION_OPS}")
        if self.hidden_dim < 1 or self.embed_dim < 1 or self.max_steps < 1:
            raise ConfigError("hidden_dim, embed_dim and max_steps must be positive")

    @property
    def uses_context(self) -> bool:
        return self.fusion != "none"


@dataclass
class LstmCellState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden_dim: int) -> "LstmCellState":
        return cls(Tensor(np.zeros((batch, hidden_dim))), Tensor(np.zeros((batch, hidden_dim))))


class LSTMCell(Module):
    """Gates ordered (input, forget, output, candidate) along the 4H axis."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int):
        fan_in = n_in + n_hidden
        self.wx = T.parameter(uniform_init(rng, (n_in, 4 * n_hidden), fan_in))
        self.wh = T.parameter(uniform_init(rng, (n_hidden, 4 * n_hidden), fan_in))
        self.bias = T.parameter(np.zeros(4 * n_hidden))
        self.n_in = n_in
        self.n_hidden = n_hidden

    def __call__(self, state: LstmCellState, x: Tensor) -> tuple[LstmCellState, Tensor]:
        return lstm_step(self, state, x)

    def run(self, first: Tensor, inputs: list[Tensor]) -> list[Tensor]:
        """Prime with ``first`` then return the hidden output of every later input."""
        state = LstmCellState.zeros(first.shape[0], self.n_hidden)
        state, _ = self(state, first)
        outs = []
        for x in inputs:
            state, h = self(state, x)
            outs.append(h)
        return outs


def lstm_step(cell: LSTMCell, state: LstmCellState, x: Tensor) -> tuple[LstmCellState, Tensor]:
    if x.ndim != 2 or x.shape[1] != cell.n_in:
        raise DimensionError(f"LSTM input width {x.shape} != {cell.n_in}")
    H = cell.n_hidden
    z = T.matmul(x, cell.wx) + T.matmul(state.hidden, cell.wh) + cell.bias
    i = T.sigmoid(z[:, :H])
    f = T.sigmoid(z[:, H:2 * H])
    o = T.sigmoid(z[:, 2 * H:3 * H])
    g = T.tanh(z[:, 3 * H:])
    c = f * state.cell + i * g
    h = o * T.tanh(c)
    return LstmCellState(h, c), h


def _identity_proj(rng: np.random.Generator, dim: int, op: str) -> Linear:
    # zero weights: the context path contributes exactly the op's identity element at init
    proj = Linear(rng, dim, dim)
    proj.weight.data = np.zeros_like(proj.weight.data)
    proj.bias.data = np.ones(dim) if op == "mul" else np.zeros(dim)
    return proj


def _combine(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "sum":
        return a + b
    if op == "mul":
        return a * b
    return T.concat([a, b], axis=1)


@dataclass
class TrainOutputs:
    word_logits: Tensor  # (steps*P, V), step-major
    word_targets: np.ndarray
    word_mask: np.ndarray
    offsets: Tensor  # (P, 4), the single trained offset per region


@dataclass
class DecodeBatch:
    tokens: list[list[int]]  # without EOS
    logprobs: list[list[float]]
    final_offsets: np.ndarray  # (N, 4)
    intermediate: list[np.ndarray]  # per region (steps, 4)


class CaptionHead(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, region_dim: int, vocab_size: int):
        if region_dim != cfg.embed_dim:
            raise ConfigError(f"region feature dim {region_dim} must equal embed_dim {cfg.embed_dim}")
        self.cfg = cfg
        E, H, D, V = cfg.embed_dim, cfg.hidden_dim, region_dim, vocab_size
        self.embed = T.parameter(uniform_init(rng, (V, E), E))
        self.cap_lstm = LSTMCell(rng, E, H)
        word_in = 2 * H if (cfg.fusion == "late" and cfg.op == "concat") else H
        self.word = Linear(rng, word_in, V)
        self.det = Linear(rng, D, 2)
        if cfg.variant == "baseline":
            self.offset = Linear(rng, D, 4)
        elif cfg.variant == "s-lstm":
            self.offset = Linear(rng, H, 4)
        elif cfg.variant == "sc-lstm":
            self.offset = Linear(rng, H + D, 4)
        else:
            self.loc_lstm = LSTMCell(rng, E, H)
            self.offset = Linear(rng, H, 4)
        if cfg.fusion == "early":
            self.ctx_proj = _identity_proj(rng, D, cfg.op)
            if cfg.op == "concat":
                self.fuse = Linear(rng, 2 * D, D)
                w = self.fuse.weight.data
                w[:D] = np.eye(D)
        elif cfg.fusion == "late":
            self.ctx_lstm = LSTMCell(rng, E, H)
            self.ctx_proj = _identity_proj(rng, H, cfg.op)

    # -- pieces ----------------------------------------------------------------------
    def fusion_parameter_names(self) -> set[str]:
        names = set()
        for attr in ("ctx_proj", "fuse", "ctx_lstm"):
            if hasattr(self, attr):
                names.update(f"{attr}.{k}" for k in getattr(self, attr).named_parameters())
        return names

    def detection_logits(self, region: Tensor) -> Tensor:
        return self.det(region)

    def region_input(self, region: Tensor, context: Tensor | None) -> Tensor:
        """Step-0 input of the caption path (fused under early fusion)."""
        if self.cfg.fusion != "early":
            return region
        ctx = self.ctx_proj(self._need(context))
        if self.cfg.op == "concat":
            ctx = T.getitem(ctx, np.zeros(region.shape[0], dtype=np.int64))
            return self.fuse(T.concat([region, ctx], axis=1))
        return _combine(self.cfg.op, region, ctx)

    def _need(self, context: Tensor | None) -> Tensor:
        if context is None:
            raise ConfigError(f"{self.cfg.fusion} fusion needs a context feature")
        return context

    def _broadcast_context(self, context: Tensor, n: int) -> Tensor:
        return T.getitem(context, np.zeros(n, dtype=np.int64))

    def word_features(self, h_cap: Tensor, h_ctx: Tensor | None) -> Tensor:
        if self.cfg.fusion != "late":
            return h_cap
        return _combine(self.cfg.op, h_cap, self.ctx_proj(h_ctx))

    def offset_from(self, region: Tensor, h_shared: Tensor | None, h_loc: Tensor | None) -> Tensor:
        v = self.cfg.variant
        if v == "baseline":
            return self.offset(region)
        if v == "s-lstm":
            return self.offset(h_shared)
        if v == "sc-lstm":
            return self.offset(T.concat([h_shared, region], axis=1))
        return self.offset(h_loc)

    # -- teacher forcing ---------------------------------------------------------------
    def forward_train(self, region: Tensor, context: Tensor | None, captions: list[list[int]]) -> TrainOutputs:
        """Teacher-forced pass over ``P`` regions with caption id lists (no SOS/EOS)."""
        P = region.shape[0]
        if len(captions) != P:
            raise DimensionError(f"{P} regions but {len(captions)} captions")
        lengths = np.array([len(c) for c in captions], dtype=np.int64)
        steps = int(lengths.max()) + 1
        ids = np.full((P, steps), PAD_ID, dtype=np.int64)
        ids[:, 0] = SOS_ID
        targets = np.full((P, steps), PAD_ID, dtype=np.int64)
        for r, cap in enumerate(captions):
            ids[r, 1:len(cap) + 1] = cap
            targets[r, :len(cap)] = cap
            targets[r, len(cap)] = EOS_ID
        mask = (np.arange(steps)[None, :] <= lengths[:, None]).astype(np.float64)
        emb = T.getitem(self.embed, ids.T.reshape(-1))  # step-major
        inputs = [emb[s * P:(s + 1) * P] for s in range(steps)]

        first = self.region_input(region, context)
        h_cap = self.cap_lstm.run(first, inputs)
        h_ctx = None
        if self.cfg.fusion == "late":
            ctx = self._broadcast_context(self._need(context), P)
            h_ctx = self.ctx_lstm.run(ctx, inputs)
        feats = [self.word_features(h, None if h_ctx is None else h_ctx[s]) for s, h in enumerate(h_cap)]
        logits = self.word(T.concat(feats, axis=0))

        eos_rows = lengths * P + np.arange(P)  # rows of the EOS step in step-major stacks
        h_shared = h_loc = None
        if self.cfg.variant in ("s-lstm", "sc-lstm"):
            h_shared = T.getitem(T.concat(h_cap, axis=0), eos_rows)
        elif self.cfg.variant == "t-lstm":
            h_loc = T.getitem(T.concat(self.loc_lstm.run(region, inputs), axis=0), eos_rows)
        offsets = self.offset_from(region, h_shared, h_loc)
        return TrainOutputs(logits, targets.T.reshape(-1), mask.T.reshape(-1), offsets)

    # -- greedy decoding ------------------------------------------------------------------
    def decode(self, region: Tensor, context: Tensor | None, max_steps: int | None = None) -> DecodeBatch:
        """Beam-1 rollout for ``N`` regions; offsets are read at every word step."""
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        N = region.shape[0]
        with T.no_grad():
            cap = LstmCellState.zeros(N, self.cfg.hidden_dim)
            cap, _ = self.cap_lstm(cap, self.region_input(region, context))
            ctx = loc = None
            if self.cfg.fusion == "late":
                ctx = LstmCellState.zeros(N, self.cfg.hidden_dim)
                ctx, _ = self.ctx_lstm(ctx, self._broadcast_context(self._need(context), N))
            if self.cfg.variant == "t-lstm":
                loc = LstmCellState.zeros(N, self.cfg.hidden_dim)
                loc, _ = self.loc_lstm(loc, region)
            prev = np.full(N, SOS_ID, dtype=np.int64)
            done = np.zeros(N, dtype=bool)
            tokens: list[list[int]] = [[] for _ in range(N)]
            logps: list[list[float]] = [[] for _ in range(N)]
            inter: list[list[np.ndarray]] = [[] for _ in range(N)]
            final = np.zeros((N, 4))
            for s in range(max_steps):
                x = T.Tensor(self.embed.data[prev])
                cap, h = self.cap_lstm(cap, x)
                hc = None
                if ctx is not None:
                    ctx, hc = self.ctx_lstm(ctx, x)
                hl = None
                if loc is not None:
                    loc, hl = self.loc_lstm(loc, x)
                logp = T.log_softmax_np(self.word(self.word_features(h, hc)).data)
                offs = self.offset_from(region, h, hl).data
                scores = logp.copy()
                scores[:, [PAD_ID, SOS_ID]] = -np.inf
                if s == max_steps - 1:
                    choice = np.full(N, EOS_ID, dtype=np.int64)
                else:
                    choice = scores.argmax(axis=1)
                for r in np.flatnonzero(~done):
                    inter[r].append(offs[r].copy())
                    logps[r].append(float(logp[r, choice[r]]))
                    if choice[r] == EOS_ID:
                        done[r] = True
                        final[r] = offs[r]
                    else:
                        tokens[r].append(int(choice[r]))
                prev = np.where(done, EOS_ID, choice)
                if done.all():
                    break
        return DecodeBatch(tokens, logps, final, [np.array(v) for v in inter])

