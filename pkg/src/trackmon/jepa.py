"""Self-supervised track embedding by masked-timestep prediction.

A context encoder sees a standardized track with a few timesteps blanked
out (rows zeroed, mask bit set) and produces one latent token per timestep.
A lightweight cross-attending predictor must reconstruct — in latent space —
the tokens an EMA-averaged *target* encoder assigns to the blanked
timesteps when given the untouched track.  The L1 gap between predicted and
target tokens is the training loss; gradients never flow into the target
encoder (its weights are a stop-gradient exponential moving average of the
context encoder's).

At inference only the context encoder runs, on the full track with an
all-zero mask bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from trackmon.configbase import from_plain_dict, to_plain_dict
from trackmon.nn.core import Module, Param, prefixed
from trackmon.nn.layers import (
    FeedForward,
    Gelu,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    l1_loss,
    sinusoidal_positions,
)
from trackmon.nn.optim import Adam
from trackmon.nn.serial import load_arrays, save_arrays
from trackmon.objects import (
    DomainError,
    N_FEATURES,
    NormStats,
    ObjectTrack,
    SchemaError,
    T_MIN,
    fit_stats,
    standardize,
    to_feature_matrix,
)

CHECKPOINT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskingConfig:
    """How many distinct timesteps are blanked per track and step.

    ``n_masked = 0`` is accepted by the masking op itself (identity, useful
    in tests); training requires at least 1 and fewer than the shortest
    usable track.
    """

    n_masked: int = 4

    def __post_init__(self):
        if self.n_masked < 0:
            raise DomainError(f"n_masked must be >= 0, got {self.n_masked}")


@dataclass(frozen=True)
class EncoderConfig:
    """Transformer context/target encoder shape.

    The backbone runs at ``width`` (divisible by ``n_heads``); the 3-layer
    MLP head maps each token down to the latent size ``embed_dim``.
    """

    n_heads: int = 10
    depth: int = 5
    width: int = 40
    ffn_hidden: int = 160
    head_hidden: int = 64
    embed_dim: int = 32
    input_dim: int = N_FEATURES + 1  # four features plus the mask bit

    def __post_init__(self):
        if self.depth < 1:
            raise DomainError("encoder depth must be >= 1")
        if self.width % self.n_heads != 0:
            raise DomainError(
                f"width {self.width} must be divisible by n_heads {self.n_heads}"
            )
        if self.width % 2 != 0 or self.embed_dim % 2 != 0:
            raise DomainError("width and embed_dim must be even (position encoding)")
        if min(self.ffn_hidden, self.head_hidden, self.embed_dim, self.input_dim) < 1:
            raise DomainError("encoder dimensions must be positive")


@dataclass(frozen=True)
class PredictorConfig:
    """Decoder-style predictor shape; it operates at the latent width."""

    n_heads: int = 4
    depth: int = 3
    ffn_hidden: int = 128

    def __post_init__(self):
        if self.depth < 1 or self.n_heads < 1 or self.ffn_hidden < 1:
            raise DomainError("predictor dimensions must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Full training recipe; defaults are the reference settings."""

    epochs: int = 250
    learning_rate: float = 3e-5
    ema_decay: float = 0.99
    batch_size: int = 64
    seed: int = 0
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.learning_rate <= 0.0:
            raise DomainError("learning_rate must be positive")
        if not (0.0 < self.ema_decay < 1.0):
            raise DomainError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not (1 <= self.masking.n_masked < T_MIN):
            raise DomainError(
                f"training needs 1 <= n_masked < {T_MIN}, got {self.masking.n_masked}"
            )
        if self.encoder.embed_dim % self.predictor.n_heads != 0:
            raise DomainError(
                f"embed_dim {self.encoder.embed_dim} must be divisible by "
                f"predictor n_heads {self.predictor.n_heads}"
            )

    def to_dict(self) -> dict:
        return to_plain_dict(self)

    @classmethod
    def from_dict(cls, data: dict, where: str = "training") -> "TrainConfig":
        return from_plain_dict(cls, data, where)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def mask_timesteps(
    features: np.ndarray, n_masked: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Blank ``n_masked`` distinct random timesteps of a (T, 4) matrix.

    Returns ``(masked, m, unmasked)``: the masked copy has the selected rows
    zeroed and a fifth mask-bit column that is 1 exactly there; ``m`` holds
    the selected indices in ascending order; the unmasked copy is the input
    with an all-zero bit column (the target-encoder input).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != N_FEATURES:
        raise DomainError(f"expected a (T, {N_FEATURES}) matrix, got {features.shape}")
    t_len = features.shape[0]
    if n_masked < 0 or n_masked > t_len:
        raise DomainError(f"cannot mask {n_masked} of {t_len} timesteps")
    m = np.sort(rng.choice(t_len, size=n_masked, replace=False)).astype(np.int64)
    masked = np.concatenate([features, np.zeros((t_len, 1))], axis=1)
    masked[m, :N_FEATURES] = 0.0
    masked[m, N_FEATURES] = 1.0
    unmasked = np.concatenate([features, np.zeros((t_len, 1))], axis=1)
    return masked, m, unmasked


def with_zero_mask_bit(features: np.ndarray) -> np.ndarray:
    """Append the all-zero mask-bit column used at inference time."""
    features = np.asarray(features, dtype=np.float64)
    return np.concatenate([features, np.zeros((features.shape[0], 1))], axis=1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class EncoderBlock(Module):
    """Pre-norm transformer block: self-attention then feed-forward."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.width)
        self.attn = MultiHeadAttention(cfg.width, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.width)
        self.ffn = FeedForward(cfg.width, cfg.ffn_hidden, rng)

    def named_params(self):
        return (
            prefixed("ln1", self.ln1)
            + prefixed("attn", self.attn)
            + prefixed("ln2", self.ln2)
            + prefixed("ffn", self.ffn)
        )

    def forward(self, x: np.ndarray, key_mask: np.ndarray | None) -> np.ndarray:
        h = self.ln1.forward(x)
        x1 = x + self.attn.forward(h, h, key_mask)
        return x1 + self.ffn.forward(self.ln2.forward(x1))

    def backward(self, g: np.ndarray) -> np.ndarray:
        d_x1 = g + self.ln2.backward(self.ffn.backward(g))
        dq, dkv = self.attn.backward(d_x1)
        return d_x1 + self.ln1.backward(dq + dkv)


class TrackEncoder(Module):
    """Tokens-per-timestep track encoder.

    Input projection of the five feature columns to the backbone width,
    fixed sinusoidal position encodings (per-track positions), a stack of
    pre-norm self-attention blocks, and a 3-layer MLP head projecting each
    token to the latent dimension.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.in_proj = Linear(cfg.input_dim, cfg.width, rng)
        # The position encodings added after this projection have fixed RMS
        # ~1/sqrt(2) per channel, i.e. token norm ~sqrt(width/2), while a
        # fan-in initialized projection of a standardized state emits tokens
        # with norm O(1).  Scale the projection up by sqrt(width) so state
        # content and position carry comparable weight at initialization;
        # otherwise early attention layers see positions only and per-step
        # state detail never reaches the latent.
        scale = math.sqrt(cfg.width)
        self.in_proj.W.value *= scale
        self.in_proj.b.value *= scale
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final_ln = LayerNorm(cfg.width)
        self.head1 = Linear(cfg.width, cfg.head_hidden, rng)
        self.head_act1 = Gelu()
        self.head2 = Linear(cfg.head_hidden, cfg.head_hidden, rng)
        self.head_act2 = Gelu()
        self.head3 = Linear(cfg.head_hidden, cfg.embed_dim, rng)

    def named_params(self):
        out = prefixed("in_proj", self.in_proj)
        for i, blk in enumerate(self.blocks):
            out += prefixed(f"blocks.{i}", blk)
        out += prefixed("final_ln", self.final_ln)
        out += prefixed("head1", self.head1)
        out += prefixed("head2", self.head2)
        out += prefixed("head3", self.head3)
        return out

    def forward(self, x: np.ndarray, key_mask: np.ndarray | None = None) -> np.ndarray:
        if x.ndim != 3 or x.shape[-1] != self.cfg.input_dim:
            raise DomainError(
                f"encoder expects (B, T, {self.cfg.input_dim}) input, got {x.shape}"
            )
        h = self.in_proj.forward(x)
        h = h + sinusoidal_positions(x.shape[1], self.cfg.width)[None, :, :]
        for blk in self.blocks:
            h = blk.forward(h, key_mask)
        h = self.final_ln.forward(h)
        h = self.head_act1.forward(self.head1.forward(h))
        h = self.head_act2.forward(self.head2.forward(h))
        return self.head3.forward(h)

    def backward(self, g: np.ndarray) -> np.ndarray:
        g = self.head2.backward(self.head_act2.backward(self.head3.backward(g)))
        g = self.head1.backward(self.head_act1.backward(g))
        g = self.final_ln.backward(g)
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return self.in_proj.backward(g)


class DecoderBlock(Module):
    """Pre-norm decoder block: self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, cfg: PredictorConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, cfg.n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, cfg.n_heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, cfg.ffn_hidden, rng)

    def named_params(self):
        return (
            prefixed("ln1", self.ln1)
            + prefixed("self_attn", self.self_attn)
            + prefixed("ln2", self.ln2)
            + prefixed("cross_attn", self.cross_attn)
            + prefixed("ln3", self.ln3)
            + prefixed("ffn", self.ffn)
        )

    def forward(
        self, x: np.ndarray, memory: np.ndarray, mem_mask: np.ndarray | None
    ) -> np.ndarray:
        h = self.ln1.forward(x)
        x1 = x + self.self_attn.forward(h, h, None)
        x2 = x1 + self.cross_attn.forward(self.ln2.forward(x1), memory, mem_mask)
        return x2 + self.ffn.forward(self.ln3.forward(x2))

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d_x2 = g + self.ln3.backward(self.ffn.backward(g))
        dq, d_mem = self.cross_attn.backward(d_x2)
        d_x1 = d_x2 + self.ln2.backward(dq)
        dq2, dkv2 = self.self_attn.backward(d_x1)
        d_x = d_x1 + self.ln1.backward(dq2 + dkv2)
        return d_x, d_mem


class MaskedTokenPredictor(Module):
    """Predicts the latent tokens of blanked timesteps.

    Each query is a learned mask token fused (added) with the sinusoidal
    encoding of its masked position; queries self-attend and cross-attend
    the context tokens, then a final linear map produces the prediction.
    """

    def __init__(self, embed_dim: int, cfg: PredictorConfig, rng: np.random.Generator):
        if embed_dim % cfg.n_heads != 0:
            raise DomainError(
                f"embed_dim {embed_dim} must be divisible by n_heads {cfg.n_heads}"
            )
        self.embed_dim = embed_dim
        self.cfg = cfg
        self.token = Param(rng.normal(0.0, 0.02, size=embed_dim))
        self.blocks = [DecoderBlock(embed_dim, cfg, rng) for _ in range(cfg.depth)]
        self.final_ln = LayerNorm(embed_dim)
        self.out = Linear(embed_dim, embed_dim, rng)

    def named_params(self):
        out = [("token", self.token)]
        for i, blk in enumerate(self.blocks):
            out += prefixed(f"blocks.{i}", blk)
        out += prefixed("final_ln", self.final_ln)
        out += prefixed("out", self.out)
        return out

    def forward(
        self,
        context: np.ndarray,
        m: np.ndarray,
        key_mask: np.ndarray | None = None,
    ) -> np.ndarray:
        if context.ndim != 3 or context.shape[-1] != self.embed_dim:
            raise DomainError(
                f"predictor expects (B, T, {self.embed_dim}) context, got {context.shape}"
            )
        m = np.asarray(m, dtype=np.int64)
        if m.ndim != 2 or m.shape[0] != context.shape[0]:
            raise DomainError(f"mask indices must be (B, N_M), got {m.shape}")
        if m.size and (m.min() < 0 or m.max() >= context.shape[1]):
            raise DomainError("mask indices out of range for the context length")
        positions = sinusoidal_positions(context.shape[1], self.embed_dim)
        q = self.token.value[None, None, :] + positions[m]
        for blk in self.blocks:
            q = blk.forward(q, context, key_mask)
        self._context_shape = context.shape
        return self.out.forward(self.final_ln.forward(q))

    def backward(self, g: np.ndarray) -> np.ndarray:
        g = self.final_ln.backward(self.out.backward(g))
        d_context = np.zeros(self._context_shape)
        for blk in reversed(self.blocks):
            g, d_mem = blk.backward(g)
            d_context += d_mem
        self.token.grad += g.sum(axis=(0, 1))
        return d_context


def ema_update(source: Module, target: Module, decay: float) -> None:
    """targets <- decay * targets + (1 - decay) * sources, name-matched.

    ``decay`` may be 1.0 here (no-op) for testing; training configs restrict
    it to (0, 1).
    """
    src = dict(source.named_params())
    dst = dict(target.named_params())
    if src.keys() != dst.keys():
        raise DomainError("EMA source/target parameter names differ")
    for name, p in dst.items():
        p.value *= decay
        p.value += (1.0 - decay) * src[name].value


def copy_params(source: Module, target: Module) -> None:
    for (_, ps), (_, pt) in zip(source.named_params(), target.named_params()):
        pt.value[...] = ps.value


# ---------------------------------------------------------------------------
# training state and loop
# ---------------------------------------------------------------------------

@dataclass
class Embedding:
    """Latent token sequence of one track, with provenance."""

    track_id: str
    scene_id: str
    label: int | None
    values: np.ndarray  # (T, embed_dim)
    checkpoint_id: str


class Checkpoint:
    """Live training state: models, optimizer, rng stream, and history."""

    def __init__(self, config: TrainConfig, stats: NormStats):
        self.config = config
        self.stats = stats
        root = np.random.SeedSequence([config.seed])
        init_ss, train_ss = root.spawn(2)
        init_rng = np.random.default_rng(init_ss)
        self.encoder = TrackEncoder(config.encoder, init_rng)
        self.predictor = MaskedTokenPredictor(
            config.encoder.embed_dim, config.predictor, init_rng
        )
        self.target = TrackEncoder(config.encoder, init_rng)
        copy_params(self.encoder, self.target)
        self.adam = Adam(self._trainable(), lr=config.learning_rate)
        self.rng = np.random.default_rng(train_ss)
        self.epoch = 0
        self.loss_history: list[float] = []
        self.checkpoint_id = ""

    def _trainable(self) -> list[tuple[str, Param]]:
        return prefixed("encoder", self.encoder) + prefixed("predictor", self.predictor)

    @property
    def embed_dim(self) -> int:
        return self.config.encoder.embed_dim

    # -- one optimization step ------------------------------------------------

    def training_step(self, feats: Sequence[np.ndarray]) -> float:
        """One batch: mask, encode, predict, compare to EMA targets, update.

        ``feats`` holds standardized (T_i, 4) matrices.  Tracks are padded to
        the longest in the batch; padded positions are excluded from
        attention keys and never selected for masking.
        """
        cfg = self.config
        n_masked = cfg.masking.n_masked
        batch = len(feats)
        lengths = [f.shape[0] for f in feats]
        t_max = max(lengths)
        masked_in = np.zeros((batch, t_max, N_FEATURES + 1))
        target_in = np.zeros((batch, t_max, N_FEATURES + 1))
        valid = np.zeros((batch, t_max))
        m = np.zeros((batch, n_masked), dtype=np.int64)
        for i, f in enumerate(feats):
            masked, m_i, unmasked = mask_timesteps(f, n_masked, self.rng)
            t_i = lengths[i]
            masked_in[i, :t_i] = masked
            target_in[i, :t_i] = unmasked
            valid[i, :t_i] = 1.0
            m[i] = m_i

        self.adam.zero_grads()
        context = self.encoder.forward(masked_in, valid)
        pred = self.predictor.forward(context, m, valid)
        # stop-gradient branch: forward only, no backward ever reaches it
        target_tokens = self.target.forward(target_in, valid)
        target_sel = np.take_along_axis(target_tokens, m[:, :, None], axis=1)
        loss, d_pred = l1_loss(pred, target_sel)
        if not np.isfinite(loss):
            raise DomainError(f"non-finite training loss at epoch {self.epoch}")
        d_context = self.predictor.backward(d_pred)
        self.encoder.backward(d_context)
        self.adam.step()
        ema_update(self.encoder, self.target, cfg.ema_decay)
        return loss

    # -- persistence ----------------------------------------------------------

    def _param_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self._trainable():
            arrays[f"model.{name}"] = p.value
        for name, p in self.target.named_params():
            arrays[f"ema.{name}"] = p.value
        for name, arr in self.adam.state_arrays().items():
            arrays[f"adam.{name}"] = arr
        return arrays

    def save(self, directory: str | Path) -> str:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        params_path = directory / "params.npz"
        save_arrays(params_path, self._param_arrays())
        self.checkpoint_id = hashlib.sha256(params_path.read_bytes()).hexdigest()[:16]
        meta = {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "embed_dim": self.embed_dim,
            "config": self.config.to_dict(),
            "norm_stats": self.stats.to_dict(),
            "epoch": self.epoch,
            "loss_history": self.loss_history,
            "rng_state": self.rng.bit_generator.state,
            "checkpoint_id": self.checkpoint_id,
            "param_counts": {
                "encoder": self.encoder.param_count(),
                "predictor": self.predictor.param_count(),
            },
        }
        (directory / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
        return self.checkpoint_id

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        meta_path = directory / "meta.json"
        params_path = directory / "params.npz"
        if not meta_path.exists() or not params_path.exists():
            raise DomainError(f"no checkpoint found under {directory}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise SchemaError(
                f"unsupported checkpoint schema {meta.get('schema_version')!r}; "
                f"expected {CHECKPOINT_SCHEMA_VERSION}"
            )
        config = TrainConfig.from_dict(meta["config"], where="checkpoint.config")
        stats = NormStats.from_dict(meta["norm_stats"])
        state = cls(config, stats)
        arrays = load_arrays(params_path)
        digest = hashlib.sha256(params_path.read_bytes()).hexdigest()[:16]
        if digest != meta["checkpoint_id"]:
            raise SchemaError(
                f"checkpoint id mismatch under {directory}: parameters were modified"
            )
        consumed = set()
        for name, p in state._trainable():
            p.value[...] = arrays[f"model.{name}"]
            consumed.add(f"model.{name}")
        for name, p in state.target.named_params():
            p.value[...] = arrays[f"ema.{name}"]
            consumed.add(f"ema.{name}")
        adam_arrays = {
            name[len("adam.") :]: arr
            for name, arr in arrays.items()
            if name.startswith("adam.")
        }
        state.adam.load_state_arrays(adam_arrays)
        consumed |= {f"adam.{n}" for n in adam_arrays}
        leftover = set(arrays) - consumed
        if leftover:
            raise SchemaError(f"checkpoint has unexpected arrays: {sorted(leftover)}")
        state.rng.bit_generator.state = meta["rng_state"]
        state.epoch = meta["epoch"]
        state.loss_history = list(meta["loss_history"])
        state.checkpoint_id = meta["checkpoint_id"]
        return state


def train(
    tracks: Sequence[ObjectTrack],
    config: TrainConfig,
    resume: Checkpoint | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Fit the masked-prediction model on untagged tracks.

    Each epoch shuffles the track order, stable-sorts it by length (so
    batches waste little padding), chunks it into batches, and shuffles the
    batch order.  Passing ``resume`` continues an earlier run exactly: the
    restored rng stream makes epoch ``k`` identical to what an uninterrupted
    run would have executed.
    """
    if not tracks:
        raise DomainError("cannot train on an empty track list")
    if resume is not None:
        state = resume
        # extending the epoch budget is the point of resuming; everything
        # else about the recipe must match the checkpoint
        if replace(state.config, epochs=config.epochs) != config:
            raise DomainError("resume checkpoint was trained with a different config")
        state.config = config
    else:
        stats = fit_stats(tracks)
        state = Checkpoint(config, stats)
    feats = [standardize(to_feature_matrix(t), stats=state.stats) for t in tracks]
    n = len(feats)
    lengths = np.array([f.shape[0] for f in feats])
    batch_size = min(config.batch_size, n)
    for epoch in range(state.epoch, config.epochs):
        perm = state.rng.permutation(n)
        perm = perm[np.argsort(lengths[perm], kind="stable")]
        batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
        order = state.rng.permutation(len(batches))
        losses = []
        for b in order:
            losses.append(state.training_step([feats[i] for i in batches[b]]))
        state.loss_history.append(float(np.mean(losses)))
        state.epoch = epoch + 1
        if progress is not None:
            progress(state.epoch, state.loss_history[-1])
    return state


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def embed_tracks(
    tracks: Sequence[ObjectTrack],
    state: Checkpoint,
    batch_size: int = 256,
) -> list[Embedding]:
    """Context-encode full tracks (all-zero mask bit) into latent tokens.

    Tracks are grouped by length so each forward pass needs no padding;
    outputs come back in input order.
    """
    feats = [
        with_zero_mask_bit(standardize(to_feature_matrix(t), state.stats))
        for t in tracks
    ]
    out: list[Embedding | None] = [None] * len(tracks)
    by_length: dict[int, list[int]] = {}
    for i, f in enumerate(feats):
        by_length.setdefault(f.shape[0], []).append(i)
    for t_len in sorted(by_length):
        idxs = by_length[t_len]
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            stackmat = np.stack([feats[i] for i in chunk])
            tokens = state.encoder.forward(stackmat)
            for row, i in enumerate(chunk):
                track = tracks[i]
                out[i] = Embedding(
                    track_id=track.track_id,
                    scene_id=track.scene_id,
                    label=track.label,
                    values=np.array(tokens[row]),
                    checkpoint_id=state.checkpoint_id,
                )
    return [e for e in out if e is not None]


def embed_track(track: ObjectTrack, state: Checkpoint) -> Embedding:
    return embed_tracks([track], state)[0]


# ---------------------------------------------------------------------------
# documentation helpers
# ---------------------------------------------------------------------------

def flop_report(config: TrainConfig, t_len: int = 40) -> dict:
    """Approximate forward FLOPs per track (1 multiply-add = 2 FLOPs).

    Attention cost counts the score and value contractions; elementwise work
    is ignored.  Provided for documentation, not enforced by any test bound.
    """
    enc = config.encoder
    pred = config.predictor
    n_m = config.masking.n_masked

    def linear_flops(tokens: int, d_in: int, d_out: int) -> int:
        return 2 * tokens * d_in * d_out

    enc_block = (
        4 * linear_flops(t_len, enc.width, enc.width)
        + 2 * 2 * t_len * t_len * enc.width
        + linear_flops(t_len, enc.width, enc.ffn_hidden)
        + linear_flops(t_len, enc.ffn_hidden, enc.width)
    )
    encoder_total = (
        linear_flops(t_len, enc.input_dim, enc.width)
        + enc.depth * enc_block
        + linear_flops(t_len, enc.width, enc.head_hidden)
        + linear_flops(t_len, enc.head_hidden, enc.head_hidden)
        + linear_flops(t_len, enc.head_hidden, enc.embed_dim)
    )
    d = enc.embed_dim
    pred_block = (
        4 * linear_flops(n_m, d, d)
        + 2 * 2 * n_m * n_m * d
        + 2 * linear_flops(t_len, d, d)  # cross-attention keys/values
        + 2 * linear_flops(n_m, d, d)  # cross-attention queries/output
        + 2 * 2 * n_m * t_len * d
        + linear_flops(n_m, d, pred.ffn_hidden)
        + linear_flops(n_m, pred.ffn_hidden, d)
    )
    predictor_total = pred.depth * pred_block + linear_flops(n_m, d, d)
    return {
        "timesteps": t_len,
        "encoder_forward_flops": encoder_total,
        "predictor_forward_flops": predictor_total,
        "encoder_params": _count(EncoderConfig, config),
        "predictor_params": _count(PredictorConfig, config),
    }


def _count(kind, config: TrainConfig) -> int:
    rng = np.random.default_rng(0)
    if kind is EncoderConfig:
        return TrackEncoder(config.encoder, rng).param_count()
    return MaskedTokenPredictor(
        config.encoder.embed_dim, config.predictor, rng
    ).param_count()
