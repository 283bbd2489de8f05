"""Secondary learners: cheap regressors from a context's tokens to normalized IG.

Four kinds are available:

``conv``
    frozen LM token embeddings -> width-k convolution -> GELU -> max-pool over
    time -> 2-layer feed-forward head -> scalar. Trained with Adam on MSE.
``linear_onehot``
    ridge regression on per-context token counts.
``linear_embed``
    ridge regression on the mean embedded token.
``token_average``
    each token's value is the mean target of the training contexts that
    contain it; a context scores the mean value over its positions.

Tokens never seen in training contribute 0, the normalized-neutral value.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Context, contexts_to_array
from .errors import (
    DataLeakError,
    DatasetNotNormalizedError,
    IncompatibleSnapshotError,
    InvalidConfigError,
    InvalidTokenError,
)
from .infogain import IGDataset, split_dataset
from .model import DTYPE, AdamState, OptimizerConfig, ParameterSnapshot, adam_step, unpack
from .stats import correlation_test, pearson_with_flag

logger = logging.getLogger(__name__)

KINDS = ("conv", "linear_onehot", "linear_embed", "token_average")
LEARNER_MAGIC = b"IGFLRN1\n"
RIDGE_LAMBDA = 1e-6
PREDICT_CHUNK = 1024


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "conv"
    embed_dim: int = 64
    kernel_width: int = 3
    conv_channels: int = 32
    hidden_dim: int = 32
    learning_rate: float = 1e-5
    epochs: int = 10
    batch_size: int = 32
    context_length: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"learner kind must be one of {KINDS}, got {self.kind!r}")
        if not 1 <= self.kernel_width <= self.context_length:
            raise InvalidConfigError(
                f"kernel_width must lie in [1, context_length={self.context_length}], got {self.kernel_width}"
            )
        for name in ("embed_dim", "conv_channels", "hidden_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be positive")

    @property
    def uses_embeddings(self) -> bool:
        return self.kind in ("conv", "linear_embed")


def conv_layout(cfg: LearnerConfig) -> list[tuple[str, tuple[int, ...]]]:
    c, d, k, h = cfg.conv_channels, cfg.embed_dim, cfg.kernel_width, cfg.hidden_dim
    return [("conv.w", (c, d, k)), ("conv.b", (c,)), ("fc1.w", (h, c)), ("fc1.b", (h,)),
            ("fc2.w", (1, h)), ("fc2.b", (1,))]


def _unpack_conv(cfg: LearnerConfig, theta: torch.Tensor) -> dict[str, torch.Tensor]:
    out, i = {}, 0
    for name, shape in conv_layout(cfg):
        n = int(np.prod(shape))
        out[name] = theta[i : i + n].view(shape)
        i += n
    return out


def conv_forward(cfg: LearnerConfig, theta: torch.Tensor, embeddings: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Scores for a (N, T) token batch; differentiable in ``theta``."""
    p = _unpack_conv(cfg, theta)
    x = embeddings[tokens].transpose(1, 2)  # (N, d, T)
    h = F.gelu(F.conv1d(x, p["conv.w"], p["conv.b"]))
    h = h.max(dim=2).values
    h = F.gelu(h @ p["fc1.w"].T + p["fc1.b"])
    return (h @ p["fc2.w"].T + p["fc2.b"]).squeeze(1)


def conv_loss(cfg: LearnerConfig, theta: torch.Tensor, embeddings: torch.Tensor, tokens: torch.Tensor,
              targets: torch.Tensor) -> torch.Tensor:
    return torch.mean((conv_forward(cfg, theta, embeddings, tokens) - targets) ** 2)


def init_conv_params(cfg: LearnerConfig, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for name, shape in conv_layout(cfg):
        if name.endswith(".b"):
            parts.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))
    return np.concatenate([p.ravel() for p in parts])


def lm_embeddings(base: ParameterSnapshot) -> np.ndarray:
    """The base LM's token-embedding table, shape ``(vocab, d_model)``."""
    return unpack(base.config, base.params_tensor())["wte"].numpy().copy()


def _context_hash(x) -> str:
    return hashlib.sha256(np.asarray(x, dtype="<i8").tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class SecondaryLearner:
    config: LearnerConfig
    weights: np.ndarray = field(repr=False)
    vocab_size: int
    embeddings: np.ndarray | None = field(default=None, repr=False)
    # token_average / onehot: which tokens appeared in training
    seen: np.ndarray | None = field(default=None, repr=False)
    trained_on: str = ""
    objective_fingerprint: str = ""
    base_model_fingerprint: str = ""
    norm_mean: float | None = None
    norm_std: float | None = None
    train_keys: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        for name in ("weights", "embeddings", "seen"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=bool if name == "seen" else np.float64, copy=True)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def n_params(self) -> int:
        return int(self.weights.size)

    def predict_many(self, contexts) -> np.ndarray:
        """Predicted normalized IG for each context (pure, deterministic)."""
        tokens = _tokens(contexts, self.vocab_size)
        if tokens.shape[0] == 0:
            return np.zeros(0)
        kind = self.config.kind
        if kind == "conv":
            theta = torch.tensor(self.weights)
            emb = torch.tensor(self.embeddings)
            with torch.no_grad():
                out = [conv_forward(self.config, theta, emb, torch.from_numpy(tokens[i : i + PREDICT_CHUNK])).numpy()
                       for i in range(0, tokens.shape[0], PREDICT_CHUNK)]
            return np.concatenate(out)
        if kind == "token_average":
            return self.weights[tokens].mean(axis=1)
        return _features(kind, tokens, self.vocab_size, self.embeddings) @ self.weights

    def unseen_mask(self, contexts) -> np.ndarray:
        """True for contexts containing a token absent from training (onehot / token_average only)."""
        tokens = _tokens(contexts, self.vocab_size)
        if self.seen is None:
            return np.zeros(tokens.shape[0], dtype=bool)
        return ~self.seen[tokens].all(axis=1)

    def save(self, path) -> None:
        arrays = [("weights", self.weights)]
        if self.embeddings is not None:
            arrays.append(("embeddings", self.embeddings))
        if self.seen is not None:
            arrays.append(("seen", self.seen.astype(np.float64)))
        tensors, offset = [], 0
        for name, arr in arrays:
            tensors.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            offset += arr.size
        header = {
            "kind": self.config.kind,
            "config": asdict(self.config),
            "vocab_size": self.vocab_size,
            "trained_on": self.trained_on,
            "objective_fingerprint": self.objective_fingerprint,
            "base_model_fingerprint": self.base_model_fingerprint,
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "train_keys": sorted(self.train_keys),
            "tensors": tensors,
        }
        with open(path, "wb") as fh:
            fh.write(LEARNER_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SecondaryLearner":
        with open(path, "rb") as fh:
            if fh.read(len(LEARNER_MAGIC)) != LEARNER_MAGIC:
                raise IncompatibleSnapshotError(f"{path}: not a learner file")
            header = json.loads(fh.readline())
            payload = np.frombuffer(fh.read(), dtype="<f8")
        arrays = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"]))
            if t["offset"] + n > payload.size:
                raise IncompatibleSnapshotError(f"{path}: truncated payload")
            arrays[t["name"]] = payload[t["offset"] : t["offset"] + n].reshape(t["shape"])
        seen = arrays.get("seen")
        return cls(
            LearnerConfig(**header["config"]),
            arrays["weights"],
            header["vocab_size"],
            arrays.get("embeddings"),
            None if seen is None else seen > 0.5,
            header["trained_on"],
            header["objective_fingerprint"],
            header["base_model_fingerprint"],
            header["norm_mean"],
            header["norm_std"],
            frozenset(header["train_keys"]),
        )


def predict(learner: SecondaryLearner, x: Context) -> float:
    return float(learner.predict_many([x])[0])


def _tokens(contexts, vocab_size: int) -> np.ndarray:
    if isinstance(contexts, np.ndarray):
        tokens = contexts.astype(np.int64).reshape(contexts.shape[0], -1)
    else:
        tokens = contexts_to_array(list(contexts))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise InvalidTokenError(f"token ids must lie in [0, {vocab_size})")
    return tokens


def _features(kind: str, tokens: np.ndarray, vocab_size: int, embeddings: np.ndarray | None) -> np.ndarray:
    n = tokens.shape[0]
    if kind == "linear_onehot":
        counts = np.zeros((n, vocab_size + 1))
        np.add.at(counts, (np.repeat(np.arange(n), tokens.shape[1]), tokens.ravel()), 1.0)
        counts[:, -1] = 1.0
        return counts
    feats = embeddings[tokens].mean(axis=1)
    return np.concatenate([feats, np.ones((n, 1))], axis=1)


def _ridge(x: np.ndarray, y: np.ndarray, lam: float = RIDGE_LAMBDA) -> np.ndarray:
    gram = x.T @ x + lam * np.eye(x.shape[1])
    return np.linalg.solve(gram, x.T @ y)


def _fit_conv(cfg: LearnerConfig, tokens: np.ndarray, y: np.ndarray, embeddings: np.ndarray, rng) -> np.ndarray:
    theta = torch.from_numpy(init_conv_params(cfg, rng))
    emb = torch.from_numpy(embeddings)
    tok_t = torch.from_numpy(tokens)
    y_t = torch.from_numpy(y)
    state = AdamState.zeros(theta.numel())
    opt = OptimizerConfig(learning_rate=cfg.learning_rate)
    n = tokens.shape[0]
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            th = theta.detach().requires_grad_(True)
            loss = conv_loss(cfg, th, emb, tok_t[idx], y_t[idx])
            (grad,) = torch.autograd.grad(loss, th)
            theta, state = adam_step(theta, state, grad, opt)
            total += float(loss.detach()) * idx.numel()
        logger.debug("conv learner epoch %d train mse %.4f", epoch, total / n)
    return theta.numpy()


def train_learner(config: LearnerConfig, d: IGDataset, rng_seed=0, embeddings: np.ndarray | None = None,
                  vocab_size: int | None = None) -> SecondaryLearner:
    """Fit a learner of ``config.kind`` to ``d``'s normalized IG targets.

    ``embeddings`` (the frozen LM token table) is required for the conv and
    linear_embed kinds; its width must equal ``config.embed_dim``.
    """
    if not d.normalized:
        raise DatasetNotNormalizedError("train_learner needs a normalized IGDataset (run normalize_ig first)")
    if len(d) < 2:
        raise InvalidConfigError("train_learner needs at least 2 samples")
    if config.uses_embeddings:
        if embeddings is None:
            raise InvalidConfigError(f"learner kind {config.kind!r} needs the LM embedding table")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape[1] != config.embed_dim:
            raise InvalidConfigError(
                f"embed_dim={config.embed_dim} but the embedding table has width {embeddings.shape[1]}"
            )
        vocab_size = embeddings.shape[0]
    elif vocab_size is None:
        raise InvalidConfigError(f"learner kind {config.kind!r} needs vocab_size")
    tokens = _tokens(d.contexts, vocab_size)
    if tokens.shape[1] < config.kernel_width:
        raise InvalidConfigError("contexts are shorter than the convolution kernel")
    y = d.targets
    rng = np.random.default_rng(rng_seed)
    seen = None
    if config.kind == "conv":
        weights = _fit_conv(config, tokens, y, embeddings, rng)
    elif config.kind == "token_average":
        sums = np.zeros(vocab_size)
        counts = np.zeros(vocab_size)
        for row, target in zip(tokens, y):
            u = np.unique(row)
            sums[u] += target
            counts[u] += 1
        seen = counts > 0
        weights = np.where(seen, sums / np.maximum(counts, 1), 0.0)
    else:
        weights = _ridge(_features(config.kind, tokens, vocab_size, embeddings), y)
        if config.kind == "linear_onehot":
            seen = np.bincount(tokens.ravel(), minlength=vocab_size) > 0
    return SecondaryLearner(
        config,
        weights,
        vocab_size,
        embeddings if config.uses_embeddings else None,
        seen,
        d.fingerprint,
        d.objective_fingerprint,
        d.base_model_fingerprint,
        d.norm_mean,
        d.norm_std,
        frozenset(_context_hash(c.x) for c in d.contexts),
    )


@dataclass(frozen=True)
class LearnerEvalReport:
    pearson_r: float
    mse: float
    n_heldout: int
    p_value: float = 1.0
    degenerate: bool = False
    n_excluded: int = 0
    predictions: tuple[tuple[float, float], ...] | None = field(default=None, repr=False)


def evaluate_learner(learner: SecondaryLearner, heldout: IGDataset, n_perm: int = 10_000, rng_seed=0,
                     keep_predictions: bool = False) -> LearnerEvalReport:
    """Held-out Pearson r, MSE and a one-sided permutation p-value for r > 0.

    For the onehot and token_average kinds, held-out contexts containing a
    token unseen in training are left out of the scores (and counted).
    """
    if not heldout.normalized:
        raise DatasetNotNormalizedError("held-out dataset must be normalized")
    leaked = sum(_context_hash(c.x) in learner.train_keys for c in heldout.contexts)
    if leaked:
        raise DataLeakError(f"{leaked} held-out contexts also appear in the learner's training data")
    keep = ~learner.unseen_mask(heldout.contexts)
    contexts = [c for c, k in zip(heldout.contexts, keep.tolist()) if k]
    targets = heldout.targets[keep]
    if len(contexts) < 2:
        raise InvalidConfigError("fewer than 2 evaluable held-out contexts")
    pred = learner.predict_many(contexts)
    r, p, degenerate = correlation_test(pred, targets, n_perm=n_perm, rng_seed=rng_seed)
    mse = float(np.mean((pred - targets) ** 2))
    pairs = tuple(zip(pred.tolist(), targets.tolist())) if keep_predictions else None
    return LearnerEvalReport(r, mse, len(contexts), p, degenerate, int((~keep).sum()), pairs)


@dataclass(frozen=True)
class SweepRow:
    kind: str
    size: int
    pearson_r: float
    p_value: float
    n_heldout: int


def sample_efficiency_sweep(
    configs: Sequence[LearnerConfig],
    d: IGDataset,
    sizes: Sequence[int],
    heldout_size: int,
    rng_seed=0,
    embeddings: np.ndarray | None = None,
    vocab_size: int | None = None,
    n_perm: int = 10_000,
) -> list[SweepRow]:
    """Held-out r of each learner kind trained on growing subsets of one fixed train split.

    Subsets keep the train split's order, so the largest size (the whole
    split) trains exactly as ``train_learner`` on that split would.
    """
    train, heldout = split_dataset(d, heldout_size, rng_seed)
    if max(sizes) > len(train):
        raise InvalidConfigError(f"largest size {max(sizes)} exceeds the {len(train)} training samples")
    rng = np.random.default_rng(rng_seed)
    rows = []
    for size in sizes:
        idx = np.sort(rng.permutation(len(train))[:size])
        sub = train.subset(idx.tolist())
        for cfg in configs:
            learner = train_learner(cfg, sub, cfg.seed, embeddings, vocab_size)
            rep = evaluate_learner(learner, heldout, n_perm=n_perm, rng_seed=rng_seed)
            rows.append(SweepRow(cfg.kind, int(size), rep.pearson_r, rep.p_value, rep.n_heldout))
            logger.info("sweep %s size=%d r=%.3f", cfg.kind, size, rep.pearson_r)
    return rows
