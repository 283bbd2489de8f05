"""Tiny causal transformer language model over a flat float64 parameter vector.

The model is a 2-layer (configurable) pre-norm GPT miniature: learned
positional embeddings, masked multi-head self-attention, GELU feed-forward,
final layer norm and an output head tied to the token embedding. All
parameters live in one contiguous float64 vector laid out in the order given
by :func:`param_layout`; gradients come from torch autograd.

Loss is measured in bits per predicted token. A context of length T yields
T - 1 targets (position i+1 predicted from positions <= i).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Context, ContextSampler, Corpus, contexts_to_array, sample_contexts
from .errors import (
    IncompatibleSnapshotError,
    InvalidConfigError,
    InvalidTokenError,
    NonFiniteGradientError,
    NonFiniteParametersError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LN2 = math.log(2.0)
CKPT_MAGIC = b"IGFCKPT1"
CKPT_VERSION = 1
# objective / test sets are evaluated in slices of this many contexts
EVAL_CHUNK = 64


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise InvalidConfigError("vocab_size must be positive")
        if self.context_length < 2:
            raise InvalidConfigError("context_length must be >= 2")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise InvalidConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.ffn_mult < 1:
            raise InvalidConfigError("n_layers must be >= 0 and ffn_mult >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidConfigError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise InvalidConfigError("epsilon must be positive")


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order of the flat parameter vector."""
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    layout = [("wte", (cfg.vocab_size, d)), ("wpe", (cfg.context_length, d))]
    for i in range(cfg.n_layers):
        p = f"h{i}."
        layout += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.qkv.w", (3 * d, d)), (p + "attn.qkv.b", (3 * d,)),
            (p + "attn.proj.w", (d, d)), (p + "attn.proj.b", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.fc.w", (f, d)), (p + "mlp.fc.b", (f,)),
            (p + "mlp.proj.w", (d, f)), (p + "mlp.proj.b", (d,)),
        ]
    layout += [("lnf.g", (d,)), ("lnf.b", (d,))]
    return layout


def n_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for _, s in param_layout(cfg))


def unpack(cfg: ModelConfig, theta: torch.Tensor) -> dict[str, torch.Tensor]:
    out, o = {}, 0
    for name, shape in param_layout(cfg):
        size = math.prod(shape)
        out[name] = theta[o : o + size].view(shape)
        o += size
    return out


def init_params(cfg: ModelConfig) -> torch.Tensor:
    """normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    chunks = []
    for name, shape in param_layout(cfg):
        size = math.prod(shape)
        if name.endswith(".g"):
            chunks.append(np.ones(size))
        elif name.endswith(".b"):
            chunks.append(np.zeros(size))
        else:
            chunks.append(rng.normal(0.0, 0.02, size))
    return torch.from_numpy(np.concatenate(chunks))


def _as_tokens(cfg: ModelConfig, x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        arr = x.to(torch.int64)
    else:
        if isinstance(x, Sequence) and x and isinstance(x[0], Context):
            x = contexts_to_array(x)
        arr = torch.as_tensor(np.asarray(x, dtype=np.int64))
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] > cfg.context_length:
        raise InvalidTokenError(f"expected (batch, <= {cfg.context_length}) tokens, got shape {tuple(arr.shape)}")
    if arr.numel() and (int(arr.min()) < 0 or int(arr.max()) >= cfg.vocab_size):
        raise InvalidTokenError(f"token ids must lie in [0, {cfg.vocab_size})")
    return arr


def logits(cfg: ModelConfig, theta: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Next-token logits, shape (batch, time, vocab). ``tokens`` must be validated."""
    p = unpack(cfg, theta)
    B, T = tokens.shape
    d, H = cfg.d_model, cfg.n_heads
    h = p["wte"][tokens] + p["wpe"][:T]
    for i in range(cfg.n_layers):
        q = f"h{i}."
        a = F.layer_norm(h, (d,), p[q + "ln1.g"], p[q + "ln1.b"], eps=1e-5)
        qkv = F.linear(a, p[q + "attn.qkv.w"], p[q + "attn.qkv.b"]).view(B, T, 3, H, d // H)
        qh, kh, vh = qkv.permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(qh, kh, vh, is_causal=True)
        y = y.transpose(1, 2).reshape(B, T, d)
        h = h + F.linear(y, p[q + "attn.proj.w"], p[q + "attn.proj.b"])
        a = F.layer_norm(h, (d,), p[q + "ln2.g"], p[q + "ln2.b"], eps=1e-5)
        h = h + F.linear(F.gelu(F.linear(a, p[q + "mlp.fc.w"], p[q + "mlp.fc.b"])),
                         p[q + "mlp.proj.w"], p[q + "mlp.proj.b"])
    h = F.layer_norm(h, (d,), p["lnf.g"], p["lnf.b"], eps=1e-5)
    return F.linear(h, p["wte"])


def _token_nats(cfg: ModelConfig, theta: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Summed negative log-likelihood (nats) of positions 1..T-1."""
    lg = logits(cfg, theta, tokens[:, :-1]).reshape(-1, cfg.vocab_size)
    target = tokens[:, 1:].reshape(-1, 1)
    return (torch.logsumexp(lg, dim=-1) - lg.gather(1, target)[:, 0]).sum()


class TinyCausalLM:
    """A model configuration plus its current flat parameter vector."""

    def __init__(self, config: ModelConfig, params: torch.Tensor | np.ndarray | None = None):
        self.config = config
        if params is None:
            params = init_params(config)
        if isinstance(params, np.ndarray):
            params = torch.from_numpy(np.array(params, dtype=np.float64))
        else:
            params = params.detach().to(DTYPE).clone()
        if params.shape != (n_params(config),):
            raise IncompatibleSnapshotError(f"expected {n_params(config)} parameters, got {tuple(params.shape)}")
        self.params = params

    @property
    def n_params(self) -> int:
        return self.params.numel()

    def copy(self) -> "TinyCausalLM":
        return TinyCausalLM(self.config, self.params)

    def _check_params(self, theta: torch.Tensor) -> None:
        if not bool(torch.isfinite(theta).all()):
            raise NonFiniteParametersError("model parameters contain NaN or infinity")

    def forward(self, x, params: torch.Tensor | None = None) -> torch.Tensor:
        """Per-position next-token probabilities, shape (batch, time, vocab)."""
        theta = self.params if params is None else params
        self._check_params(theta)
        tokens = _as_tokens(self.config, x)
        with torch.no_grad():
            return torch.softmax(logits(self.config, theta, tokens), dim=-1)

    def loss_bits(self, batch, params: torch.Tensor | None = None) -> float:
        """Mean cross-entropy in bits over every predicted position of ``batch``."""
        theta = self.params if params is None else params
        self._check_params(theta)
        tokens = _as_tokens(self.config, batch)
        if tokens.shape[0] == 0 or tokens.shape[1] < 2:
            raise InvalidConfigError("batch must contain at least one context of length >= 2")
        total = 0.0
        with torch.no_grad():
            for start in range(0, tokens.shape[0], EVAL_CHUNK):
                total += float(_token_nats(self.config, theta, tokens[start : start + EVAL_CHUNK]))
        return total / (tokens.shape[0] * (tokens.shape[1] - 1)) / LN2

    def perplexity(self, eval_set, params: torch.Tensor | None = None) -> float:
        return 2.0 ** self.loss_bits(eval_set, params)

    def per_context_loss_bits(self, contexts, params: torch.Tensor | None = None) -> np.ndarray:
        theta = self.params if params is None else params
        self._check_params(theta)
        tokens = _as_tokens(self.config, contexts)
        out = []
        with torch.no_grad():
            for start in range(0, tokens.shape[0], EVAL_CHUNK):
                chunk = tokens[start : start + EVAL_CHUNK]
                lg = logits(self.config, theta, chunk[:, :-1])
                nll = torch.logsumexp(lg, -1) - lg.gather(2, chunk[:, 1:, None])[..., 0]
                out.append((nll.mean(dim=1) / LN2).numpy())
        return np.concatenate(out)

    def backward(self, batch, params: torch.Tensor | None = None) -> tuple[float, torch.Tensor]:
        """Return (loss_bits, gradient of loss_bits w.r.t. the flat parameters)."""
        theta = self.params if params is None else params
        self._check_params(theta)
        tokens = _as_tokens(self.config, batch)
        if tokens.shape[0] == 0 or tokens.shape[1] < 2:
            raise InvalidConfigError("batch must contain at least one context of length >= 2")
        theta = theta.detach().requires_grad_(True)
        n_targets = tokens.shape[0] * (tokens.shape[1] - 1)
        loss = _token_nats(self.config, theta, tokens) / (n_targets * LN2)
        (grad,) = torch.autograd.grad(loss, theta)
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteGradientError("gradient contains NaN or infinity")
        return float(loss.detach()), grad


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE), 0)


def adam_step(params: torch.Tensor, state: AdamState, grad: torch.Tensor, cfg: OptimizerConfig):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteGradientError("cannot take an Adam step on a non-finite gradient")
    step = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**step)
    v_hat = v / (1.0 - cfg.beta2**step)
    new = params - cfg.learning_rate * m_hat / (torch.sqrt(v_hat) + cfg.epsilon)
    return new, AdamState(m, v, step)


@dataclass(frozen=True)
class ParameterSnapshot:
    """Immutable copy of model weights and (optionally) Adam state."""

    config: ModelConfig
    params: np.ndarray = field(repr=False)
    adam_m: np.ndarray | None = field(default=None, repr=False)
    adam_v: np.ndarray | None = field(default=None, repr=False)
    adam_step: int = 0

    def __post_init__(self):
        for name in ("params", "adam_m", "adam_v"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype="<f8", copy=True)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        h.update(self.params.tobytes())
        return h.hexdigest()[:16]

    def model(self) -> TinyCausalLM:
        return TinyCausalLM(self.config, self.params)

    def params_tensor(self) -> torch.Tensor:
        return torch.tensor(self.params, dtype=DTYPE)

    def adam_state(self) -> AdamState:
        if self.adam_m is None:
            return AdamState.zeros(self.params.size)
        return AdamState(torch.tensor(self.adam_m), torch.tensor(self.adam_v), self.adam_step)


def snapshot(model: TinyCausalLM, state: AdamState | None = None) -> ParameterSnapshot:
    if state is None:
        return ParameterSnapshot(model.config, model.params.numpy())
    return ParameterSnapshot(model.config, model.params.numpy(), state.m.numpy(), state.v.numpy(), state.step)


def restore(snap: ParameterSnapshot) -> tuple[TinyCausalLM, AdamState]:
    return snap.model(), snap.adam_state()


def save_checkpoint(snap: ParameterSnapshot, path) -> None:
    tensors, payload, offset = [], [], 0
    arrays = [("params", snap.params)]
    if snap.adam_m is not None:
        arrays += [("adam_m", snap.adam_m), ("adam_v", snap.adam_v)]
    for name, arr in arrays:
        tensors.append({"name": name, "offset": offset, "count": int(arr.size)})
        payload.append(arr.astype("<f8").tobytes())
        offset += arr.size * 8
    header = {
        "version": CKPT_VERSION,
        "config": asdict(snap.config),
        "param_order": [[n, list(s)] for n, s in param_layout(snap.config)],
        "tensors": tensors,
        "adam_step": snap.adam_step,
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> ParameterSnapshot:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise IncompatibleSnapshotError(f"{path}: not an IGF checkpoint")
    end = data.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(data[len(CKPT_MAGIC) : end])
    if header.get("version") != CKPT_VERSION:
        raise IncompatibleSnapshotError(f"{path}: checkpoint version {header.get('version')} != {CKPT_VERSION}")
    cfg = ModelConfig(**header["config"])
    if [[n, list(s)] for n, s in param_layout(cfg)] != header["param_order"]:
        raise IncompatibleSnapshotError(f"{path}: parameter order does not match this build")
    body = data[end + 1 :]
    arrays = {}
    for t in header["tensors"]:
        arrays[t["name"]] = np.frombuffer(body, dtype="<f8", count=t["count"], offset=t["offset"])
    return ParameterSnapshot(cfg, arrays["params"], arrays.get("adam_m"), arrays.get("adam_v"), header["adam_step"])


def pretrain(
    config: ModelConfig,
    corpus: Corpus | ContextSampler,
    steps: int,
    optimizer_config: OptimizerConfig,
    rng_seed=0,
    batch_size: int = 16,
    heldout: Sequence[Context] | None = None,
    log_every: int = 200,
) -> torch.Tensor:
    """Train from initialization for ``steps`` Adam steps on windows of ``corpus``."""
    model = TinyCausalLM(config)
    state = AdamState.zeros(model.n_params)
    sampler = corpus if isinstance(corpus, ContextSampler) else ContextSampler([corpus], None, config.context_length)
    rng = np.random.default_rng(rng_seed)
    if heldout is None and steps and isinstance(corpus, Corpus):
        heldout = sample_contexts(corpus, 32, config.context_length, rng_seed=np.random.SeedSequence(rng_seed).spawn(1)[0])
    start_loss = model.loss_bits(heldout) if heldout and steps else None
    for step in range(steps):
        batch = sampler.draw(rng, batch_size)
        loss, grad = model.backward(batch)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"pretraining loss became {loss} at step {step}")
        model.params, state = adam_step(model.params, state, grad, optimizer_config)
        if log_every and (step + 1) % log_every == 0:
            logger.info("pretrain step %d/%d loss %.4f bits", step + 1, steps, loss)
    if start_loss is not None:
        logger.info("pretrain held-out loss %.4f -> %.4f bits", start_loss, model.loss_bits(heldout))
    return model.params
