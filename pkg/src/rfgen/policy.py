"""Autoregressive GRU token policy.

Two forward implementations share the same math: a plain-numpy path used
for sampling and likelihood scoring (no gradients, fast), and a taped
path used during training. A consistency test pins them together.

Episode randomness is keyed by (run seed, episode index) through a
counter-based generator, so a batch of samples is identical whether the
episodes are drawn together or one at a time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .smiles import Vocabulary

__all__ = [
    "PolicyConfig",
    "PolicyParams",
    "Episode",
    "ForwardPack",
    "init_policy",
    "sample_batch",
    "log_likelihood",
    "log_likelihood_batch",
    "step_distributions",
    "step_log_distributions_batch",
    "training_forward",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"RFG1"


@dataclass
class PolicyConfig:
    vocab: Vocabulary
    embedding_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 1
    max_len: int = 100
    mlp_hidden: int = 0  # 0 = single linear output head

    def __post_init__(self):
        if min(self.embedding_dim, self.hidden_dim, self.num_layers) < 1:
            raise ValueError("policy dims must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.mlp_hidden < 0:
            raise ValueError("mlp_hidden must be >= 0")


class PolicyParams:
    """Named parameter tensors in a fixed, documented order.

    Order (also the checkpoint layout): embedding; then per GRU layer
    w_x, w_h, b_x, b_h; then the optional MLP head w/b; then the output
    projection w/b. Gate blocks within the 3H axis are [update|reset|
    candidate].
    """

    def __init__(self, config: PolicyConfig, tensors: Dict[str, nc.Tensor]):
        self.config = config
        self.tensors = tensors

    @staticmethod
    def param_names(config: PolicyConfig) -> List[str]:
        names = ["embedding"]
        for layer in range(config.num_layers):
            names += [f"gru{layer}.w_x", f"gru{layer}.w_h", f"gru{layer}.b_x", f"gru{layer}.b_h"]
        if config.mlp_hidden:
            names += ["mlp.w", "mlp.b"]
        names += ["out.w", "out.b"]
        return names

    @staticmethod
    def param_shapes(config: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
        V = len(config.vocab)
        E, H, M = config.embedding_dim, config.hidden_dim, config.mlp_hidden
        shapes: Dict[str, Tuple[int, ...]] = {"embedding": (V, E)}
        for layer in range(config.num_layers):
            in_dim = E if layer == 0 else H
            shapes[f"gru{layer}.w_x"] = (in_dim, 3 * H)
            shapes[f"gru{layer}.w_h"] = (H, 3 * H)
            shapes[f"gru{layer}.b_x"] = (3 * H,)
            shapes[f"gru{layer}.b_h"] = (3 * H,)
        head_in = H
        if M:
            shapes["mlp.w"] = (H, M)
            shapes["mlp.b"] = (M,)
            head_in = M
        shapes["out.w"] = (head_in, V)
        shapes["out.b"] = (V,)
        return shapes

    @property
    def ordered(self) -> List[nc.Tensor]:
        return [self.tensors[n] for n in self.param_names(self.config)]

    def num_params(self) -> int:
        return int(np.sum([t.size for t in self.tensors.values()]))

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.config,
            {n: nc.Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
        )

    def raw(self) -> Dict[str, np.ndarray]:
        """Plain ndarray view for the no-grad forward paths."""
        return {n: t.data for n, t in self.tensors.items()}


def init_policy(config: PolicyConfig, seed: int) -> PolicyParams:
    """Uniform[-k, k] init with k = 1/sqrt(hidden_dim), deterministic per seed."""
    rng = np.random.default_rng(seed)
    k = 1.0 / np.sqrt(config.hidden_dim)
    tensors: Dict[str, nc.Tensor] = {}
    for name in PolicyParams.param_names(config):
        shape = PolicyParams.param_shapes(config)[name]
        tensors[name] = nc.parameter(rng.uniform(-k, k, size=shape))
    return PolicyParams(config, tensors)


# ---------------------------------------------------------------------------
# Episodes

@dataclass
class Episode:
    """One sampled token sequence.

    tokens runs GO..EOS (or stops at max_len generated tokens); logps holds
    the agent log-prob of each generated token, so len(logps) ==
    len(tokens) - 1. reward/prior_ll are filled in by the scoring loop.
    """

    tokens: List[int]
    logps: np.ndarray
    reward: float = 0.0
    prior_ll: Optional[float] = None
    text: Optional[str] = None

    @property
    def agent_ll(self) -> float:
        return float(self.logps.sum())


# ---------------------------------------------------------------------------
# numpy forward path (sampling / scoring)

def _np_log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def _np_step(
    raw: Dict[str, np.ndarray],
    config: PolicyConfig,
    token_ids: np.ndarray,
    hidden: List[np.ndarray],
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """One GRU step for a batch of token ids; returns (logits, new hidden)."""
    H = config.hidden_dim
    x = raw["embedding"][token_ids]
    new_hidden = []
    for layer in range(config.num_layers):
        h = hidden[layer]
        pre_x = x @ raw[f"gru{layer}.w_x"] + raw[f"gru{layer}.b_x"]
        pre_h = h @ raw[f"gru{layer}.w_h"] + raw[f"gru{layer}.b_h"]
        z = _np_sigmoid(pre_x[:, :H] + pre_h[:, :H])
        r = _np_sigmoid(pre_x[:, H : 2 * H] + pre_h[:, H : 2 * H])
        n = np.tanh(pre_x[:, 2 * H :] + r * pre_h[:, 2 * H :])
        h = (1.0 - z) * n + z * h
        new_hidden.append(h)
        x = h
    if config.mlp_hidden:
        x = np.tanh(x @ raw["mlp.w"] + raw["mlp.b"])
    logits = x @ raw["out.w"] + raw["out.b"]
    return logits, new_hidden


_U64 = np.uint64


def _episode_uniforms(seed: int, index: int, count: int) -> np.ndarray:
    """Uniforms for one episode, keyed by (seed, index) only."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF], dtype=_U64)
    return np.random.Generator(np.random.Philox(key=key)).random(count)


def sample_batch(
    params: PolicyParams,
    n: int,
    seed: int,
    start_index: int = 0,
    greedy: bool = False,
) -> List[Episode]:
    """Sample n episodes token-by-token from the policy.

    Episode i draws its randomness from substream (seed, start_index + i),
    so results do not depend on how episodes are batched. greedy=True
    takes the argmax at every step instead (temperature 0).
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    config = params.config
    raw = params.raw()
    V = len(config.vocab)
    GO, EOS = Vocabulary.GO, Vocabulary.EOS
    hidden = [np.zeros((n, config.hidden_dim)) for _ in range(config.num_layers)]
    cur = np.full(n, GO, dtype=np.intp)
    if not greedy:
        us = np.stack(
            [_episode_uniforms(seed, start_index + i, config.max_len) for i in range(n)]
        )
    toks: List[List[int]] = [[GO] for _ in range(n)]
    lps: List[List[float]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    for t in range(config.max_len):
        logits, hidden = _np_step(raw, config, cur, hidden)
        logp = _np_log_softmax(logits)
        if greedy:
            nxt = logp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(logp), axis=1)
            nxt = (cdf < us[:, t][:, None]).sum(axis=1)
            np.minimum(nxt, V - 1, out=nxt)
        for i in np.nonzero(alive)[0]:
            toks[i].append(int(nxt[i]))
            lps[i].append(float(logp[i, nxt[i]]))
        alive &= nxt != EOS
        if not alive.any():
            break
        cur = nxt
    return [
        Episode(tokens=toks[i], logps=np.array(lps[i], dtype=np.float64))
        for i in range(n)
    ]


def _pad_batch(
    token_seqs: Sequence[Sequence[int]], pad_id: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to (B, L); returns (tokens, targets_mask as float, lengths)."""
    B = len(token_seqs)
    lengths = np.array([len(s) for s in token_seqs], dtype=np.intp)
    L = int(lengths.max())
    padded = np.full((B, L), pad_id, dtype=np.intp)
    for i, s in enumerate(token_seqs):
        padded[i, : len(s)] = s
    steps = np.arange(L - 1)
    # step t predicts position t+1; the final (EOS or cutoff) token is scored
    mask = (steps[None, :] + 1 < lengths[:, None]).astype(np.float64)
    return padded, mask, lengths


def log_likelihood_batch(params: PolicyParams, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Sum of log pi(a_t | s_t) per sequence (GO consumed, EOS scored)."""
    if not token_seqs:
        return np.zeros(0)
    config = params.config
    V = len(config.vocab)
    for s in token_seqs:
        if len(s) < 2:
            raise ValueError("sequences must hold at least GO plus one token")
        if max(s) >= V or min(s) < 0:
            raise ValueError(f"token id out of range for vocabulary of size {V}")
    raw = params.raw()
    padded, mask, _ = _pad_batch(token_seqs, Vocabulary.EOS)
    B, L = padded.shape
    hidden = [np.zeros((B, config.hidden_dim)) for _ in range(config.num_layers)]
    total = np.zeros(B)
    for t in range(L - 1):
        logits, hidden = _np_step(raw, config, padded[:, t], hidden)
        logp = _np_log_softmax(logits)
        total += logp[np.arange(B), padded[:, t + 1]] * mask[:, t]
    return total


def log_likelihood(params: PolicyParams, tokens: Sequence[int]) -> float:
    return float(log_likelihood_batch(params, [list(tokens)])[0])


def step_distributions(params: PolicyParams, tokens: Sequence[int]) -> np.ndarray:
    """Per-step action distributions (softmax rows) while consuming `tokens`.

    Row t is the distribution over the token at position t+1; shape is
    (len(tokens) - 1, vocab).
    """
    logs = step_log_distributions_batch(params, [list(tokens)])[0]
    return np.exp(logs)


def step_log_distributions_batch(
    params: PolicyParams, token_seqs: Sequence[Sequence[int]]
) -> List[np.ndarray]:
    """Log softmax rows per sequence; list of (len_i - 1, V) arrays."""
    if not token_seqs:
        return []
    config = params.config
    V = len(config.vocab)
    for s in token_seqs:
        if max(s) >= V or min(s) < 0:
            raise ValueError(f"token id out of range for vocabulary of size {V}")
    raw = params.raw()
    padded, _, lengths = _pad_batch(token_seqs, Vocabulary.EOS)
    B, L = padded.shape
    hidden = [np.zeros((B, config.hidden_dim)) for _ in range(config.num_layers)]
    rows = np.empty((B, L - 1, V))
    for t in range(L - 1):
        logits, hidden = _np_step(raw, config, padded[:, t], hidden)
        rows[:, t, :] = _np_log_softmax(logits)
    return [rows[i, : lengths[i] - 1, :] for i in range(B)]


# ---------------------------------------------------------------------------
# taped forward path (training)

@dataclass
class ForwardPack:
    """Taped per-step log-softmax rows plus the realized targets and mask."""

    step_logps: List[nc.Tensor]  # T tensors of shape (B, V)
    targets: np.ndarray  # (B, T) intp
    mask: np.ndarray  # (B, T) float64


def training_forward(params: PolicyParams, token_seqs: Sequence[Sequence[int]]) -> ForwardPack:
    """Forward pass recording onto the active tape; feeds the loss builders."""
    config = params.config
    H = config.hidden_dim
    padded, mask, _ = _pad_batch(token_seqs, Vocabulary.EOS)
    B, L = padded.shape
    hidden = [nc.constant(np.zeros((B, H))) for _ in range(config.num_layers)]
    ten = params.tensors
    step_logps: List[nc.Tensor] = []
    for t in range(L - 1):
        x = nc.gather_rows(ten["embedding"], padded[:, t])
        for layer in range(config.num_layers):
            h = hidden[layer]
            pre_x = nc.add(nc.matmul(x, ten[f"gru{layer}.w_x"]), ten[f"gru{layer}.b_x"])
            pre_h = nc.add(nc.matmul(h, ten[f"gru{layer}.w_h"]), ten[f"gru{layer}.b_h"])
            z = nc.sigmoid(nc.add(nc.slice_cols(pre_x, 0, H), nc.slice_cols(pre_h, 0, H)))
            r = nc.sigmoid(
                nc.add(nc.slice_cols(pre_x, H, 2 * H), nc.slice_cols(pre_h, H, 2 * H))
            )
            n = nc.tanh(
                nc.add(
                    nc.slice_cols(pre_x, 2 * H, 3 * H),
                    nc.mul(r, nc.slice_cols(pre_h, 2 * H, 3 * H)),
                )
            )
            h = nc.add(nc.mul(nc.sub(1.0, z), n), nc.mul(z, h))
            hidden[layer] = h
            x = h
        if config.mlp_hidden:
            x = nc.tanh(nc.add(nc.matmul(x, ten["mlp.w"]), ten["mlp.b"]))
        logits = nc.add(nc.matmul(x, ten["out.w"]), ten["out.b"])
        step_logps.append(nc.log_softmax(logits))
    return ForwardPack(step_logps=step_logps, targets=padded[:, 1:], mask=mask)


# ---------------------------------------------------------------------------
# pretraining

def pretrain(
    params: PolicyParams,
    corpus: Sequence[str],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int = 0,
) -> Tuple[PolicyParams, List[float], int]:
    """Next-token cross-entropy training with Adam; params update in place.

    Returns (params, per-epoch mean CE per token, skipped line count).
    Lines whose tokens are not in the vocabulary are skipped.
    """
    from .smiles import normal_form, tokenize

    if not corpus:
        raise ValueError("pretrain: empty corpus")
    vocab = params.config.vocab
    encoded: List[List[int]] = []
    skipped = 0
    for line in corpus:
        toks = tokenize(normal_form(line))
        if not toks or any(t not in vocab for t in toks):
            skipped += 1
            continue
        body = vocab.encode(toks)
        if len(body) + 1 > params.config.max_len:
            skipped += 1
            continue
        encoded.append([Vocabulary.GO] + body + [Vocabulary.EOS])
    if not encoded:
        raise ValueError("pretrain: no tokenizable lines in corpus")

    rng = np.random.default_rng(seed)
    opt = nc.AdamState(params.ordered, lr=lr)
    curve: List[float] = []
    for _epoch in range(epochs):
        perm = rng.permutation(len(encoded))
        total_nll = 0.0
        total_tokens = 0
        for lo in range(0, len(perm), batch_size):
            batch = [encoded[j] for j in perm[lo : lo + batch_size]]
            n_tok = int(np.sum([len(s) - 1 for s in batch]))
            if lr == 0.0:
                # still report the curve without touching the tape
                lls = log_likelihood_batch(params, batch)
                total_nll += float(-lls.sum())
                total_tokens += n_tok
                continue
            with nc.Tape() as tape:
                pack = training_forward(params, batch)
                acc = nc.constant(0.0)
                for t, rows in enumerate(pack.step_logps):
                    picked = nc.take_per_row(rows, pack.targets[:, t])
                    acc = nc.add(acc, nc.sum(nc.mul(picked, pack.mask[:, t])))
                loss = nc.mul(nc.neg(acc), 1.0 / n_tok)
            grads = nc.backward(loss, tape)
            nc.adam_step(params.ordered, grads, opt)
            total_nll += loss.item() * n_tok
            total_tokens += n_tok
        curve.append(total_nll / total_tokens)
    return params, curve, skipped


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: PolicyParams, path) -> None:
    """Binary: magic 'RFG1', six little-endian int32 header fields
    (embedding_dim, hidden_dim, num_layers, vocab_size, max_len,
    mlp_hidden), then parameters as little-endian float64 in the
    documented order. The vocabulary text goes to a '<path>.vocab'
    sidecar."""
    config = params.config
    header = struct.pack(
        "<6i",
        config.embedding_dim,
        config.hidden_dim,
        config.num_layers,
        len(config.vocab),
        config.max_len,
        config.mlp_hidden,
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        for name in PolicyParams.param_names(config):
            fh.write(np.ascontiguousarray(params.tensors[name].data, dtype="<f8").tobytes())
    config.vocab.save(str(path) + ".vocab")


def load_checkpoint(path, expected_config: Optional[PolicyConfig] = None) -> PolicyParams:
    """Inverse of save_checkpoint; load(save(p)) is bitwise identity."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 4 + 24:
        raise ValueError(f"{path}: truncated checkpoint header")
    emb, hid, layers, vocab_size, max_len, mlp_hidden = struct.unpack_from("<6i", blob, 4)
    vocab = Vocabulary.load(str(path) + ".vocab")
    if len(vocab) != vocab_size:
        raise ValueError(
            f"{path}: header vocab_size {vocab_size} != sidecar size {len(vocab)}"
        )
    config = PolicyConfig(
        vocab=vocab,
        embedding_dim=emb,
        hidden_dim=hid,
        num_layers=layers,
        max_len=max_len,
        mlp_hidden=mlp_hidden,
    )
    if expected_config is not None:
        for fname in ("embedding_dim", "hidden_dim", "num_layers", "max_len", "mlp_hidden"):
            if getattr(config, fname) != getattr(expected_config, fname):
                raise ValueError(
                    f"{path}: checkpoint {fname}={getattr(config, fname)} does not match "
                    f"expected {fname}={getattr(expected_config, fname)}"
                )
        if len(expected_config.vocab) != vocab_size:
            raise ValueError(f"{path}: vocab_size mismatch")
    shapes = PolicyParams.param_shapes(config)
    offset = 4 + 24
    tensors: Dict[str, nc.Tensor] = {}
    for name in PolicyParams.param_names(config):
        shape = shapes[name]
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated checkpoint at field {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = nc.parameter(arr.copy())
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after parameters")
    return PolicyParams(config, tensors)
