"""Standard two-layer attention-only transformer on a token-level ICL task.

One head per layer, no MLP, no layer norm, no biases, no weight tying.
Activations are row-major (B, L, D):

    H0 = T[:, tokens]^T + P[:, positions]^T
    H_l = H_{l-1} + softmax_causal(Q K^T) V W_O^T,   Q = H W_Q^T, K = H W_K^T, V = H W_V^T
    logits = H2 W_out^T

Cross-entropy is taken at the final (query) position only. Gradients are
hand-written; AdamW is implemented here as well.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_math import MaskMode, masked_softmax, softmax_backward
from .seeding import derive_seed, rng

SEQ_PAIRS = 8
SEQ_LEN = 2 * SEQ_PAIRS + 1
LAYER_KEYS = ("W_Q", "W_K", "W_V", "W_O")
CKPT_MAGIC = b"INDLSTDM"
CKPT_VERSION = 1


@dataclass
class StdModel:
    params: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.params["T"].shape[0]

    @property
    def vocab(self) -> int:
        return self.params["T"].shape[1]

    @property
    def block(self) -> int:
        return self.params["P"].shape[1]

    @property
    def head_dim(self) -> int:
        return self.params["W_Q1"].shape[0]

    @classmethod
    def init(cls, dim: int, head_dim: int, vocab: int, block: int, seed: int, std: float = 0.02) -> "StdModel":
        g = rng(seed, 7)
        shapes = {"T": (dim, vocab), "P": (dim, block)}
        for l in (1, 2):
            shapes[f"W_Q{l}"] = (head_dim, dim)
            shapes[f"W_K{l}"] = (head_dim, dim)
            shapes[f"W_V{l}"] = (head_dim, dim)
            shapes[f"W_O{l}"] = (dim, head_dim)
        shapes["W_out"] = (vocab, dim)
        return cls({k: g.standard_normal(s) * std for k, s in shapes.items()})

    def copy(self) -> "StdModel":
        return StdModel({k: v.copy() for k, v in self.params.items()})

    def save(self, path: str | Path) -> Path:
        """Versioned checkpoint: magic, u32 version, u32 count, then per tensor
        (u32 name length, name, u32 rows, u32 cols, row-major f64)."""
        path = Path(path)
        with path.open("wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<2I", CKPT_VERSION, len(self.params)))
            for name in sorted(self.params):
                arr = self.params[name]
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<2I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "StdModel":
        raw = Path(path).read_bytes()
        if raw[:8] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, count = struct.unpack_from("<2I", raw, 8)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        pos, params = 16, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + n].decode()
            r, c = struct.unpack_from("<2I", raw, pos + 4 + n)
            pos += 12 + n
            params[name] = np.frombuffer(raw, dtype="<f8", count=r * c, offset=pos).reshape(r, c).copy()
            pos += 8 * r * c
        return cls(params)


@dataclass
class TokenTaskBatch:
    tokens: np.ndarray  # (B, 17)
    positions: np.ndarray  # (B, 17)
    targets: np.ndarray  # (B,)
    queries: np.ndarray  # (B,) pair index 0..7 that the last token repeats
    offsets: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def gen_token_batch(vocab: int, block: int, batch: int, seed: int) -> TokenTaskBatch:
    """16 distinct tokens -> 8 item-label pairs, then one repeated item.

    The 17-token sequence sits at a uniformly random offset inside the block.
    """
    if vocab < 2 * SEQ_PAIRS:
        raise ValueError(f"vocabulary of {vocab} tokens cannot hold {2 * SEQ_PAIRS} distinct tokens")
    if block < SEQ_LEN:
        raise ValueError(f"block size {block} shorter than sequence length {SEQ_LEN}")
    g = rng(seed, 3)
    chosen = np.argsort(g.random((batch, vocab)), axis=1)[:, : 2 * SEQ_PAIRS]
    queries = g.integers(0, SEQ_PAIRS, size=batch)
    offsets = g.integers(0, block - SEQ_LEN + 1, size=batch)
    rows = np.arange(batch)
    tokens = np.concatenate([chosen, chosen[rows, 2 * queries][:, None]], axis=1)
    targets = chosen[rows, 2 * queries + 1]
    positions = offsets[:, None] + np.arange(SEQ_LEN)[None, :]
    return TokenTaskBatch(tokens, positions, targets, queries, offsets)


@dataclass
class StdCache:
    h: list[np.ndarray]  # H0, H1, H2
    layers: list[dict]
    logits: np.ndarray  # (B, L, N_T)


def _attn_forward(h: np.ndarray, p: dict[str, np.ndarray], l: int, scale: float) -> tuple[np.ndarray, dict]:
    q = h @ p[f"W_Q{l}"].T
    k = h @ p[f"W_K{l}"].T
    v = h @ p[f"W_V{l}"].T
    scores = scale * (q @ np.swapaxes(k, 1, 2))  # [b, query, key]
    a = masked_softmax(scores, MaskMode.INCLUSIVE)
    o = a @ v
    return h + o @ p[f"W_O{l}"].T, {"q": q, "k": k, "v": v, "a": a, "o": o}


def std_forward(batch: TokenTaskBatch, model: StdModel, *, score_scale: float = 1.0) -> StdCache:
    p = model.params
    if batch.tokens.max() >= model.vocab or batch.positions.max() >= model.block:
        raise ValueError("token or position index outside the model's embedding tables")
    h0 = p["T"].T[batch.tokens] + p["P"].T[batch.positions]
    hs, layers = [h0], []
    for l in (1, 2):
        h, c = _attn_forward(hs[-1], p, l, score_scale)
        hs.append(h)
        layers.append(c)
    logits = hs[-1] @ p["W_out"].T
    return StdCache(hs, layers, logits)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(cache: StdCache, targets: np.ndarray) -> float:
    lp = _log_softmax(cache.logits[:, -1, :])
    return float(-lp[np.arange(len(targets)), targets].mean())


def accuracy(cache: StdCache, targets: np.ndarray) -> float:
    return float(np.mean(cache.logits[:, -1, :].argmax(axis=-1) == targets))


def std_backward(
    batch: TokenTaskBatch, model: StdModel, cache: StdCache, *, score_scale: float = 1.0
) -> dict[str, np.ndarray]:
    """Gradient of the mean final-position cross-entropy."""
    p = model.params
    b = len(batch)
    probs = np.exp(_log_softmax(cache.logits[:, -1, :]))
    probs[np.arange(b), batch.targets] -= 1.0
    dlogit = probs / b  # (B, N_T)
    grads = {"W_out": dlogit.T @ cache.h[2][:, -1, :]}
    dh = np.zeros_like(cache.h[2])
    dh[:, -1, :] = dlogit @ p["W_out"]
    for l in (2, 1):
        c = cache.layers[l - 1]
        h_in = cache.h[l - 1]
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        grads[f"W_O{l}"] = flat(dh).T @ flat(c["o"])
        do = dh @ p[f"W_O{l}"]
        da = do @ np.swapaxes(c["v"], 1, 2)
        dv = np.swapaxes(c["a"], 1, 2) @ do
        ds = score_scale * softmax_backward(c["a"], da)
        dq = ds @ c["k"]
        dk = np.swapaxes(ds, 1, 2) @ c["q"]
        grads[f"W_Q{l}"] = flat(dq).T @ flat(h_in)
        grads[f"W_K{l}"] = flat(dk).T @ flat(h_in)
        grads[f"W_V{l}"] = flat(dv).T @ flat(h_in)
        dh = dh + dq @ p[f"W_Q{l}"] + dk @ p[f"W_K{l}"] + dv @ p[f"W_V{l}"]
    d_t = np.zeros_like(p["T"])
    d_p = np.zeros_like(p["P"])
    np.add.at(d_t.T, batch.tokens.ravel(), dh.reshape(-1, dh.shape[-1]))
    np.add.at(d_p.T, batch.positions.ravel(), dh.reshape(-1, dh.shape[-1]))
    grads["T"] = d_t
    grads["P"] = d_p
    return grads


class AdamW:
    """Adam with decoupled weight decay, applied as ``p *= 1 - lr * wd``."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                params[k] *= 1.0 - self.lr * self.weight_decay
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class StdTrainConfig:
    dim: int = 128
    head_dim: int = 128
    vocab: int = 32
    block: int = 32
    batch: int = 512
    steps: int = 300
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    init_std: float = 0.02
    score_scale: float = 1.0
    seed: int = 0
    eval_batch: int = 2048

    def to_json(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class StdTrainResult:
    model: StdModel
    losses: list[float] = field(default_factory=list)
    accuracy: float = 0.0
    eval_loss: float = 0.0


class StdDiverged(RuntimeError):
    pass


def std_train(config: StdTrainConfig) -> StdTrainResult:
    """AdamW on fresh batches; accuracy measured on an independent batch."""
    model = StdModel.init(config.dim, config.head_dim, config.vocab, config.block, config.seed, config.init_std)
    opt = AdamW(model.params, config.lr, config.betas, config.eps, config.weight_decay)
    losses = []
    for step in range(config.steps):
        batch = gen_token_batch(config.vocab, config.block, config.batch, derive_seed(config.seed, step))
        cache = std_forward(batch, model, score_scale=config.score_scale)
        loss = cross_entropy(cache, batch.targets)
        if not np.isfinite(loss) or loss > 1e6:
            raise StdDiverged(f"loss {loss} at step {step}")
        losses.append(loss)
        grads = std_backward(batch, model, cache, score_scale=config.score_scale)
        opt.step(model.params, grads)
    ev = gen_token_batch(config.vocab, config.block, config.eval_batch, derive_seed(config.seed, 1 << 40))
    cache = std_forward(ev, model, score_scale=config.score_scale)
    return StdTrainResult(model, losses, accuracy(cache, ev.targets), cross_entropy(cache, ev.targets))


@dataclass
class InterpretabilityReport:
    blocks: dict[str, np.ndarray]
    prev_token: np.ndarray  # layer-1 position block, rows = attending position
    dominance: float
    off_std: float

    @property
    def margin(self) -> float:
        return self.dominance / self.off_std if self.off_std > 0 else float("inf") if self.dominance > 0 else 0.0

    def summary(self) -> dict:
        return {
            "subdiagonal_dominance": self.dominance,
            "off_subdiagonal_std": self.off_std,
            "margin_in_std": self.margin,
            "blocks": {k: list(v.shape) for k, v in self.blocks.items()},
        }


def subdiagonal_stats(m: np.ndarray) -> tuple[float, float]:
    """(mean subdiagonal - mean of the rest, std of the rest)."""
    sub = np.eye(m.shape[0], k=-1, dtype=bool)
    rest = m[~sub]
    return float(m[sub].mean() - rest.mean()), float(rest.std())


def interpret(model: StdModel) -> InterpretabilityReport:
    """Key-query and output maps expressed in token/position coordinates.

    ``E = [T | P]`` indexes the embedding subspace and ``R1 = W_O1 W_V1 E``
    the subspace written by the first head. Key-query maps are
    ``A^T W_K^T W_Q B`` (rows index the key direction, columns the query
    direction), each (N_T + N_P) square. Output maps are ``W_out`` applied
    to E, R1, the second head's copy of E, and its copy of R1.
    """
    p = model.params
    nt = model.vocab
    e = np.concatenate([p["T"], p["P"]], axis=1)
    r1 = p["W_O1"] @ p["W_V1"] @ e
    ov2 = p["W_O2"] @ p["W_V2"]
    kq1 = (p["W_K1"] @ e).T @ (p["W_Q1"] @ e)
    k2 = {"E": p["W_K2"] @ e, "R1": p["W_K2"] @ r1}
    q2 = {"E": p["W_Q2"] @ e, "R1": p["W_Q2"] @ r1}
    blocks = {"kq1": kq1}
    for a in ("E", "R1"):
        for b in ("E", "R1"):
            blocks[f"kq2_{a}_{b}"] = k2[a].T @ q2[b]
    for name, space in (("E", e), ("R1", r1), ("R2_E", ov2 @ e), ("R2_R1", ov2 @ r1)):
        blocks[f"out_{name}"] = p["W_out"] @ space
    # P^T W_K1^T W_Q1 P, transposed so row j is the attending position
    prev = kq1[nt:, nt:].T
    dom, std = subdiagonal_stats(prev)
    return InterpretabilityReport(blocks, prev, dom, std)
