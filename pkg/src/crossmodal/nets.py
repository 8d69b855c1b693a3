"""Minimal feed-forward embedding networks with hand-written backprop.

Two architectures share one interface:

* ``bag``      sparse or dense input -> linear [-> relu -> linear] -> embedding
* ``sequence`` token lookup table -> fixed-window convolution over word
  vectors -> average over positions -> relu -> linear -> embedding

Everything runs in float64; gradients are exact, which the finite-difference
test suite relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import PretrainedEmbeddings
from .errors import NonFiniteGradientError
from .text import SparseVector, TokenSequence, Vocabulary


@dataclass
class NetSpec:
    kind: str  # "bag" | "sequence"
    input_dim: int
    n_emb: int
    n_hu: int = 0
    word_dim: int = 0  # sequence only; per-token embedding width
    kernel_count: int = 0  # sequence only; convolution output width
    window: int = 0  # sequence only; tokens per convolution position

    def __post_init__(self) -> None:
        if self.kind not in ("bag", "sequence"):
            raise ValueError(f"unknown net kind {self.kind!r}")
        if self.input_dim < 1 or self.n_emb < 1:
            raise ValueError("input_dim and n_emb must be positive")
        if self.n_hu < 0:
            raise ValueError("n_hu must be nonnegative")
        if self.kind == "sequence" and min(self.word_dim, self.kernel_count, self.window) < 1:
            raise ValueError("sequence nets need word_dim, kernel_count and window >= 1")


@dataclass
class Net:
    spec: NetSpec
    params: dict[str, np.ndarray]


@dataclass
class Tape:
    """Activations recorded by one forward pass; consumed by one backward."""

    net: Net
    data: dict[str, object] = field(default_factory=dict)
    used: bool = False


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_net(
    spec: NetSpec,
    seed: int,
    pretrained: PretrainedEmbeddings | None = None,
    vocab: Vocabulary | None = None,
) -> Net:
    """Initialize weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.

    With ``pretrained`` given, every vocabulary term found in the embedding
    table overwrites its first-layer row (bag) or lookup row (sequence);
    the embedding width must match that row width.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    if spec.kind == "bag":
        first_out = spec.n_hu if spec.n_hu > 0 else spec.n_emb
        params["w0"] = _glorot(rng, spec.input_dim, first_out)
        params["b0"] = np.zeros(first_out)
        if spec.n_hu > 0:
            params["w1"] = _glorot(rng, spec.n_hu, spec.n_emb)
            params["b1"] = np.zeros(spec.n_emb)
        row_width = first_out
        row_key = "w0"
    else:
        params["lookup"] = _glorot(rng, spec.input_dim, spec.word_dim)
        params["conv_w"] = _glorot(rng, spec.window * spec.word_dim, spec.kernel_count)
        params["conv_b"] = np.zeros(spec.kernel_count)
        params["out_w"] = _glorot(rng, spec.kernel_count, spec.n_emb)
        params["out_b"] = np.zeros(spec.n_emb)
        row_width = spec.word_dim
        row_key = "lookup"
    if pretrained is not None:
        if pretrained.dim != row_width:
            raise ValueError(
                f"pretrained embeddings have dim {pretrained.dim}, first layer rows are {row_width}"
            )
        if vocab is None:
            raise ValueError("pretrained initialization needs the vocabulary for row lookup")
        for term, index in vocab.term_to_index.items():
            vec = pretrained.vectors.get(term)
            if vec is not None and index < spec.input_dim:
                params[row_key][index, :] = vec
    return Net(spec=spec, params=params)


def forward(net: Net, x: SparseVector | np.ndarray | TokenSequence) -> tuple[np.ndarray, Tape]:
    """Embed one input, recording the activations needed for backward."""
    spec = net.spec
    p = net.params
    tape = Tape(net=net)
    if spec.kind == "bag":
        if isinstance(x, TokenSequence):
            raise TypeError("bag nets take sparse or dense vectors, not token sequences")
        if isinstance(x, SparseVector):
            h0 = p["b0"].copy()
            if len(x):
                h0 += x.values @ p["w0"][x.indices]
        else:
            dense = np.asarray(x, dtype=np.float64)
            if dense.shape != (spec.input_dim,):
                raise ValueError(f"dense input shape {dense.shape} != ({spec.input_dim},)")
            h0 = dense @ p["w0"] + p["b0"]
            x = dense
        tape.data["input"] = x
        tape.data["h0"] = h0
        if spec.n_hu > 0:
            a = relu(h0)
            tape.data["a"] = a
            return a @ p["w1"] + p["b1"], tape
        return h0, tape
    if not isinstance(x, TokenSequence):
        raise TypeError("sequence nets take TokenSequence inputs")
    if len(x) == 0:
        raise ValueError("empty token sequence")
    emb_rows = p["lookup"][x.indices]  # (T, M)
    t_len, m = emb_rows.shape
    width = spec.window * m
    if t_len < spec.window:
        windows = np.zeros((1, width))
        windows[0, : t_len * m] = emb_rows.reshape(-1)
    else:
        n_pos = t_len - spec.window + 1
        windows = np.empty((n_pos, width))
        for pos in range(n_pos):
            windows[pos] = emb_rows[pos : pos + spec.window].reshape(-1)
    z = windows @ p["conv_w"] + p["conv_b"]  # (P, K)
    avg = z.mean(axis=0)
    r = relu(avg)
    tape.data["tokens"] = x.indices
    tape.data["windows"] = windows
    tape.data["avg"] = avg
    tape.data["r"] = r
    return r @ p["out_w"] + p["out_b"], tape


def backward(tape: Tape, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Exact gradients of embedding . grad_out w.r.t. all parameters.

    Returns the per-parameter gradients and, where the input is continuous,
    the gradient w.r.t. the input (dense vectors and sparse values; None for
    token sequences). The relu subgradient at 0 is taken as 0.
    """
    if tape.used:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.used = True
    net = tape.net
    spec = net.spec
    p = net.params
    g = np.asarray(grad_out, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    if spec.kind == "bag":
        if spec.n_hu > 0:
            a = tape.data["a"]
            grads["w1"] = np.outer(a, g)
            grads["b1"] = g.copy()
            dh0 = (p["w1"] @ g) * (tape.data["h0"] > 0)
        else:
            dh0 = g.copy()
        grads["b0"] = dh0
        x = tape.data["input"]
        grads["w0"] = np.zeros_like(p["w0"])
        if isinstance(x, SparseVector):
            if len(x):
                np.add.at(grads["w0"], x.indices, np.outer(x.values, dh0))
                grad_in = p["w0"][x.indices] @ dh0
            else:
                grad_in = np.empty(0)
        else:
            grads["w0"] += np.outer(x, dh0)
            grad_in = p["w0"] @ dh0
        return grads, grad_in
    windows = tape.data["windows"]
    n_pos = windows.shape[0]
    grads["out_w"] = np.outer(tape.data["r"], g)
    grads["out_b"] = g.copy()
    dr = p["out_w"] @ g
    davg = dr * (tape.data["avg"] > 0)
    # every position's conv output enters the average with weight 1/P
    dz = np.tile(davg / n_pos, (n_pos, 1))
    grads["conv_w"] = windows.T @ dz
    grads["conv_b"] = davg.copy()
    dwindows = dz @ p["conv_w"].T  # (P, window*M)
    tokens = tape.data["tokens"]
    m = spec.word_dim
    grads["lookup"] = np.zeros_like(p["lookup"])
    t_len = len(tokens)
    if t_len < spec.window:
        drows = dwindows[0, : t_len * m].reshape(t_len, m)
        np.add.at(grads["lookup"], tokens, drows)
    else:
        for pos in range(n_pos):
            drows = dwindows[pos].reshape(spec.window, m)
            np.add.at(grads["lookup"], tokens[pos : pos + spec.window], drows)
    return grads, None


def sgd_step(net: Net, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place p <- p - lr * g; refuses non-finite gradients."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, grad in grads.items():
        if name not in net.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if net.params[name].shape != grad.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
    for name, grad in grads.items():
        net.params[name] -= lr * grad


def lr_schedule(lr0: float, epoch: int) -> float:
    """Linear decay from lr0 to 0.01 * lr0 over 100 epochs, then constant."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return lr0 * (1.0 - 0.99 * min(epoch, 100) / 100.0)


def accumulate(total: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Sum gradient dicts, used when shared weights see several branches."""
    for name, grad in grads.items():
        if name in total:
            total[name] = total[name] + grad
        else:
            total[name] = grad
    return total


def clone_net(net: Net) -> Net:
    return Net(spec=net.spec, params={k: v.copy() for k, v in net.params.items()})
