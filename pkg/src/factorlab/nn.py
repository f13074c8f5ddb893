"""Embedding + gated residual MLP + softmax head, with exact reverse-mode gradients.

Every computation is batched over rows of input tokens and runs in float64.
A block maps ``z`` to ``z + W2^T (sigmoid(W1 z/|z|) * W3 z/|z|)``; the
model's prediction is ``softmax(U^T F(e_x))``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

NORM_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class BlockWeights:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray


@dataclass
class LearnedEmbedding:
    matrix: np.ndarray  # (N, d)

    def lookup(self, xs: np.ndarray) -> np.ndarray:
        return self.matrix[xs]


@dataclass
class FceEmbedding:
    """Frozen factor embeddings ``E_i`` of shape ``(d, p_i)``; ``e_x = sum_i E_i[:, x_i]``."""

    matrices: list[np.ndarray]
    coords: np.ndarray  # (N, k) digits of every input token
    _table: np.ndarray | None = field(default=None, repr=False)

    def stacked(self) -> np.ndarray:
        return np.hstack(self.matrices)

    def table(self) -> np.ndarray:
        if self._table is None:
            d = self.matrices[0].shape[0]
            out = np.zeros((self.coords.shape[0], d))
            for i, e in enumerate(self.matrices):
                out += e.T[self.coords[:, i]]
            self._table = out
        return self._table

    def lookup(self, xs: np.ndarray) -> np.ndarray:
        return self.table()[xs]


@dataclass
class Model:
    embedding: LearnedEmbedding | FceEmbedding
    blocks: list[BlockWeights]
    output: np.ndarray  # U, shape (d, M)
    train_output: bool = True

    @property
    def d(self) -> int:
        return self.output.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.output.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        """Every tensor of the model by name (references, not copies)."""
        out = {}
        if isinstance(self.embedding, LearnedEmbedding):
            out["embedding"] = self.embedding.matrix
        else:
            for i, e in enumerate(self.embedding.matrices):
                out[f"fce.{i}"] = e
        for i, b in enumerate(self.blocks):
            out[f"blocks.{i}.w1"] = b.w1
            out[f"blocks.{i}.w2"] = b.w2
            out[f"blocks.{i}.w3"] = b.w3
        out["output"] = self.output
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        frozen = {"output"} if not self.train_output else set()
        return {
            k: v for k, v in self.tensors().items() if not k.startswith("fce.") and k not in frozen
        }

    def copy(self) -> "Model":
        if isinstance(self.embedding, LearnedEmbedding):
            emb = LearnedEmbedding(self.embedding.matrix.copy())
        else:
            emb = FceEmbedding([e.copy() for e in self.embedding.matrices], self.embedding.coords)
        blocks = [BlockWeights(b.w1.copy(), b.w2.copy(), b.w3.copy()) for b in self.blocks]
        return Model(emb, blocks, self.output.copy(), self.train_output)


@dataclass
class Gradients:
    tensors: dict[str, np.ndarray]

    def __getitem__(self, key):
        return self.tensors[key]

    def norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.tensors.values())))


def init_model(
    n_inputs: int,
    n_outputs: int,
    d: int,
    h: int,
    L: int,
    rng: np.random.Generator,
    embedding_mode: str = "learned",
    factorization=None,
    fce_std: float | None = None,
    train_output: bool = True,
) -> Model:
    """Gaussian embeddings and output matrix; blocks uniform in +-1/sqrt(fan_in).

    Factor embeddings have entries ``N(0, fce_std^2)``, by default ``1/k`` so the
    summed embedding has unit-variance coordinates like a learned one.
    """
    if embedding_mode == "learned":
        emb = LearnedEmbedding(rng.standard_normal((n_inputs, d)))
    elif embedding_mode == "fce":
        if factorization is None:
            raise ValueError("a factorization-compatible embedding needs the factorization")
        if fce_std is None:
            fce_std = 1.0 / np.sqrt(len(factorization.input_shape.sizes))
        mats = [fce_std * rng.standard_normal((d, p)) for p in factorization.input_shape.sizes]
        emb = FceEmbedding(mats, factorization.input_coords())
    else:
        raise ValueError(f"unknown embedding mode {embedding_mode!r}")
    blocks = []
    for _ in range(L):
        bd, bh = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
        blocks.append(BlockWeights(
            rng.uniform(-bd, bd, (h, d)),
            rng.uniform(-bh, bh, (h, d)),
            rng.uniform(-bd, bd, (h, d)),
        ))
    output = rng.standard_normal((d, n_outputs))
    return Model(emb, blocks, output, train_output)


# --- forward ---------------------------------------------------------------------


def embed(model: Model, x: int) -> np.ndarray:
    return model.embedding.lookup(np.array([x]))[0]


def block_forward(z: np.ndarray, w: BlockWeights) -> np.ndarray:
    """One gated residual block applied to a vector or to rows of a matrix."""
    z2 = np.atleast_2d(z)
    out = _block(z2, w)[0]
    return out.reshape(np.shape(z))


def _block(z, w):
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True))
    s = norm + NORM_EPS
    zn = z / s
    a = zn @ w.w1.T
    b = zn @ w.w3.T
    sg = expit(a)
    g = sg * b
    return z + g @ w.w2, (z, norm, s, zn, b, sg, g)


@dataclass
class Cache:
    xs: np.ndarray
    blocks: list
    final: np.ndarray
    shifted: np.ndarray  # logits minus the row max
    log_total: np.ndarray  # log partition of the shifted logits, (B, 1)
    probs: np.ndarray
    unique_inputs: bool

    @property
    def log_probs(self) -> np.ndarray:
        return self.shifted - self.log_total


def forward(model: Model, xs, unique_inputs: bool = False, workspace: dict | None = None) -> Cache:
    """Forward pass.  ``workspace`` holds reusable ``(B, M)`` buffers for training
    loops; caches built with it are overwritten by the next call."""
    xs = np.asarray(xs, dtype=np.int64)
    z = model.embedding.lookup(xs)
    saved = []
    for w in model.blocks:
        z, c = _block(z, w)
        saved.append(c)
    if workspace is None:
        shifted = z @ model.output
        probs = None
    else:
        shape = (xs.size, model.output.shape[1])
        if workspace.get("logits", np.empty(0)).shape != shape:
            workspace["logits"] = np.empty(shape)
            workspace["probs"] = np.empty(shape)
        shifted = np.matmul(z, model.output, out=workspace["logits"])
        probs = workspace["probs"]
    m = shifted.max(axis=1, keepdims=True)
    # max() propagates nan and inf, so this catches any non-finite logit
    if not np.isfinite(m).all():
        raise NonFiniteError(f"non-finite logits produced by {_culprit(model)}")
    shifted -= m
    probs = np.exp(shifted, out=probs)
    total = probs.sum(axis=1, keepdims=True)
    probs /= total
    return Cache(xs, saved, z, shifted, np.log(total), probs, unique_inputs)


def _culprit(model: Model) -> str:
    for name, t in model.tensors().items():
        if not np.isfinite(t).all():
            return f"parameter tensor '{name}'"
    return "overflow in the block stack (all parameter tensors are finite)"


def predict(model: Model, x: int) -> np.ndarray:
    return predict_rows(model, [x])[0]


def predict_rows(model: Model, xs) -> np.ndarray:
    return forward(model, xs).probs


# --- losses ----------------------------------------------------------------------------


def loss_empirical(model: Model, xs, ys, gt=None) -> float:
    """Mean negative log-likelihood of the batch; minus the true one when ``gt`` is given."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.size == 0:
        raise ValueError("empty batch")
    cache = forward(model, xs)
    nll = -cache.log_probs[np.arange(xs.size), ys].mean()
    if gt is not None:
        nll += gt.log_prob_pairs(xs, ys).mean()
    return float(nll)


def kl_rows(targets: np.ndarray, target_logs: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    """Per-row ``KL(target || model)``; zero-probability target entries contribute 0."""
    diff = target_logs - log_probs
    diff *= targets
    return diff.sum(axis=1)


def loss_population(model: Model, gt, support) -> float:
    """Average over ``support`` of ``KL(p(.|x) || p_hat(.|x))``."""
    support = np.asarray(support, dtype=np.int64)
    if support.size == 0:
        raise ValueError("empty support")
    cache = forward(model, support)
    kl = kl_rows(gt.conditional_rows(support), gt.log_conditional_rows(support), cache.log_probs)
    return float(kl.mean())


# --- backward ----------------------------------------------------------------------------


def backward(model: Model, cache: Cache, targets: np.ndarray, weights=None,
             consume: bool = False) -> Gradients:
    """Gradients of ``sum_b w_b * CE(targets_b, p_hat_b)`` (``w_b = 1/B`` by default).

    ``targets`` are distributions over outputs (rows), or a 1-D array of
    integer labels.  ``consume=True`` reuses ``cache.probs`` as scratch space.
    """
    B = cache.xs.size
    targets = np.asarray(targets)
    if targets.ndim == 1:
        dlogits = cache.probs if consume else cache.probs.copy()
        dlogits[np.arange(B), targets] -= 1.0
    else:
        dlogits = np.subtract(cache.probs, targets, out=cache.probs if consume else None)
    if weights is not None:
        dlogits *= np.asarray(weights)[:, None]
    grads = {}
    grads["output"] = cache.final.T @ dlogits
    dz = dlogits @ model.output.T
    if weights is None:
        # the 1/B factor is applied to the small matrices
        grads["output"] /= B
        dz /= B
    for i in range(len(model.blocks) - 1, -1, -1):
        w = model.blocks[i]
        z, norm, s, zn, b, sg, g = cache.blocks[i]
        dg = dz @ w.w2.T
        grads[f"blocks.{i}.w2"] = g.T @ dz
        db = dg * sg
        da = dg * b * sg * (1.0 - sg)
        grads[f"blocks.{i}.w1"] = da.T @ zn
        grads[f"blocks.{i}.w3"] = db.T @ zn
        dzn = da @ w.w1 + db @ w.w3
        # zn = z / (|z| + eps)
        dot = (dzn * z).sum(axis=1, keepdims=True)
        inv_norm = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)
        dz = dz + dzn / s - z * (dot * inv_norm / (s * s))
    if isinstance(model.embedding, LearnedEmbedding):
        de = np.zeros_like(model.embedding.matrix)
        if cache.unique_inputs:
            de[cache.xs] = dz
        else:
            np.add.at(de, cache.xs, dz)
        grads["embedding"] = de
    else:
        for i, e in enumerate(model.embedding.matrices):
            grads[f"fce.{i}"] = np.zeros_like(e)
    if not model.train_output:
        grads["output"] = np.zeros_like(model.output)
    return Gradients(grads)


def one_hot(ys, n: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.int64)
    out = np.zeros((ys.size, n))
    out[np.arange(ys.size), ys] = 1.0
    return out


def population_value_and_grad(model: Model, xs, targets, target_logs, unique_inputs=True,
                              neg_entropy=None, workspace: dict | None = None):
    """Mean KL over rows ``xs`` and its gradient (soft targets).

    ``neg_entropy`` (per-row ``sum_y p log p``) can be passed to skip
    recomputing it; the KL then follows from ``sum_y p * logits`` and the
    log-partition without forming the full log-probability matrix.
    """
    cache = forward(model, xs, unique_inputs=unique_inputs, workspace=workspace)
    if neg_entropy is None:
        neg_entropy = np.einsum("ij,ij->i", targets, target_logs)
    cross = np.einsum("ij,ij->i", targets, cache.shifted) - cache.log_total[:, 0]
    kl = float((neg_entropy - cross).mean())
    return kl, backward(model, cache, targets, consume=workspace is not None)


def empirical_value_and_grad(model: Model, xs, ys):
    """Mean cross-entropy of hard labels and its gradient."""
    ys = np.asarray(ys, dtype=np.int64)
    cache = forward(model, xs)
    rows = np.arange(ys.size)
    nll = float((cache.log_total[:, 0] - cache.shifted[rows, ys]).mean())
    return nll, backward(model, cache, ys, consume=True)


# --- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, config: dict | None = None, optimizer_state=None) -> None:
    """Flat ``.npz`` tensor dump with a JSON header."""
    arrays = {f"model/{k}": v for k, v in model.tensors().items()}
    if isinstance(model.embedding, FceEmbedding):
        arrays["model/fce_coords"] = model.embedding.coords
    header = {"config": config, "n_blocks": len(model.blocks), "train_output": model.train_output,
              "embedding": "learned" if isinstance(model.embedding, LearnedEmbedding) else "fce"}
    if optimizer_state is not None:
        header["optimizer_step"] = optimizer_state.step
        for k, v in optimizer_state.m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in optimizer_state.v.items():
            arrays[f"adam_v/{k}"] = v
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, header, optimizer_state_or_None)``."""
    from .optim import AdamState

    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        t = {k[len("model/"):]: data[k].copy() for k in data.files if k.startswith("model/")}
        m = {k[len("adam_m/"):]: data[k].copy() for k in data.files if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: data[k].copy() for k in data.files if k.startswith("adam_v/")}
    if header["embedding"] == "learned":
        emb = LearnedEmbedding(t["embedding"])
    else:
        n = sum(1 for k in t if k.startswith("fce.") and k != "fce_coords")
        emb = FceEmbedding([t[f"fce.{i}"] for i in range(n)], t["fce_coords"])
    blocks = [
        BlockWeights(t[f"blocks.{i}.w1"], t[f"blocks.{i}.w2"], t[f"blocks.{i}.w3"])
        for i in range(header["n_blocks"])
    ]
    model = Model(emb, blocks, t["output"], header["train_output"])
    state = None
    if "optimizer_step" in header:
        state = AdamState(m, v, header["optimizer_step"])
    return model, header, state
