"""Contrastive dimensionality reduction of AS embeddings.

Positive pairs are close ASes of the same organization, negative pairs far
ASes of different organizations. A one-hidden-layer tanh network is trained
so that positive pairs end up closer than negative pairs.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .embedder import EmbeddingStore

log = logging.getLogger(__name__)


class SupervisionError(ValueError):
    """Not enough organization structure to build contrastive pairs."""


class DivergenceError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    hidden: int = 256
    out_dim: int = 16
    lr: float = 1e-3
    batch_pos: int = 64
    batch_neg: int = 64
    resample_every: int = 25
    iterations: int = 1000
    neg_multiple: int = 4
    literal_sign: bool = False  # softplus(L_neg - L_pos) as printed, for comparison only


@dataclass
class PairSet:
    positives: np.ndarray  # (P, 2) row indices into the store's sorted ASN list
    negatives: np.ndarray  # (N, 2)
    q25: float
    q75: float
    asns: list = field(default_factory=list)

    def as_asn_pairs(self):
        a = self.asns
        return ([(a[i], a[j]) for i, j in self.positives],
                [(a[i], a[j]) for i, j in self.negatives])


def _histogram(d: np.ndarray) -> str:
    if d.size == 0:
        return "no distances"
    counts, edges = np.histogram(d, bins=8)
    return ", ".join(f"[{lo:.3g},{hi:.3g}):{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts))


def construct_pairs_matrix(
    X: np.ndarray,
    orgs: list,
    neg_multiple: int = 4,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Pairs over the rows of ``X`` labelled by ``orgs`` (None = no organization)."""
    groups: dict = {}
    for i, o in enumerate(orgs):
        if o is not None:
            groups.setdefault(o, []).append(i)
    multi = [g for g in groups.values() if len(g) >= 2]
    if len(multi) < 2:
        raise SupervisionError(
            f"need >= 2 organizations with >= 2 ASes each, found {len(multi)}")

    intra = np.array([p for g in multi for p in combinations(g, 2)], dtype=np.int64)
    dist = np.linalg.norm(X[intra[:, 0]] - X[intra[:, 1]], axis=1)
    q25, q75 = np.percentile(dist, [25, 75])
    positives = intra[dist <= q25]

    labelled = np.array(sorted(i for g in groups.values() for i in g), dtype=np.int64)
    org_of = np.array([orgs[i] if orgs[i] is not None else "" for i in range(len(orgs))], dtype=object)
    cap = neg_multiple * len(positives)
    rng = np.random.default_rng(seed)
    chosen: set = set()
    attempts = 0
    max_attempts = 50 * max(cap, 1)
    while len(chosen) < cap and attempts < max_attempts:
        n = min(4096, 2 * (cap - len(chosen)) + 16)
        a = labelled[rng.integers(0, len(labelled), n)]
        b = labelled[rng.integers(0, len(labelled), n)]
        attempts += n
        ok = org_of[a] != org_of[b]
        a, b = a[ok], b[ok]
        d = np.linalg.norm(X[a] - X[b], axis=1)
        for i, j in zip(a[d >= q75], b[d >= q75]):
            key = (int(i), int(j)) if i < j else (int(j), int(i))
            chosen.add(key)
            if len(chosen) >= cap:
                break
    negatives = np.array(sorted(chosen), dtype=np.int64).reshape(-1, 2)
    if len(positives) == 0 or len(negatives) == 0:
        raise SupervisionError(
            f"{len(positives)} positives, {len(negatives)} negatives; "
            f"intra-org distances: {_histogram(dist)}")
    return positives, negatives, float(q25), float(q75)


def construct_pairs(store: EmbeddingStore, org_map: dict, neg_multiple: int = 4, seed: int = 0) -> PairSet:
    asns = store.asns()
    if not asns:
        raise SupervisionError("empty embedding store")
    X = store.matrix(asns)
    orgs = [org_map.get(a) for a in asns]
    pos, neg, q25, q75 = construct_pairs_matrix(X, orgs, neg_multiple, seed)
    return PairSet(pos, neg, q25, q75, asns)


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def _sigmoid(x: float) -> float:
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


def pair_losses(Ya: np.ndarray, Yb: np.ndarray) -> float:
    """Mean squared distance per output dimension."""
    return float(np.mean(np.sum((Ya - Yb) ** 2, axis=1)) / Ya.shape[1])


def cdr_loss(pos_a, pos_b, neg_a, neg_b, literal_sign: bool = False) -> float:
    """softplus(L_pos - L_neg); small when negatives are much farther apart than positives."""
    l_pos = pair_losses(np.asarray(pos_a), np.asarray(pos_b))
    l_neg = pair_losses(np.asarray(neg_a), np.asarray(neg_b))
    margin = l_neg - l_pos if literal_sign else l_pos - l_neg
    return softplus(margin)


@dataclass
class ReductionModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)

    @classmethod
    def init(cls, in_dim: int, hyper: Hyperparams, seed: int = 0) -> "ReductionModel":
        if hyper.out_dim >= in_dim:
            raise ValueError(f"reduced dim {hyper.out_dim} must be below input dim {in_dim}")
        rng = np.random.default_rng(seed)
        r1 = 1.0 / np.sqrt(in_dim)
        r2 = 1.0 / np.sqrt(hyper.hidden)
        return cls(
            rng.uniform(-r1, r1, (in_dim, hyper.hidden)),
            rng.uniform(-r1, r1, hyper.hidden),
            rng.uniform(-r2, r2, (hyper.hidden, hyper.out_dim)),
            rng.uniform(-r2, r2, hyper.out_dim),
            seed,
            hyper,
        )

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1 + self.b1) @ self.W2 + self.b2

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden": self.W1.shape[1],
            "out_dim": self.out_dim,
            "activation": "tanh",
            "seed": self.seed,
            "hyperparameters": asdict(self.hyper),
            "W1": self.W1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.ravel().tolist(),
            "b2": self.b2.tolist(),
            "checksum": self.checksum(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReductionModel":
        i, h, o = d["in_dim"], d["hidden"], d["out_dim"]
        return cls(
            np.array(d["W1"], dtype=np.float64).reshape(i, h),
            np.array(d["b1"], dtype=np.float64),
            np.array(d["W2"], dtype=np.float64).reshape(h, o),
            np.array(d["b2"], dtype=np.float64),
            d.get("seed", 0),
            Hyperparams(**d.get("hyperparameters", {})),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ReductionModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def loss_and_grads(model: ReductionModel, X: np.ndarray, pos: np.ndarray, neg: np.ndarray,
                   literal_sign: bool = False):
    """Loss over the given pairs and its gradient w.r.t. every model parameter.

    ``pos``/``neg`` index rows of ``X``. Only rows that appear in a pair are
    pushed through the network.
    """
    rows, inv = np.unique(np.concatenate([pos.ravel(), neg.ravel()]), return_inverse=True)
    inv_pos = inv[: pos.size].reshape(pos.shape)
    inv_neg = inv[pos.size:].reshape(neg.shape)
    Xs = X[rows]
    A = np.tanh(Xs @ model.W1 + model.b1)
    Y = A @ model.W2 + model.b2
    dout = Y.shape[1]

    dp = Y[inv_pos[:, 0]] - Y[inv_pos[:, 1]]
    dn = Y[inv_neg[:, 0]] - Y[inv_neg[:, 1]]
    l_pos = float(np.sum(dp * dp)) / (len(pos) * dout)
    l_neg = float(np.sum(dn * dn)) / (len(neg) * dout)
    sign = -1.0 if literal_sign else 1.0
    margin = sign * (l_pos - l_neg)
    loss = softplus(margin)
    s = _sigmoid(margin) * sign

    gp = (2.0 * s / (len(pos) * dout)) * dp
    gn = (-2.0 * s / (len(neg) * dout)) * dn
    dY = np.zeros_like(Y)
    np.add.at(dY, inv_pos[:, 0], gp)
    np.add.at(dY, inv_pos[:, 1], -gp)
    np.add.at(dY, inv_neg[:, 0], gn)
    np.add.at(dY, inv_neg[:, 1], -gn)

    dW2 = A.T @ dY
    db2 = dY.sum(axis=0)
    dZ = (dY @ model.W2.T) * (1.0 - A * A)
    dW1 = Xs.T @ dZ
    db1 = dZ.sum(axis=0)
    return loss, [dW1, db1, dW2, db2]


@dataclass
class TrainResult:
    model: ReductionModel
    loss_trace: list
    pairs: PairSet


def train(
    store: EmbeddingStore,
    org_map: dict,
    hyper: Optional[Hyperparams] = None,
    seed: int = 0,
) -> TrainResult:
    """Mini-batch gradient descent on the contrastive loss.

    The pair set is rebuilt from reduced-space distances every
    ``resample_every`` iterations. The loss trace holds, per iteration, the
    loss over the full current pair set before that iteration's update.
    """
    hyper = hyper or Hyperparams()
    asns = store.asns()
    X = store.matrix(asns)
    orgs = [org_map.get(a) for a in asns]
    pos, neg, q25, q75 = construct_pairs_matrix(X, orgs, hyper.neg_multiple, seed)
    model = ReductionModel.init(X.shape[1], hyper, seed)
    rng = np.random.default_rng(seed + 1)
    trace = []
    # overflow is reported as DivergenceError rather than numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(hyper.iterations):
            if it and hyper.resample_every and it % hyper.resample_every == 0:
                pos, neg, q25, q75 = construct_pairs_matrix(
                    model.forward(X), orgs, hyper.neg_multiple, seed)
            full, _ = loss_and_grads(model, X, pos, neg, hyper.literal_sign)
            if not np.isfinite(full):
                raise DivergenceError(f"loss became non-finite at iteration {it}")
            trace.append(full)
            bp = pos[rng.integers(0, len(pos), hyper.batch_pos)]
            bn = neg[rng.integers(0, len(neg), hyper.batch_neg)]
            _, grads = loss_and_grads(model, X, bp, bn, hyper.literal_sign)
            for p, g in zip(model.params(), grads):
                p -= hyper.lr * g
            if not all(np.all(np.isfinite(p)) for p in model.params()):
                raise DivergenceError(f"parameters became non-finite at iteration {it}")
    log.info("trained %d iterations: loss %.6g -> %.6g", hyper.iterations,
             trace[0] if trace else float("nan"), trace[-1] if trace else float("nan"))
    return TrainResult(model, trace, PairSet(pos, neg, q25, q75, asns))


def reduce(model: ReductionModel, store: EmbeddingStore) -> EmbeddingStore:
    if store.dim != model.in_dim:
        raise ValueError(f"store dim {store.dim} != model input dim {model.in_dim}")
    out = EmbeddingStore(model.out_dim, store.provider_id, store.template_version,
                         {"reduced": True, "model_checksum": model.checksum()})
    asns = store.asns()
    if asns:
        Y = model.forward(store.matrix(asns))
        for a, y in zip(asns, Y):
            out.put(a, y)
    return out
