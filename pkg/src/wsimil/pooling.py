"""Bag-level heads: attention pooling and mean / max pooling of instance predictions."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from wsimil.models import Encoder, fan_in_normal, sigmoid


@dataclass
class Bag:
    slide_id: str
    instances: np.ndarray
    coords: np.ndarray
    label: int

    def __post_init__(self):
        self.instances = np.asarray(self.instances)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id!r}: instances must be a non-empty (K, M) array")
        if self.coords.shape[0] != self.instances.shape[0]:
            raise ValueError(f"bag {self.slide_id!r}: {self.coords.shape[0]} coords for "
                             f"{self.instances.shape[0]} instances")
        if len({tuple(c) for c in self.coords.tolist()}) != len(self.coords):
            raise ValueError(f"bag {self.slide_id!r}: duplicate grid coordinates")
        if int(self.label) not in (0, 1):
            raise ValueError(f"bag {self.slide_id!r}: label must be 0 or 1")
        self.label = int(self.label)

    @property
    def K(self) -> int:
        return self.instances.shape[0]

    @property
    def M(self) -> int:
        return self.instances.shape[1]

    def permuted(self, order) -> "Bag":
        order = np.asarray(order)
        return Bag(self.slide_id, self.instances[order], self.coords[order], self.label)


@dataclass
class AttentionParams:
    V: np.ndarray  # (L, M)
    w: np.ndarray  # (L,)
    v: np.ndarray  # (M,)
    b: float = 0.0  # classifier bias

    def __post_init__(self):
        self.b = float(self.b)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        if self.V.ndim != 2 or self.V.shape != (self.w.size, self.v.size):
            raise ValueError(f"inconsistent attention shapes V{self.V.shape}, "
                             f"w({self.w.size},), v({self.v.size},)")

    @classmethod
    def from_dict(cls, params: dict) -> "AttentionParams":
        return cls(params["V"], params["w"], params["v"], params.get("b", 0.0))

    def as_dict(self) -> dict:
        return {"V": self.V, "w": self.w, "v": self.v, "b": np.asarray(self.b)}

    @property
    def L(self) -> int:
        return self.V.shape[0]

    @property
    def M(self) -> int:
        return self.V.shape[1]


def _instances(bag):
    return np.asarray(bag.instances if isinstance(bag, Bag) else bag, dtype=np.float64)


def _as_attention(params) -> AttentionParams:
    return params if isinstance(params, AttentionParams) else AttentionParams.from_dict(params)


def attention_logits(bag, params):
    H = _instances(bag)
    p = _as_attention(params)
    if H.ndim != 2 or H.shape[1] != p.M:
        raise ValueError(f"instances have dim {H.shape[-1]}, attention expects {p.M}")
    return np.tanh(H @ p.V.T) @ p.w


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def attention_weights(bag, params):
    """Softmax over instances of w . tanh(V h_k)."""
    return softmax(attention_logits(bag, params))


def pool(bag, a):
    """Attention-weighted sum of instances, z = sum_k a_k h_k."""
    H = _instances(bag)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (H.shape[0],):
        raise ValueError(f"{a.size} weights for {H.shape[0]} instances")
    return np.add.reduce(a[:, None] * H, axis=0)


def classify(z, params) -> float:
    """sigma(v . z + b)."""
    p = _as_attention(params)
    return float(sigmoid(float(np.dot(p.v, z)) + p.b))


def instance_predictions(bag, v, b=0.0):
    return sigmoid(_instances(bag) @ np.asarray(v, dtype=np.float64) + float(b))


def predict_mean(bag, v, b=0.0) -> float:
    """Mean of per-instance probabilities sigma(v . h_k + b)."""
    return float(np.mean(instance_predictions(bag, v, b)))


def predict_max(bag, v, b=0.0):
    """Return (max instance probability, index of the first instance attaining it)."""
    preds = instance_predictions(bag, v, b)
    k = int(np.argmax(preds))
    return float(preds[k]), k


def predict_attention(bag, params) -> float:
    a = attention_weights(bag, params)
    return classify(pool(bag, a), _as_attention(params))


# ---------------------------------------------------------------------------
# trainable heads sharing a common (init_params / predict / loss_and_grad) surface
# ---------------------------------------------------------------------------


def _dloss_dprob(p, y, eps):
    if p < eps or p > 1.0 - eps:
        return 0.0
    return -y / p + (1.0 - y) / (1.0 - p)


class AttentionMIL:
    variant = "attention"

    def __init__(self, feature_dim: int = 64, attention_dim: int = 128):
        self.M = int(feature_dim)
        self.L = int(attention_dim)

    def config(self) -> dict:
        return {"variant": self.variant, "feature_dim": self.M, "attention_dim": self.L}

    def init_params(self, rng) -> dict:
        return {
            "V": fan_in_normal(rng, (self.L, self.M), self.M),
            "w": fan_in_normal(rng, (self.L,), self.L),
            "v": fan_in_normal(rng, (self.M,), self.M),
            "b": np.zeros(()),
        }

    def predict(self, params, H) -> float:
        return predict_attention(H, params)

    def forward_backward(self, params, H, y):
        """Loss, parameter grads and dL/dH for one bag."""
        from wsimil.training import BCE_EPS, bce_loss

        H = np.asarray(H, dtype=np.float64)
        V, w, v, b = params["V"], params["w"], params["v"], np.asarray(params["b"]).item()
        T = np.tanh(H @ V.T)
        a = softmax(T @ w)
        z = np.add.reduce(a[:, None] * H, axis=0)
        p = float(sigmoid(float(v @ z) + b))
        loss = bce_loss(p, y)
        dt = 0.0 if (p < BCE_EPS or p > 1.0 - BCE_EPS) else p - y
        dv = dt * z
        dz = dt * v
        da = H @ dz
        ds = a * (da - a @ da)
        dw = T.T @ ds
        dU = np.outer(ds, w) * (1.0 - T ** 2)
        dV = dU.T @ H
        dH = np.outer(a, dz) + dU @ V
        return loss, {"V": dV, "w": dw, "v": dv, "b": np.asarray(dt)}, dH

    def loss_and_grad(self, params, xs, ys):
        loss, grads, _ = self.forward_backward(params, xs[0], float(ys[0]))
        return loss, grads


class InstancePoolMIL:
    """Shared linear-sigmoid instance classifier with mean or max pooling of predictions."""

    def __init__(self, feature_dim: int = 64, mode: str = "mean"):
        if mode not in ("mean", "max"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.M = int(feature_dim)
        self.mode = mode
        self.variant = mode

    def config(self) -> dict:
        return {"variant": self.variant, "feature_dim": self.M}

    def init_params(self, rng) -> dict:
        return {"v": fan_in_normal(rng, (self.M,), self.M), "b": np.zeros(())}

    def predict(self, params, H) -> float:
        if self.mode == "mean":
            return predict_mean(H, params["v"], params["b"])
        return predict_max(H, params["v"], params["b"])[0]

    def forward_backward(self, params, H, y):
        from wsimil.training import BCE_EPS, bce_loss

        H = np.asarray(H, dtype=np.float64)
        v = params["v"]
        preds = sigmoid(H @ v + np.asarray(params["b"]).item())
        if self.mode == "mean":
            p = float(np.mean(preds))
            g = _dloss_dprob(p, y, BCE_EPS)
            dlogits = g * preds * (1.0 - preds) / len(preds)
        else:
            k = int(np.argmax(preds))
            p = float(preds[k])
            dlogits = np.zeros(len(preds))
            dlogits[k] = 0.0 if (p < BCE_EPS or p > 1.0 - BCE_EPS) else p - y
        grads = {"v": H.T @ dlogits, "b": np.asarray(dlogits.sum())}
        return bce_loss(p, y), grads, np.outer(dlogits, v)

    def loss_and_grad(self, params, xs, ys):
        loss, grads, _ = self.forward_backward(params, xs[0], float(ys[0]))
        return loss, grads


class EncodedMIL:
    """A MIL head on top of a trainable patch encoder; bags are stacks of tiles (K, C, t, t)."""

    def __init__(self, encoder: Encoder, head):
        if head.M != encoder.config.feature_dim:
            raise ValueError("head feature_dim must equal the encoder's final width")
        self.encoder = encoder
        self.head = head
        self.variant = head.variant

    def config(self) -> dict:
        return {**self.head.config(), "encoder": True}

    def init_params(self, rng) -> dict:
        enc = {f"encoder.{k}": v for k, v in self.encoder.init_params(rng).items()}
        head = {f"head.{k}": v for k, v in self.head.init_params(rng).items()}
        return {**enc, **head}

    @staticmethod
    def _split(params):
        enc = {k[8:]: v for k, v in params.items() if k.startswith("encoder.")}
        head = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
        return enc, head

    def predict(self, params, tiles) -> float:
        enc, head = self._split(params)
        return self.head.predict(head, self.encoder.forward(enc, tiles))

    def loss_and_grad(self, params, xs, ys):
        enc, head = self._split(params)
        feats, cache = self.encoder.forward(enc, xs[0], return_cache=True)
        loss, hgrads, dH = self.head.forward_backward(head, feats, float(ys[0]))
        egrads, _ = self.encoder.backward(enc, cache, dH)
        grads = {f"encoder.{k}": v for k, v in egrads.items()}
        grads.update({f"head.{k}": v for k, v in hgrads.items()})
        return loss, {k: grads[k] for k in params}


def export_attention(bag: Bag, a) -> dict:
    """Structured record {slide_id, weights: [[row, col, weight], ...]} in instance order."""
    a = np.asarray(a, dtype=np.float64)
    return {
        "slide_id": bag.slide_id,
        "weights": [[int(r), int(c), float(x)] for (r, c), x in zip(bag.coords.tolist(), a)],
    }


def write_attention(path, records):
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
