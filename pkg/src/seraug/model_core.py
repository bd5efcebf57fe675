"""Classifier math: layer fusion, forward/backward passes, losses, AdamW.

The downstream head is deliberately small: a learnable softmax-weighted sum
over feature layers, one linear map D -> H, ReLU, mean pooling over frames,
and a linear classifier H -> C. An optional domain head (H -> 64 -> 1) serves
adversarial training. All gradients are derived by hand and verified against
central finite differences in the test suite; training math runs in 64-bit
over 32-bit stored features, with a fixed accumulation order (sequential over
the batch, then frames) so runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericsError

DOMAIN_HIDDEN = 64


def softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class SerModel:
    """Parameters of the emotion classifier.

    fusion_logits is None in last-layer mode; otherwise softmax(fusion_logits)
    gives the layer weights. Zero-initialized logits make the initial weights
    the uniform average 1/L.
    """

    fusion_logits: np.ndarray | None
    W1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (C, H)
    b2: np.ndarray  # (C,)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int = 768,
        hidden: int = 128,
        n_classes: int = 4,
        n_layers: int | None = None,
    ) -> "SerModel":
        return cls(
            fusion_logits=None if n_layers is None else np.zeros(n_layers),
            W1=rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(hidden, in_dim)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_classes, hidden)),
            b2=np.zeros(n_classes),
        )

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[0]

    @property
    def n_layers(self) -> int | None:
        return None if self.fusion_logits is None else len(self.fusion_logits)

    def params(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}
        if self.fusion_logits is not None:
            out["fusion_logits"] = self.fusion_logits
        return out

    def fuser_params(self) -> dict[str, np.ndarray]:
        """The feature-fuser subset: fusion weights plus the D -> H map."""
        out = {"W1": self.W1, "b1": self.b1}
        if self.fusion_logits is not None:
            out["fusion_logits"] = self.fusion_logits
        return out

    def copy(self) -> "SerModel":
        return SerModel(
            fusion_logits=None if self.fusion_logits is None else self.fusion_logits.copy(),
            W1=self.W1.copy(), b1=self.b1.copy(),
            W2=self.W2.copy(), b2=self.b2.copy(),
        )


@dataclass
class DomainHead:
    """Binary domain classifier over the pooled embedding (H -> 64 -> 1)."""

    Wd1: np.ndarray  # (64, H)
    bd1: np.ndarray  # (64,)
    Wd2: np.ndarray  # (1, 64)
    bd2: np.ndarray  # (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, width: int = DOMAIN_HIDDEN) -> "DomainHead":
        return cls(
            Wd1=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(width, hidden)),
            bd1=np.zeros(width),
            Wd2=rng.normal(0.0, 1.0 / np.sqrt(width), size=(1, width)),
            bd2=np.zeros(1),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"Wd1": self.Wd1, "bd1": self.bd1, "Wd2": self.Wd2, "bd2": self.bd2}

    def copy(self) -> "DomainHead":
        return DomainHead(self.Wd1.copy(), self.bd1.copy(), self.Wd2.copy(), self.bd2.copy())


@dataclass
class ForwardTrace:
    """Intermediates cached for backprop."""

    x: np.ndarray        # (L, T, D) input
    fused: np.ndarray    # (T, D)
    z: np.ndarray        # (T, H) pre-activations
    e: np.ndarray        # (H,) pooled embedding
    logits: np.ndarray   # (C,)


@dataclass
class DomainTrace:
    e: np.ndarray    # (H,) input embedding
    zd: np.ndarray   # (64,) pre-activations
    hd: np.ndarray   # (64,)
    logit: float


def fuse_layers(x: np.ndarray, fusion_logits: np.ndarray | None) -> np.ndarray:
    """Softmax-weighted sum over layers; last layer when fusion is disabled."""
    if x.ndim != 3:
        raise ValueError(f"expected (L, T, D) tensor, got shape {x.shape}")
    if fusion_logits is None:
        return x[-1]
    if x.shape[0] != len(fusion_logits):
        raise ValueError(
            f"layer count {x.shape[0]} does not match fusion weights {len(fusion_logits)}"
        )
    weights = softmax(fusion_logits)
    return np.tensordot(weights, x, axes=(0, 0))


def forward(model: SerModel, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Per-frame ReLU(W1 f + b1), mean pool over frames, then W2 e + b2."""
    fused = fuse_layers(x, model.fusion_logits)
    if fused.shape[1] != model.in_dim:
        raise ValueError(f"feature dim {fused.shape[1]} does not match model D={model.in_dim}")
    z = fused @ model.W1.T + model.b1
    h = np.maximum(z, 0.0)
    e = h.mean(axis=0)
    logits = model.W2 @ e + model.b2
    return logits, ForwardTrace(x=x, fused=fused, z=z, e=e, logits=logits)


def predict(model: SerModel, x: np.ndarray) -> int:
    logits, _ = forward(model, x)
    return int(np.argmax(logits))


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Stable negative log softmax; gradient is softmax(logits) - onehot."""
    if not 0 <= label < len(logits):
        raise ValueError(f"label {label} out of range for {len(logits)} classes")
    shifted = logits - np.max(logits)
    log_z = np.log(np.sum(np.exp(shifted)))
    loss = float(log_z - shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad


def bce_logit(logit: float, domain_label: int) -> tuple[float, float]:
    """Binary cross-entropy on a raw logit: softplus(x) - y*x, grad sigmoid(x) - y."""
    loss = float(np.logaddexp(0.0, logit) - domain_label * logit)
    if logit >= 0:
        sig = 1.0 / (1.0 + np.exp(-logit))
    else:
        z = np.exp(logit)
        sig = z / (1.0 + z)
    return loss, float(sig - domain_label)


def backward(model: SerModel, trace: ForwardTrace, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of all model parameters for one utterance.

    Mean pooling distributes dL/de as 1/T to each frame, ReLU masks by the
    sign of the cached pre-activations, and the fusion gradient flows through
    the softmax Jacobian. No fusion gradient is emitted in last-layer mode.
    """
    if dlogits.shape != trace.logits.shape:
        raise ValueError("dlogits shape does not match the trace")
    grads = {
        "W2": np.outer(dlogits, trace.e),
        "b2": dlogits.copy(),
    }
    de = model.W2.T @ dlogits
    grads.update(backward_from_embedding(model, trace, de))
    return grads


def backward_from_embedding(
    model: SerModel, trace: ForwardTrace, de: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the feature fuser (fusion_logits, W1, b1) given dL/de."""
    n_frames = trace.z.shape[0]
    dz = (de / n_frames) * (trace.z > 0.0)  # (T, H)
    grads = {
        "W1": dz.T @ trace.fused,
        "b1": dz.sum(axis=0),
    }
    if model.fusion_logits is not None:
        dfused = dz @ model.W1  # (T, D)
        dweights = np.tensordot(trace.x, dfused, axes=([1, 2], [0, 1]))  # (L,)
        weights = softmax(model.fusion_logits)
        grads["fusion_logits"] = weights * (dweights - np.dot(dweights, weights))
    return grads


def domain_forward(head: DomainHead, e: np.ndarray) -> tuple[float, DomainTrace]:
    zd = head.Wd1 @ e + head.bd1
    hd = np.maximum(zd, 0.0)
    logit = float((head.Wd2 @ hd + head.bd2)[0])
    return logit, DomainTrace(e=e, zd=zd, hd=hd, logit=logit)


def domain_backward(
    head: DomainHead, trace: DomainTrace, dlogit: float
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the domain head plus dL/de flowing back to the fuser."""
    grads = {
        "Wd2": dlogit * trace.hd[None, :],
        "bd2": np.array([dlogit]),
    }
    dhd = dlogit * head.Wd2[0]
    dzd = dhd * (trace.zd > 0.0)
    grads["Wd1"] = np.outer(dzd, trace.e)
    grads["bd1"] = dzd
    de = head.Wd1.T @ dzd
    return grads, de


def grad_reverse(grad: np.ndarray, lam: float) -> np.ndarray:
    """Reversal layer: identity forward, -lam * g backward."""
    return -lam * grad


class GradientReversal:
    """Stateless reversal layer; forward(x) = x, backward(g) = -lam * g."""

    def __init__(self, lam: float = 1.0):
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.lam = lam

    def forward(self, x):
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad_reverse(grad, self.lam)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta, with
    bias-corrected moments and both terms read from the pre-step theta.
    """

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 2e-3,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, param in params.items():
            grad = grads[name]
            if not np.isfinite(grad).all():
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            param -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)) + (
                self.lr * self.weight_decay * param
            )


# Declared parameter order for checkpoints.
_CKPT_ORDER = ("fusion_logits", "W1", "b1", "W2", "b2", "Wd1", "bd1", "Wd2", "bd2")


def save_checkpoint(
    path: str | Path,
    model: SerModel,
    head: DomainHead | None = None,
    meta: dict | None = None,
) -> None:
    """Write a JSON header line plus raw float64 little-endian arrays."""
    arrays = dict(model.params())
    if head is not None:
        arrays.update(head.params())
    names = [n for n in _CKPT_ORDER if n in arrays]
    header = {
        "format": "ser-checkpoint",
        "version": 1,
        "in_dim": model.in_dim,
        "hidden": model.hidden,
        "n_classes": model.n_classes,
        "n_layers": model.n_layers,
        "domain_head": head is not None,
        "arrays": [[n, list(arrays[n].shape)] for n in names],
    }
    header.update(meta or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(
    path: str | Path, expect_dims: dict | None = None
) -> tuple[SerModel, DomainHead | None, dict]:
    """Load a checkpoint; optionally validate dims against a config."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: bad checkpoint header: {exc}") from exc
        if header.get("format") != "ser-checkpoint" or header.get("version") != 1:
            raise DataError(f"{path}: not a version-1 checkpoint")
        if expect_dims:
            for key, expected in expect_dims.items():
                if header.get(key) != expected:
                    raise DataError(
                        f"{path}: checkpoint {key}={header.get(key)} "
                        f"does not match configured {expected}"
                    )
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    model = SerModel(
        fusion_logits=arrays.get("fusion_logits"),
        W1=arrays["W1"], b1=arrays["b1"], W2=arrays["W2"], b2=arrays["b2"],
    )
    head = None
    if header.get("domain_head"):
        head = DomainHead(arrays["Wd1"], arrays["bd1"], arrays["Wd2"], arrays["bd2"])
    return model, head, header
