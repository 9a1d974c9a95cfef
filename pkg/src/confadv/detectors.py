"""Desk-scale manipulation detectors: definition, training, evaluation, weight files."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

FAMILIES = ("BS_like", "BCplus_like", "VGG_like")

MAGIC = b"MMFT"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    patch: int = 32
    widths: tuple = ()
    dense: int = 0
    constrained_first_layer: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.constrained_first_layer != (self.family == "BS_like"):
            raise ValueError("only BS_like carries the constrained first layer")

    @classmethod
    def default(cls, family: str, patch: int = 32) -> "ArchitectureSpec":
        if family == "BS_like":
            return cls(family, patch, (3, 16, 32), 128, True)
        if family == "BCplus_like":
            return cls(family, patch, (8, 16, 16, 32, 32), 0, False)
        if family == "VGG_like":
            return cls(family, patch, (8, 8, 16, 16, 32, 32), 256, False)
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        base = cls.default(d["family"], int(d.get("patch", 32)))
        return cls(
            base.family,
            base.patch,
            tuple(d.get("widths", base.widths)),
            int(d.get("dense", base.dense)),
            base.constrained_first_layer,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def layers(self) -> list[tuple]:
        """Layer plan: ("conv", name, cin, cout, k, stride, pad, relu) | ("pool",) | ("dense", name, n_in, n_out, relu)."""
        p, w = self.patch, self.widths
        plan: list[tuple] = []
        if self.family == "BS_like":
            plan.append(("conv", "constrained", 1, w[0], 5, 1, 2, False))
            plan.append(("conv", "conv1", w[0], w[1], 3, 1, 1, True))
            plan.append(("pool",))
            plan.append(("conv", "conv2", w[1], w[2], 3, 1, 1, True))
            plan.append(("pool",))
            flat = w[2] * (p // 4) ** 2
            plan.append(("dense", "fc1", flat, self.dense, True))
            plan.append(("dense", "out", self.dense, 2, False))
        elif self.family == "BCplus_like":
            strides = (1, 2, 1, 2, 1)
            cin, size = 1, p
            for i, (cout, s) in enumerate(zip(w, strides)):
                plan.append(("conv", f"conv{i + 1}", cin, cout, 3, s, 1, True))
                cin, size = cout, (size + 2 - 3) // s + 1
            plan.append(("dense", "out", cin * size * size, 2, False))
        else:
            cin, size = 1, p
            for i, cout in enumerate(w):
                plan.append(("conv", f"conv{i + 1}", cin, cout, 3, 1, 1, True))
                cin = cout
                if i % 2 == 1:
                    plan.append(("pool",))
                    size //= 2
            plan.append(("dense", "fc1", cin * size * size, self.dense, True))
            plan.append(("dense", "out", self.dense, 2, False))
        return plan


def project_constrained_layer(weights: np.ndarray) -> np.ndarray:
    """High-pass projection: centre tap -1, the other 24 taps rescaled to sum to +1."""
    w = np.array(weights, dtype=np.float32, copy=True)
    if w.ndim != 4 or w.shape[1:] != (1, 5, 5):
        raise T.ShapeError(f"constrained layer expects [C,1,5,5] kernels, got {w.shape}")
    flat = w.reshape(w.shape[0], 25).astype(np.float64)
    flat[:, 12] = 0.0
    sums = flat.sum(axis=1)
    for f in range(flat.shape[0]):
        if abs(sums[f]) < 1e-12:
            flat[f] = 1.0 / 24.0
        else:
            flat[f] /= sums[f]
    flat[:, 12] = -1.0
    return flat.reshape(w.shape).astype(np.float32)


def constraint_error(weights: np.ndarray) -> float:
    """Max violation of the projection constraints over all filters."""
    flat = weights.reshape(weights.shape[0], 25).astype(np.float64)
    centre = np.abs(flat[:, 12] + 1.0).max()
    rest = np.abs(flat.sum(axis=1) - flat[:, 12] - 1.0).max()
    return float(max(centre, rest))


@dataclass
class DetectorModel:
    spec: ArchitectureSpec
    weights: dict  # name -> float32 array, in declaration order
    fingerprint: dict = field(default_factory=dict)

    def forward(self, x, params: dict | None = None) -> T.Tensor:
        """Logits [N,2] for patches [N,1,P,P] (or [2] for a single [1,P,P] patch)."""
        prm = self.weights if params is None else params
        h = T.as_tensor(x)
        for layer in self.spec.layers():
            kind = layer[0]
            if kind == "conv":
                _, name, _, _, _, stride, pad, act = layer
                b = prm.get(f"{name}.b")
                h = T.conv2d(h, prm[f"{name}.w"], b, stride=stride, padding=pad)
                if act:
                    h = T.relu(h)
            elif kind == "pool":
                h = T.maxpool2(h)
            else:
                _, name, _, _, act = layer
                if h.data.ndim >= 3:
                    h = T.flatten(h)
                h = T.dense(h, prm[f"{name}.w"], prm[f"{name}.b"])
                if act:
                    h = T.relu(h)
        return h

    def logits(self, patches: np.ndarray, batch: int = 256) -> np.ndarray:
        """Plain inference on [N,P,P] patches; returns float32 [N,2]."""
        x = np.asarray(patches, dtype=np.float32)
        out = [self.forward(x[i:i + batch, None]).data for i in range(0, len(x), batch)]
        return np.concatenate(out) if out else np.zeros((0, 2), np.float32)

    def predict(self, patches: np.ndarray) -> np.ndarray:
        return decide(self.logits(patches))

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, w in self.weights.items():
            h.update(name.encode() + b"\0" + np.ascontiguousarray(w, dtype="<f4").tobytes())
        return h.hexdigest()


def decide(logits: np.ndarray) -> np.ndarray:
    """argmax decision; ties go to class 0."""
    z = np.asarray(logits)
    return (z[..., 1] > z[..., 0]).astype(np.int64)


def build_model(spec: ArchitectureSpec, seed: int) -> DetectorModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31337]))
    weights: dict[str, np.ndarray] = {}
    for layer in spec.layers():
        if layer[0] == "conv":
            _, name, cin, cout, k, *_ = layer
            bound = np.sqrt(6.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32)
            if name == "constrained":
                weights[f"{name}.w"] = project_constrained_layer(np.abs(w))
            else:
                weights[f"{name}.w"] = w
                weights[f"{name}.b"] = np.zeros(cout, np.float32)
        elif layer[0] == "dense":
            _, name, n_in, n_out, _ = layer
            bound = np.sqrt(6.0 / n_in)
            weights[f"{name}.w"] = rng.uniform(-bound, bound, (n_out, n_in)).astype(np.float32)
            weights[f"{name}.b"] = np.zeros(n_out, np.float32)
    return DetectorModel(spec, weights, {"init_seed": int(seed)})


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    check_every: int = 0  # constraint audit period in steps; 0 disables

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @classmethod
    def for_family(cls, family: str, **kw) -> "TrainConfig":
        epochs = {"BS_like": 20, "VGG_like": 20, "BCplus_like": 10}[family]
        kw.setdefault("epochs", epochs)
        return cls(**kw)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


def train(model: DetectorModel, train_x, train_y, val_x, val_y, cfg: TrainConfig,
          manifest_hash: str = "", progress=None, task: str = "") -> tuple[DetectorModel, list[EpochMetrics]]:
    """Adam on softmax cross-entropy; returns the best-validation snapshot."""
    names = list(model.weights)
    params = {n: model.weights[n].copy() for n in names}
    states = {n: T.AdamState.fresh(params[n], lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
              for n in names}
    constrained = model.spec.constrained_first_layer
    x_all = np.asarray(train_x, np.float32)[:, None]
    y_all = np.asarray(train_y, np.int64)
    history: list[EpochMetrics] = []
    best = (-1.0, None, -1)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(len(y_all))
        losses, correct = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            try:
                with T.Tape() as tape:
                    wt = {n: T.Tensor(params[n]) for n in names}
                    z = model.forward(xb, wt)
                    loss = T.softmax_cross_entropy(z, yb)
                grads = tape.gradient(loss, [wt[n] for n in names])
                for n, g in zip(names, grads):
                    params[n], states[n] = T.adam_update(params[n], g.data, states[n])
                    if not np.isfinite(params[n]).all():
                        raise T.NonFiniteError(f"parameter {n} became non-finite")
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch + 1}, step {step}: {exc}") from exc
            if constrained:
                params["constrained.w"] = project_constrained_layer(params["constrained.w"])
                if cfg.check_every and step % cfg.check_every == 0:
                    err = constraint_error(params["constrained.w"])
                    if err > 1e-5:
                        raise AssertionError(f"constraint violated by {err} at step {step}")
            losses.append(float(loss.data))
            correct += int((decide(z.data) == yb).sum())
            step += 1
        snapshot = DetectorModel(model.spec, {n: params[n].copy() for n in names})
        val_acc = evaluate(snapshot, val_x, val_y)["accuracy"] if len(val_y) else correct / len(y_all)
        m = EpochMetrics(epoch + 1, float(np.mean(losses)), correct / len(y_all), val_acc)
        history.append(m)
        log.info("epoch %d loss %.4f train %.4f val %.4f", m.epoch, m.train_loss, m.train_accuracy, m.val_accuracy)
        if progress:
            progress(m)
        if val_acc > best[0]:
            best = (val_acc, snapshot.weights, epoch + 1)
    fingerprint = {
        "init_seed": model.fingerprint.get("init_seed"),
        "train_seed": cfg.seed,
        "epochs": cfg.epochs,
        "best_epoch": best[2],
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "manifest_hash": manifest_hash,
        "task": task,
    }
    return DetectorModel(model.spec, best[1], fingerprint), history


def evaluate(model: DetectorModel, patches, labels) -> dict:
    """Accuracy plus false-positive rate (pristine called manipulated) and false-negative rate."""
    return decision_metrics(model.logits(patches), labels)


def decision_metrics(logits, labels) -> dict:
    y = np.asarray(labels, np.int64)
    pred = decide(logits)
    neg, pos = y == 0, y == 1
    return {
        "accuracy": float((pred == y).mean()) if len(y) else float("nan"),
        "false_positive_rate": float((pred[neg] == 1).mean()) if neg.any() else 0.0,
        "false_negative_rate": float((pred[pos] == 0).mean()) if pos.any() else 0.0,
        "n": int(len(y)),
    }


# ---------------------------------------------------------------------------
# Weight files: MMFT | u16 version | u32 header length | JSON header | tensors (<f4)
# ---------------------------------------------------------------------------

def model_bytes(model: DetectorModel) -> bytes:
    header = {
        "spec": model.spec.to_dict(),
        "tensors": [{"name": n, "shape": list(w.shape)} for n, w in model.weights.items()],
        "fingerprint": model.fingerprint,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(hdr)), hdr]
    parts += [np.ascontiguousarray(w, dtype="<f4").tobytes() for w in model.weights.values()]
    return b"".join(parts)


def save_model(model: DetectorModel, path) -> None:
    if model.spec.constrained_first_layer:
        err = constraint_error(model.weights["constrained.w"])
        if err > 1e-5:
            raise ValueError(f"refusing to save: constrained layer off by {err}")
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def parse_model(raw: bytes, name: str = "<bytes>") -> DetectorModel:
    if len(raw) < 10:
        raise ModelFormatError(f"{name}: file too short for a model header")
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"{name}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{name}: format version {version}, this build reads version {FORMAT_VERSION}")
    if len(raw) < 10 + hlen:
        raise ModelFormatError(f"{name}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
        spec = ArchitectureSpec.from_dict(header["spec"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ModelFormatError(f"{name}: corrupt header ({exc})") from None
    pos = 10 + hlen
    weights = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise ModelFormatError(f"{name}: truncated tensor {entry['name']}")
        weights[entry["name"]] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise ModelFormatError(f"{name}: {len(raw) - pos} unexpected trailing bytes")
    return DetectorModel(spec, weights, header.get("fingerprint", {}))


def load_model(path) -> DetectorModel:
    with open(path, "rb") as fh:
        return parse_model(fh.read(), str(path))
