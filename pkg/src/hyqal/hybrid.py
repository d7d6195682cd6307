"""Hybrid classifier: conv encoder -> quantum residual fusion -> softmax head."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import qsim
from .configs import config_hash, from_dict, to_dict
from .errors import ConfigError, DataError, NumericError, ShapeError
from .seeding import rng_for, rng_from_state, rng_state
from .ssl import ContrastiveConfig, projection_head
from .tensorcore import (
    AdamState,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    GlobalMaxPool,
    Layer,
    MaxPool,
    ReLU,
    Sequential,
    adam_step,
    as_tensor,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FREEZE_POLICIES = ("all-frozen", "last-block-unfrozen", "all-unfrozen")


@dataclass
class EncoderConfig:
    height: int = 64
    width: int = 64
    blocks: tuple = ((8, 2), (16, 2), (32, 2))
    feature_dim: int = 128
    # "strided": conv(stride)+batchnorm+relu; "simple": conv+relu+maxpool
    style: str = "strided"
    # global pooling before the dense projection: "avg" or "max"
    pool: str = "avg"

    def __post_init__(self):
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        if self.style not in ("strided", "simple"):
            raise ConfigError(f"encoder.style must be 'strided' or 'simple', got {self.style!r}")
        if self.pool not in ("avg", "max"):
            raise ConfigError(f"encoder.pool must be 'avg' or 'max', got {self.pool!r}")
        if not self.blocks or any(len(b) != 2 or b[0] < 1 or b[1] < 1 for b in self.blocks):
            raise ConfigError("encoder.blocks must be a non-empty list of (channels, stride)")
        if self.height < 1 or self.width < 1 or self.feature_dim < 1:
            raise ConfigError("encoder sizes must be positive")


@dataclass
class QuantumConfig:
    enabled: bool = True
    qubits: int = 8
    layers: int = 2
    topology: str = "ring"
    axes: tuple = ("y", "z")
    alpha_init: float = 0.1
    alpha_trainable: bool = True
    bound_angles: bool = False
    theta_init: float = 0.1
    in_pretrain: bool = False

    def __post_init__(self):
        self.axes = tuple(self.axes)
        self.circuit()

    def circuit(self) -> qsim.CircuitSpec:
        return qsim.CircuitSpec(self.qubits, self.layers, self.topology, self.axes)


@dataclass
class HeadConfig:
    dropout: float = 0.3
    batchnorm: bool = True

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"head.dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantum: QuantumConfig = field(default_factory=QuantumConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.quantum.enabled and self.encoder.feature_dim < self.quantum.qubits:
            raise ConfigError(
                f"feature_dim ({self.encoder.feature_dim}) must be >= qubits ({self.quantum.qubits})")


def build_encoder(cfg: EncoderConfig, rng) -> Sequential:
    blocks = []
    cin = 1
    for channels, stride in cfg.blocks:
        if cfg.style == "strided":
            conv = Conv2D(cin, channels, 3, stride, 1, rng=rng, input_grad=bool(blocks))
            blocks.append(Sequential([conv, BatchNorm(channels), ReLU()]))
        else:
            conv = Conv2D(cin, channels, 3, 1, 1, rng=rng, input_grad=bool(blocks))
            blocks.append(Sequential([conv, ReLU(), MaxPool(stride)]))
        cin = channels
    pool = GlobalAvgPool() if cfg.pool == "avg" else GlobalMaxPool()
    return Sequential(blocks + [pool, Dense(cin, cfg.feature_dim, rng=rng)])


class QuantumFusion(Layer):
    """h -> h + alpha * W_r q, where q are the Z readouts of the circuit fed u = W_q h + b_q."""

    kind = "quantum_fusion"

    def __init__(self, feature_dim, cfg: QuantumConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.spec = cfg.circuit()
        q = cfg.qubits
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W_q"] = rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(q, feature_dim))
        self.params["b_q"] = np.zeros(q)
        self.params["theta"] = qsim.init_theta(self.spec, rng, cfg.theta_init)
        self.params["W_r"] = rng.normal(0.0, 1.0 / math.sqrt(q), size=(feature_dim, q))
        self.params["alpha"] = np.array(float(cfg.alpha_init))
        self.zero_grad()

    def _angles(self, h):
        pre = h @ self.params["W_q"].T + self.params["b_q"]
        return (np.pi * np.tanh(pre), pre) if self.cfg.bound_angles else (pre, pre)

    def forward(self, x):
        h = as_tensor(x)
        single = h.ndim == 1
        h2 = h[None] if single else h
        if h2.ndim != 2 or h2.shape[1] != self.params["W_q"].shape[1]:
            raise ShapeError(self.kind, ("N", self.params["W_q"].shape[1]), h.shape)
        u, pre = self._angles(h2)
        q = qsim.expectations(u, self.spec, self.params["theta"])
        out = h2 + self.params["alpha"] * (q @ self.params["W_r"].T)
        self._cache = (h2, u, pre, q, single)
        return out[0] if single else out

    def quantum_features(self, h):
        u, _ = self._angles(np.atleast_2d(as_tensor(h)))
        return qsim.expectations(u, self.spec, self.params["theta"])

    def backward(self, grad_out):
        h, u, pre, q, single = self._cached()
        g = as_tensor(grad_out)
        g = g[None] if single else g
        alpha = self.params["alpha"]
        w_r = self.params["W_r"]
        rq = q @ w_r.T
        self._accumulate("alpha", np.array(np.sum(g * rq)))
        self._accumulate("W_r", alpha * (g.T @ q))
        dq = alpha * (g @ w_r)
        if np.any(dq):
            _, du, dtheta = qsim.expectations_and_gradients(u, self.spec, self.params["theta"], dq)
        else:
            du = np.zeros_like(u)
            dtheta = np.zeros(self.spec.theta_shape)
        if self.cfg.bound_angles:
            du = du * np.pi * (1.0 - np.tanh(pre) ** 2)
        self._accumulate("theta", dtheta)
        self._accumulate("W_q", du.T @ h)
        self._accumulate("b_q", du.sum(axis=0))
        dh = g + du @ self.params["W_q"]
        return dh[0] if single else dh


def softmax(logits):
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(h, W_c, b_c):
    """Softmax(W_c h + b_c) for one feature vector or a batch."""
    return softmax(as_tensor(h) @ as_tensor(W_c).T + b_c)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class HybridModel:
    """All trainable groups of the pipeline.

    ``encoder`` (theta), ``projection`` (phi, pretraining only), ``fusion``
    (W_q, b_q, Theta, W_r, alpha; absent when the quantum module is off) and
    ``head`` (batchnorm, dropout, W_c/b_c).  Each group draws its
    initialisation from its own random stream, so switching the quantum
    module on or off leaves every other group's initial weights unchanged.
    """

    GROUPS = ("encoder", "projection", "fusion", "head")

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        d = cfg.encoder.feature_dim
        self.encoder = build_encoder(cfg.encoder, rng_for(seed, "init", "encoder"))
        self.projection = projection_head(d, cfg.contrastive, rng_for(seed, "init", "projection"))
        self.fusion = QuantumFusion(d, cfg.quantum, rng_for(seed, "init", "fusion")) if cfg.quantum.enabled else None
        self.dropout_rng = rng_for(seed, "dropout")
        head = [Dropout(cfg.head.dropout, self.dropout_rng), Dense(d, 2, rng=rng_for(seed, "init", "head"))]
        if cfg.head.batchnorm:
            head.insert(0, BatchNorm(d))
        self.head = Sequential(head)
        self.freeze_policy = "all-unfrozen"
        self.step = 0

    # -- structure -------------------------------------------------------
    def groups(self):
        out = {"encoder": self.encoder, "projection": self.projection, "head": self.head}
        if self.fusion is not None:
            out["fusion"] = Sequential([self.fusion])
        return {k: out[k] for k in self.GROUPS if k in out}

    def num_parameters(self, include_projection=False):
        total = 0
        for name, mod in self.groups().items():
            if name == "projection" and not include_projection:
                continue
            total += mod.num_parameters()
        return total

    def _first_trainable_encoder_layer(self):
        if self.freeze_policy == "all-unfrozen":
            return 0
        n_blocks = len(self.cfg.encoder.blocks)
        if self.freeze_policy == "last-block-unfrozen":
            return n_blocks - 1
        return len(self.encoder.layers)

    def set_freeze_policy(self, policy):
        if policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {policy!r}; choose from {FREEZE_POLICIES}")
        self.freeze_policy = policy

    def trainable(self, phase="finetune"):
        """Map of qualified name -> (param, grads dict, key) for the parameters updated in ``phase``."""
        out = {}
        if phase == "pretrain":
            mods = {"encoder": self.encoder, "projection": self.projection}
            if self.fusion is not None and self.cfg.quantum.in_pretrain:
                mods["fusion"] = Sequential([self.fusion])
            start = 0
        else:
            mods = {k: v for k, v in self.groups().items() if k != "projection"}
            start = self._first_trainable_encoder_layer()
        for gname, mod in mods.items():
            for name, p, grads, key in mod.named_parameters():
                if gname == "encoder" and int(name.split(".")[0]) < start:
                    continue
                if gname == "fusion" and key == "alpha" and not self.cfg.quantum.alpha_trainable:
                    continue
                out[f"{gname}.{name}"] = (p, grads, key)
        return out

    def zero_grad(self):
        for mod in self.groups().values():
            mod.zero_grad()

    def set_mode(self, training: bool, phase="finetune"):
        for mod in self.groups().values():
            mod.train() if training else mod.eval()
        if training and phase == "finetune":
            for layer in self.encoder.layers[:self._first_trainable_encoder_layer()]:
                layer.eval()

    # -- forward / backward ---------------------------------------------
    def _images(self, x):
        x = as_tensor(x)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        h, w = self.cfg.encoder.height, self.cfg.encoder.width
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (h, w):
            raise ShapeError("encode", ("N", 1, h, w), x.shape, f"expected {h}x{w} grayscale images")
        return x

    def encode(self, x):
        return self.encoder.forward(self._images(x))

    def _encoder_backward(self, g, start):
        for layer in reversed(self.encoder.layers[start:]):
            g = layer.backward(g)
        return g

    def enhance(self, h):
        return self.fusion.forward(h) if self.fusion is not None else h

    def logits(self, x):
        return self.head.forward(self.enhance(self.encode(x)))

    def predict_proba(self, x, batch_size=64):
        self.set_mode(False)
        x = as_tensor(x)
        out = [softmax(self.logits(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def backward(self, dlogits):
        g = self.head.backward(dlogits)
        if self.fusion is not None:
            g = self.fusion.backward(g)
        start = self._first_trainable_encoder_layer()
        if start < len(self.encoder.layers):
            self._encoder_backward(g, start)

    def embed(self, x):
        h = self.encode(x)
        if self.fusion is not None and self.cfg.quantum.in_pretrain:
            h = self.fusion.forward(h)
        return self.projection.forward(h)

    def embed_backward(self, dz):
        g = self.projection.backward(dz)
        if self.fusion is not None and self.cfg.quantum.in_pretrain:
            g = self.fusion.backward(g)
        self._encoder_backward(g, 0)

    # -- persistence -----------------------------------------------------
    def state_dict(self):
        params, state = {}, {}
        for gname, mod in self.groups().items():
            params[gname] = {name: p.copy() for name, p, _, _ in mod.named_parameters()}
            buffers = {name: v.copy() for name, _, _, v in mod.named_state()}
            if buffers:
                state[gname] = buffers
        return params, state

    def load_state_dict(self, params, state=None, groups=None):
        """Copy arrays into this model.

        With ``groups=None`` the checkpoint must cover exactly this model's
        groups; otherwise only the listed groups are copied.
        """
        mods = self.groups()
        if groups is None:
            if set(params) != set(mods):
                raise DataError(f"checkpoint groups {sorted(params)} do not match model groups {sorted(mods)}")
            groups = list(mods)
        state = state or {}
        for gname in groups:
            if gname not in mods or gname not in params:
                raise DataError(f"parameter group {gname!r} missing from model or checkpoint")
            own = {name: p for name, p, _, _ in mods[gname].named_parameters()}
            given = params[gname]
            if set(own) != set(given):
                raise DataError(f"parameter names differ in group {gname!r}")
            for name, p in own.items():
                v = as_tensor(given[name])
                if v.shape != p.shape:
                    raise DataError(f"shape mismatch for {gname}.{name}: {v.shape} vs {p.shape}")
                p[...] = v
            for name, layer, key, _ in mods[gname].named_state():
                if name in state.get(gname, {}):
                    buf = dict(layer.state())
                    buf[key] = state[gname][name]
                    layer.load_state(buf)


def finetune_step(model: HybridModel, images, labels, optimizer: AdamState):
    """One supervised update of every unfrozen parameter group; returns the batch loss."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("finetune_step: empty batch")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("finetune_step: labels must be 0 or 1")
    model.set_mode(True)
    model.zero_grad()
    loss, dlogits = cross_entropy(model.logits(images), labels)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite fine-tuning loss at step {model.step}")
    model.backward(dlogits)
    apply_update(model.trainable("finetune"), optimizer)
    model.step += 1
    return loss


def apply_update(trainable, optimizer: AdamState):
    params = {k: p for k, (p, _, _) in trainable.items()}
    grads = {k: g[key] for k, (_, g, key) in trainable.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    adam_step(params, grads, optimizer)


# -- checkpoint format ----------------------------------------------------
def _encode_array(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("refusing to checkpoint non-finite values")
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _decode_array(obj, where):
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed array at {where}: {exc}") from None
    if data.size != math.prod(shape):
        raise DataError(f"array at {where} has {data.size} values for shape {shape}")
    return data.reshape(shape)


def checkpoint_dict(model: HybridModel, kind="hybrid-model", meta=None, groups=None):
    params, state = model.state_dict()
    groups = groups or list(params)
    cfg = to_dict(model.cfg)
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": model.seed,
        "freeze_policy": model.freeze_policy,
        "params": {g: {n: _encode_array(a) for n, a in params[g].items()} for g in groups if g in params},
        "state": {g: {n: _encode_array(a) for n, a in state[g].items()} for g in groups if g in state},
        "rng_state": {"dropout": rng_state(model.dropout_rng)},
        "step": model.step,
        "meta": meta or {},
    }


def model_from_checkpoint(ckpt: dict, cfg: ModelConfig = None, groups=None) -> HybridModel:
    """Rebuild a model; with ``cfg`` given, only ``groups`` are copied into a fresh model of that config."""
    validate_checkpoint(ckpt)
    if cfg is None:
        cfg = from_dict(ModelConfig, ckpt["config"], "checkpoint.config")
        model = HybridModel(cfg, ckpt.get("seed", 0))
        model.freeze_policy = ckpt.get("freeze_policy", "all-unfrozen")
        model.step = ckpt.get("step", 0)
        rs = ckpt.get("rng_state", {}).get("dropout")
        if rs:
            model.dropout_rng.bit_generator.state = rng_from_state(rs).bit_generator.state
    else:
        model = HybridModel(cfg, ckpt.get("seed", 0))
    params = {g: {n: _decode_array(a, f"params.{g}.{n}") for n, a in ps.items()} for g, ps in ckpt["params"].items()}
    state = {g: {n: _decode_array(a, f"state.{g}.{n}") for n, a in ss.items()} for g, ss in ckpt.get("state", {}).items()}
    model.load_state_dict(params, state, groups=groups)
    return model


def validate_checkpoint(ckpt):
    if not isinstance(ckpt, dict):
        raise DataError("checkpoint must be a JSON object")
    for key in ("format_version", "config", "params"):
        if key not in ckpt:
            raise DataError(f"checkpoint missing key {key!r}")
    if ckpt["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {ckpt['format_version']!r}")
    if not isinstance(ckpt["params"], dict):
        raise DataError("checkpoint params must be an object")


def save_checkpoint(path, ckpt: dict):
    with open(path, "w") as fh:
        json.dump(ckpt, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc.strerror}", filename=str(path)) from None
    try:
        ckpt = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode())
        raise DataError(f"checkpoint is not valid JSON ({exc.msg})", filename=str(path), offset=offset) from None
    validate_checkpoint(ckpt)
    return ckpt
