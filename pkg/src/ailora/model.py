"""Desk-scale transformer encoder with hand-written reverse-mode gradients.

Post-layer-norm encoder: per layer, multi-head self-attention with q/k/v/o
projections, residual add, layer norm, a two-matrix relu FFN, residual add,
layer norm. The final representation is mean-pooled over positions and fed to
a linear classifier trained with softmax cross-entropy.

Projections are either plain dense matrices (pretraining) or AdaptedLinear
slots (finetuning). The trainable set is explicit: backward returns gradients
for exactly the names in ``model.trainable`` and nothing else, and the
optimizer updates those arrays in place.

Forward passes return an activation cache stamped with the model's version
counter; any parameter update bumps the counter, so a backward pass against a
cache from before the update is rejected instead of silently producing wrong
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import PROJECTIONS, AdaptedLinear
from .errors import ConfigError, NumericError, ShapeError
from .seeding import named_rng
from .store import TensorStore
from .tensor import Matrix

LN_EPS = 1e-5

# parameter names holding 1-D vectors; stored on disk as single-row matrices
_VECTOR_SUFFIXES = (".gain", ".bias")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    vocab: int = 32
    max_seq: int = 16
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("layers", "dim", "heads", "ffn_dim", "vocab", "max_seq", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} is not a multiple of heads {self.heads}")

    def to_metadata(self) -> dict[str, str]:
        return {
            "layers": str(self.layers),
            "dim": str(self.dim),
            "heads": str(self.heads),
            "ffn_dim": str(self.ffn_dim),
            "vocab": str(self.vocab),
            "max_seq": str(self.max_seq),
            "num_classes": str(self.num_classes),
            "seed": str(self.seed),
        }

    @classmethod
    def from_metadata(cls, metadata: dict[str, str]) -> "ModelConfig":
        try:
            return cls(**{key: int(metadata[key]) for key in (
                "layers", "dim", "heads", "ffn_dim", "vocab", "max_seq", "num_classes", "seed"
            )})
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"checkpoint metadata does not describe a model: {exc}") from exc


class ToyModel:
    """Parameter container: dense params, optional adapter slots, trainable set."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, np.ndarray] = {}
        self.adapters: dict[int, dict[str, AdaptedLinear]] = {}
        self.trainable: list[str] = []
        self.version = 0

    def projection(self, i: int, proj: str):
        """The live q/k/v/o slot: an AdaptedLinear if attached, else the dense matrix."""
        layer = self.adapters.get(i, {}).get(proj)
        return layer if layer is not None else self.params[f"layer{i}.{proj}"]

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        """Name -> live array for every trainable tensor (adapter factors resolved)."""
        out: dict[str, np.ndarray] = {}
        for name in self.trainable:
            out[name] = self._resolve(name)
        return out

    def _resolve(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        stem, _, factor = name.rpartition(".")
        prefix, _, proj = stem.rpartition(".")
        i = int(prefix.removeprefix("layer"))
        layer = self.adapters[i][proj]
        return layer.a if factor == "a" else layer.b


def _param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.layers):
        names += [f"layer{i}.{p}" for p in PROJECTIONS]
        names += [f"layer{i}.ffn1", f"layer{i}.ffn2"]
        names += [f"layer{i}.ln1.gain", f"layer{i}.ln1.bias",
                  f"layer{i}.ln2.gain", f"layer{i}.ln2.bias"]
    names += ["classifier.weight", "classifier.bias"]
    return names


def _param_shape(cfg: ModelConfig, name: str) -> tuple[int, ...]:
    if name == "tok_emb":
        return (cfg.vocab, cfg.dim)
    if name == "pos_emb":
        return (cfg.max_seq, cfg.dim)
    if name == "classifier.weight":
        return (cfg.num_classes, cfg.dim)
    if name == "classifier.bias":
        return (cfg.num_classes,)
    leaf = name.split(".", 1)[1]
    if leaf in PROJECTIONS:
        return (cfg.dim, cfg.dim)
    if leaf == "ffn1":
        return (cfg.ffn_dim, cfg.dim)
    if leaf == "ffn2":
        return (cfg.dim, cfg.ffn_dim)
    return (cfg.dim,)  # layer-norm gain/bias


def build_model(cfg: ModelConfig) -> ToyModel:
    """Fresh model with per-name seeded Gaussian weights, everything trainable."""
    model = ToyModel(cfg)
    for name in _param_names(cfg):
        shape = _param_shape(cfg, name)
        if name.endswith(".gain"):
            model.params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            model.params[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            model.params[name] = named_rng(cfg.seed, name).normal(0.0, 0.1, size=shape)
        else:
            fan_in, fan_out = shape[1], shape[0]
            std = np.sqrt(2.0 / (fan_in + fan_out))
            model.params[name] = named_rng(cfg.seed, name).normal(0.0, std, size=shape)
    model.trainable = _param_names(cfg)
    return model


def attach_adapters(model: ToyModel, adapters: dict[int, dict[str, AdaptedLinear]]) -> None:
    """Switch the model into finetuning mode.

    Adapted projections replace their dense slots; the trainable set shrinks
    to the adapter factors plus the classifier head. Everything else,
    including layer norms and FFN matrices, is frozen.
    """
    d = model.cfg.dim
    trainable: list[str] = []
    for i, per_layer in sorted(adapters.items()):
        if i >= model.cfg.layers:
            raise ConfigError(f"adapter for layer {i} but the model has {model.cfg.layers} layers")
        for proj, layer in per_layer.items():
            if layer.base.shape != (d, d):
                raise ConfigError(
                    f"adapter base for layer{i}.{proj} has shape {layer.base.shape}, "
                    f"expected {(d, d)}"
                )
            trainable += [f"layer{i}.{proj}.a", f"layer{i}.{proj}.b"]
    model.adapters = adapters
    model.trainable = trainable + ["classifier.weight", "classifier.bias"]
    model.version += 1


def _proj_forward(slot, x_flat: np.ndarray, lc: dict, key: str) -> np.ndarray:
    if isinstance(slot, AdaptedLinear):
        u = x_flat @ slot.a.T
        lc[key + "_u"] = u
        return x_flat @ slot.base.T + slot.scale * (u @ slot.b.T)
    return x_flat @ slot.T


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, xhat, inv


def forward(model: ToyModel, tokens) -> tuple[Matrix, dict]:
    """Run the encoder; returns (logits, activation cache)."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
        raise ShapeError(f"tokens must be a nonempty 2-D integer array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeError(f"tokens must be integers, got dtype {tokens.dtype}")
    batch, seq = tokens.shape
    if seq > cfg.max_seq:
        raise ShapeError(f"sequence length {seq} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ShapeError(f"token ids must lie in [0, {cfg.vocab})")

    dh = cfg.dim // cfg.heads
    x = model.params["tok_emb"][tokens] + model.params["pos_emb"][:seq][None, :, :]
    cache: dict = {"tokens": tokens, "version": model.version, "layers": []}
    for i in range(cfg.layers):
        lc: dict = {"x_in": x}
        x_flat = x.reshape(batch * seq, cfg.dim)
        heads = []
        for proj in ("q", "k", "v"):
            flat = _proj_forward(model.projection(i, proj), x_flat, lc, proj)
            heads.append(flat.reshape(batch, seq, cfg.heads, dh).transpose(0, 2, 1, 3))
        qh, kh, vh = heads
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        exps = np.exp(scores)
        attn = exps / exps.sum(axis=-1, keepdims=True)
        ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(batch * seq, cfg.dim)
        out = _proj_forward(model.projection(i, "o"), ctx, lc, "o")
        res1 = x + out.reshape(batch, seq, cfg.dim)
        ln1, xhat1, inv1 = _layer_norm(
            res1, model.params[f"layer{i}.ln1.gain"], model.params[f"layer{i}.ln1.bias"]
        )
        pre = ln1.reshape(batch * seq, cfg.dim) @ model.params[f"layer{i}.ffn1"].T
        hidden = np.maximum(pre, 0.0)
        ffn = (hidden @ model.params[f"layer{i}.ffn2"].T).reshape(batch, seq, cfg.dim)
        res2 = ln1 + ffn
        x_out, xhat2, inv2 = _layer_norm(
            res2, model.params[f"layer{i}.ln2.gain"], model.params[f"layer{i}.ln2.bias"]
        )
        lc.update(qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx, xhat1=xhat1, inv1=inv1,
                  ln1=ln1, pre=pre, hidden=hidden, xhat2=xhat2, inv2=inv2)
        cache["layers"].append(lc)
        x = x_out

    pooled = x.mean(axis=1)
    logits = pooled @ model.params["classifier.weight"].T + model.params["classifier.bias"]
    cache["pooled"] = pooled
    cache["x_final"] = x
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward pass produced non-finite logits")
    return logits, cache


def _ln_backward(dy, xhat, inv, gain):
    dxhat = dy * gain
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _proj_backward(slot, trainable: set[str], grads: dict, stem: str,
                   dy: np.ndarray, x_flat: np.ndarray, lc: dict, key: str) -> np.ndarray:
    if isinstance(slot, AdaptedLinear):
        t = dy @ slot.b
        if f"{stem}.a" in trainable:
            grads[f"{stem}.a"] += slot.scale * (t.T @ x_flat)
            grads[f"{stem}.b"] += slot.scale * (dy.T @ lc[key + "_u"])
        return dy @ slot.base + slot.scale * (t @ slot.a)
    if stem in trainable:
        grads[stem] += dy.T @ x_flat
    return dy @ slot


def backward(model: ToyModel, cache: dict, dlogits) -> dict[str, np.ndarray]:
    """Gradients of the scalar loss for every trainable tensor.

    ``dlogits`` is the loss gradient at the logits. The cache must come from
    a forward pass of the current parameters.
    """
    if cache.get("version") != model.version:
        raise NumericError("activation cache is stale: parameters changed since the forward pass")
    cfg = model.cfg
    tokens = cache["tokens"]
    batch, seq = tokens.shape
    dh = cfg.dim // cfg.heads
    trainable = set(model.trainable)
    grads = {name: np.zeros_like(arr) for name, arr in model.trainable_tensors().items()}

    dlogits = np.asarray(dlogits, dtype=np.float64)
    if "classifier.weight" in trainable:
        grads["classifier.weight"] += dlogits.T @ cache["pooled"]
        grads["classifier.bias"] += dlogits.sum(axis=0)
    dpooled = dlogits @ model.params["classifier.weight"]
    dx = np.broadcast_to(dpooled[:, None, :] / seq, (batch, seq, cfg.dim)).copy()

    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        dres2, dg2, db2 = _ln_backward(
            dx, lc["xhat2"], lc["inv2"], model.params[f"layer{i}.ln2.gain"]
        )
        if f"layer{i}.ln2.gain" in trainable:
            grads[f"layer{i}.ln2.gain"] += dg2
            grads[f"layer{i}.ln2.bias"] += db2
        dffn = dres2.reshape(batch * seq, cfg.dim)
        dhidden = dffn @ model.params[f"layer{i}.ffn2"]
        if f"layer{i}.ffn2" in trainable:
            grads[f"layer{i}.ffn2"] += dffn.T @ lc["hidden"]
        dpre = dhidden * (lc["pre"] > 0.0)
        if f"layer{i}.ffn1" in trainable:
            grads[f"layer{i}.ffn1"] += dpre.T @ lc["ln1"].reshape(batch * seq, cfg.dim)
        dln1 = dres2 + (dpre @ model.params[f"layer{i}.ffn1"]).reshape(batch, seq, cfg.dim)
        dres1, dg1, db1 = _ln_backward(
            dln1, lc["xhat1"], lc["inv1"], model.params[f"layer{i}.ln1.gain"]
        )
        if f"layer{i}.ln1.gain" in trainable:
            grads[f"layer{i}.ln1.gain"] += dg1
            grads[f"layer{i}.ln1.bias"] += db1

        dout = dres1.reshape(batch * seq, cfg.dim)
        dctx = _proj_backward(
            model.projection(i, "o"), trainable, grads, f"layer{i}.o", dout, lc["ctx"], lc, "o"
        )
        dctx = dctx.reshape(batch, seq, cfg.heads, dh).transpose(0, 2, 1, 3)
        attn, qh, kh, vh = lc["attn"], lc["qh"], lc["kh"], lc["vh"]
        dattn = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(dh)
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 1, 3, 2) @ qh

        x_flat = lc["x_in"].reshape(batch * seq, cfg.dim)
        dx = dres1.copy()
        for proj, dheads in (("q", dqh), ("k", dkh), ("v", dvh)):
            dflat = dheads.transpose(0, 2, 1, 3).reshape(batch * seq, cfg.dim)
            dinput = _proj_backward(
                model.projection(i, proj), trainable, grads, f"layer{i}.{proj}",
                dflat, x_flat, lc, proj,
            )
            dx += dinput.reshape(batch, seq, cfg.dim)

    if "tok_emb" in trainable:
        np.add.at(grads["tok_emb"], tokens.reshape(-1), dx.reshape(batch * seq, cfg.dim))
    if "pos_emb" in trainable:
        grads["pos_emb"][:seq] += dx.sum(axis=0)
    return grads


def softmax_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient at the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    batch = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -float(logp[np.arange(batch), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(batch), labels] -= 1.0
    return loss, dlogits / batch


def predict_proba(model: ToyModel, tokens) -> Matrix:
    """Softmax class distributions for a batch of sequences."""
    logits, _ = forward(model, tokens)
    z = logits - logits.max(axis=-1, keepdims=True)
    expz = np.exp(z)
    return expz / expz.sum(axis=-1, keepdims=True)


def model_to_store(model: ToyModel) -> TensorStore:
    """Serialize every dense parameter; vectors become single-row matrices."""
    store = TensorStore()
    for name in _param_names(model.cfg):
        arr = model.params[name]
        store.add(name, arr.reshape(1, -1) if arr.ndim == 1 else arr)
    store.metadata.update(model.cfg.to_metadata())
    return store


def model_from_store(store: TensorStore) -> ToyModel:
    """Rebuild a model from a full checkpoint, validating names and shapes."""
    cfg = ModelConfig.from_metadata(store.metadata)
    model = ToyModel(cfg)
    for name in _param_names(cfg):
        if name not in store:
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        shape = _param_shape(cfg, name)
        arr = store[name]
        if len(shape) == 1:
            arr = arr.reshape(-1)
        if arr.shape != shape:
            raise ConfigError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        model.params[name] = arr.copy()
    model.trainable = _param_names(cfg)
    return model
