"""Adapted linear layers and the four low-rank initialization schemes.

An adapted layer computes x (base + scale * b a)^T. The schemes differ only
in how base, b, a, and scale are filled at initialization:

    lora    base = W, b = 0, a ~ Gaussian(0, 1/r), scale = alpha/r
    pissa   principal split of W: b a carries the top-r triples, base = residual
    milora  minor split of W: b a carries the bottom-r triples, base = residual
    ailora  principal split on q, minor split on v, lora rule on k and o

The SVD-backed schemes use scale = 1 because the split is an exact additive
decomposition; applying alpha/r there would break the identity
base + b a == W at step 0. Every scheme therefore starts as the exact
pretrained function.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .factorization import split_minor, split_principal
from .seeding import named_rng
from .store import TensorStore
from .tensor import Matrix, as_matrix

PROJECTIONS = ("q", "k", "v", "o")

_LAYER_NAME = re.compile(r"^layer(\d+)\.([qkvo])$")


class AdapterScheme(str, Enum):
    LORA = "lora"
    PISSA = "pissa"
    MILORA = "milora"
    AILORA = "ailora"


def parse_ranks(text: str) -> dict[str, int]:
    """Parse a rank spec like ``q=8,v=8`` into a full {q,k,v,o} map.

    Unmentioned projections get rank 0 (frozen).
    """
    ranks = dict.fromkeys(PROJECTIONS, 0)
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad rank entry {part!r}, expected like q=8")
        key, _, value = part.partition("=")
        key = key.strip().lower()
        if key not in PROJECTIONS:
            raise ConfigError(f"unknown projection {key!r}, expected one of {PROJECTIONS}")
        try:
            r = int(value)
        except ValueError:
            raise ConfigError(f"rank for {key!r} must be an integer, got {value!r}") from None
        if r < 0:
            raise ConfigError(f"rank for {key!r} must be nonnegative, got {r}")
        ranks[key] = r
    return ranks


def format_ranks(ranks: dict[str, int]) -> str:
    return ",".join(f"{p}={ranks.get(p, 0)}" for p in PROJECTIONS)


@dataclass
class AdapterConfig:
    """Scheme, per-projection ranks, scaling alpha, and the init seed."""

    scheme: AdapterScheme
    ranks: dict[str, int] = field(default_factory=lambda: {"q": 8, "v": 8})
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.scheme = AdapterScheme(self.scheme)
        full = dict.fromkeys(PROJECTIONS, 0)
        for key, r in self.ranks.items():
            key = str(key).lower()
            if key not in PROJECTIONS:
                raise ConfigError(f"unknown projection {key!r}, expected one of {PROJECTIONS}")
            if not isinstance(r, (int, np.integer)) or isinstance(r, bool) or r < 0:
                raise ConfigError(f"rank for {key!r} must be a nonnegative integer, got {r!r}")
            full[key] = int(r)
        self.ranks = full
        if all(r == 0 for r in self.ranks.values()):
            raise ConfigError("at least one projection rank must be positive")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be a positive real, got {self.alpha}")
        self.seed = int(self.seed)


@dataclass
class AdaptedLinear:
    """Frozen base plus trainable low-rank factors for one projection."""

    base: Matrix
    b: Matrix
    a: Matrix
    scale: float
    kind: str

    def effective_weight(self) -> Matrix:
        return merge(self)


def merge(layer: AdaptedLinear) -> Matrix:
    """Collapse the layer to a single dense weight base + scale * b a."""
    return as_matrix(layer.base + layer.scale * (layer.b @ layer.a))


def adapted_forward(layer: AdaptedLinear, x) -> Matrix:
    """Apply the adapted projection to batch-of-rows activations ``x``."""
    x = as_matrix(x)
    if x.shape[1] != layer.base.shape[1]:
        raise ShapeError(
            f"activation width {x.shape[1]} does not match projection input {layer.base.shape[1]}"
        )
    return x @ layer.base.T + layer.scale * ((x @ layer.a.T) @ layer.b.T)


def _scale_for(scheme: AdapterScheme, proj: str, alpha: float, r: int) -> float:
    if scheme is AdapterScheme.LORA:
        return alpha / r
    if scheme is AdapterScheme.AILORA and proj not in ("q", "v"):
        return alpha / r
    return 1.0


def _init_one(w: Matrix, scheme: AdapterScheme, proj: str, r: int, alpha: float,
              seed: int, name: str) -> AdaptedLinear:
    m, n = w.shape
    if r > min(m, n):
        raise ConfigError(f"rank {r} exceeds min dimension {min(m, n)} of {name!r}")
    scale = _scale_for(scheme, proj, alpha, r)
    svd_kind = None
    if scheme is AdapterScheme.PISSA:
        svd_kind = "principal"
    elif scheme is AdapterScheme.MILORA:
        svd_kind = "minor"
    elif scheme is AdapterScheme.AILORA:
        if proj == "q":
            svd_kind = "principal"
        elif proj == "v":
            svd_kind = "minor"
    if svd_kind is None:
        rng = named_rng(seed, f"{name}.a")
        a = rng.normal(0.0, np.sqrt(1.0 / r), size=(r, n))
        b = np.zeros((m, r))
        return AdaptedLinear(base=w.copy(), b=b, a=a, scale=scale, kind=proj)
    s = split_principal(w, r) if svd_kind == "principal" else split_minor(w, r)
    return AdaptedLinear(base=s.residual, b=s.b, a=s.a, scale=scale, kind=proj)


def init_adapters(weights: TensorStore, cfg: AdapterConfig) -> dict[int, dict[str, AdaptedLinear]]:
    """Build adapted layers for every ranked projection found in ``weights``.

    Expects projection weights named ``layer{i}.{q|k|v|o}``. Returns a map
    layer index -> projection kind -> AdaptedLinear covering exactly the
    projections with positive rank. Projections with rank 0 stay frozen and
    get no entry.
    """
    layers = sorted(
        {int(match.group(1)) for name in weights.names() if (match := _LAYER_NAME.match(name))}
    )
    if not layers:
        raise ConfigError("weights contain no tensors named like 'layer0.q'")
    adapters: dict[int, dict[str, AdaptedLinear]] = {}
    for i in layers:
        per_layer: dict[str, AdaptedLinear] = {}
        for proj in PROJECTIONS:
            r = cfg.ranks[proj]
            if r == 0:
                continue
            name = f"layer{i}.{proj}"
            if name not in weights:
                raise ConfigError(f"missing tensor {name!r} in the weight store")
            per_layer[proj] = _init_one(
                weights[name], cfg.scheme, proj, r, cfg.alpha, cfg.seed, name
            )
        adapters[i] = per_layer
    return adapters


def trainable_parameter_count(cfg: AdapterConfig, layers: int, dims) -> int:
    """Total adapter parameters: sum over adapted projections of r (m + n).

    ``dims`` is either a single integer d (every projection is d x d) or a
    map from projection kind to an (m, n) shape. Classifier parameters are
    not counted; the budget covers adapters only.
    """
    if layers < 1:
        raise ConfigError(f"layer count must be positive, got {layers}")
    if isinstance(dims, (int, np.integer)):
        shapes = {p: (int(dims), int(dims)) for p in PROJECTIONS}
    else:
        shapes = {p: (int(m), int(n)) for p, (m, n) in dims.items()}
    total = 0
    for proj, r in cfg.ranks.items():
        if r == 0:
            continue
        if proj not in shapes:
            raise ConfigError(f"no dimensions given for ranked projection {proj!r}")
        m, n = shapes[proj]
        total += r * (m + n)
    return int(layers) * total


def adapter_store(adapters: dict[int, dict[str, AdaptedLinear]], cfg: AdapterConfig) -> TensorStore:
    """Serialize adapters into a TensorStore with the checkpoint naming scheme."""
    store = TensorStore()
    for i in sorted(adapters):
        for proj in PROJECTIONS:
            layer = adapters[i].get(proj)
            if layer is None:
                continue
            store.add(f"layer{i}.{proj}.a", layer.a)
            store.add(f"layer{i}.{proj}.b", layer.b)
            store.add(f"layer{i}.{proj}.base", layer.base)
    store.metadata["scheme"] = cfg.scheme.value
    store.metadata["alpha"] = repr(float(cfg.alpha))
    store.metadata["ranks"] = format_ranks(cfg.ranks)
    return store


def load_adapters(store: TensorStore) -> tuple[dict[int, dict[str, AdaptedLinear]], AdapterConfig]:
    """Rebuild adapters and their config from a checkpoint store."""
    try:
        scheme = AdapterScheme(store.metadata["scheme"])
        alpha = float(store.metadata["alpha"])
        ranks = parse_ranks(store.metadata["ranks"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"adapter checkpoint metadata is incomplete or invalid: {exc}") from exc
    cfg = AdapterConfig(scheme=scheme, ranks=ranks, alpha=alpha)
    adapters: dict[int, dict[str, AdaptedLinear]] = {}
    pattern = re.compile(r"^layer(\d+)\.([qkvo])\.a$")
    for name in store.names():
        match = pattern.match(name)
        if not match:
            continue
        i = int(match.group(1))
        proj = match.group(2)
        stem = f"layer{i}.{proj}"
        for suffix in (".b", ".base"):
            if stem + suffix not in store:
                raise ConfigError(f"adapter checkpoint is missing {stem + suffix!r}")
        a = store[stem + ".a"]
        r = a.shape[0]
        if cfg.ranks.get(proj, 0) != r:
            raise ConfigError(
                f"rank mismatch for {stem!r}: metadata says {cfg.ranks.get(proj, 0)}, tensor has {r}"
            )
        layer = AdaptedLinear(
            base=store[stem + ".base"],
            b=store[stem + ".b"],
            a=a,
            scale=_scale_for(scheme, proj, alpha, r),
            kind=proj,
        )
        adapters.setdefault(i, {})[proj] = layer
    if not adapters:
        raise ConfigError("adapter checkpoint contains no adapter tensors")
    return adapters, cfg
