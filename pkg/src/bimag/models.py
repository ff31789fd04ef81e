"""Networks of the pipeline and their conditioning inputs.

All modules are plain containers of named :class:`~bimag.autodiff.Tensor`
parameters with pure forward methods. Binary checkpoints store a JSON
header followed by every parameter as little-endian float64 in
declaration order.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AttributeTable, describe
from .exceptions import SchemaError, ShapeError

CHECKPOINT_MAGIC = b"BIMAGCKP"
CHECKPOINT_VERSION = 1


class Module:
    """Ordered collection of named parameters."""

    def parameters(self) -> List[Tensor]:
        raise NotImplementedError

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def clone(self):
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, bias: bool = True):
        self.W = ad.glorot(n_in, n_out, rng, f"{name}.W")
        self.b = ad.zeros(1, n_out, f"{name}.b") if bias else None

    @property
    def shape(self):
        return self.W.shape

    def parameters(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.W, self.b)


class MLP(Module):
    """Stack of linear layers with ReLU between them.

    ``final_relu`` also rectifies the last layer's output.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str, final_relu: bool = False):
        if len(sizes) < 2:
            raise ValueError(f"an MLP needs at least input and output sizes, got {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.final_relu = final_relu
        self.layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = ad.relu(x)
        return x


def _as_tensor(x, cols: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[1] != cols:
        raise ShapeError(f"{what}: expected {cols} columns, got shape {t.shape}")
    return t


class FeatureExtractor(Module):
    """ReLU MLP from raw inputs to nonnegative features."""

    def __init__(self, input_dim: int, feature_dim: int, hidden: Sequence[int] = (64, 64),
                 rng: Optional[np.random.Generator] = None, name: str = "F"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_dim, self.feature_dim, self.hidden = int(input_dim), int(feature_dim), tuple(hidden)
        self.net = MLP((input_dim, *hidden, feature_dim), rng, name, final_relu=True)

    def parameters(self):
        return self.net.parameters()

    def config(self):
        return {"input_dim": self.input_dim, "feature_dim": self.feature_dim, "hidden": list(self.hidden)}

    def __call__(self, x) -> Tensor:
        return self.net(_as_tensor(x, self.input_dim, "feature extractor input"))


def extract_features(F: FeatureExtractor, X) -> np.ndarray:
    return F(np.asarray(X, dtype=np.float64)).data


class JointClassifier(Module):
    """Linear scores ``z W (+ b)`` over a fixed class universe."""

    def __init__(self, feature_dim: int, n_classes: int, bias: bool = False,
                 rng: Optional[np.random.Generator] = None, name: str = "C"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.feature_dim, self.n_classes, self.bias = int(feature_dim), int(n_classes), bool(bias)
        self.linear = Linear(feature_dim, n_classes, rng, name, bias=bias)

    def parameters(self):
        return self.linear.parameters()

    def config(self):
        return {"feature_dim": self.feature_dim, "n_classes": self.n_classes, "bias": self.bias}

    def __call__(self, z) -> Tensor:
        return self.linear(_as_tensor(z, self.feature_dim, "classifier input"))


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class on ties
    return np.argmax(scores, axis=1)


def classify(C: JointClassifier, Z) -> Tuple[np.ndarray, np.ndarray]:
    scores = C(np.asarray(Z, dtype=np.float64)).data
    return scores, argmax_lowest(scores)


class ConditionMode(str, enum.Enum):
    CLASS = "class"
    ATTR = "attr"
    CLASS_ATTR = "class_attr"

    def dim(self, n_classes: int, n_attributes: int) -> int:
        return {ConditionMode.CLASS: n_classes,
                ConditionMode.ATTR: n_attributes,
                ConditionMode.CLASS_ATTR: n_classes + n_attributes}[self]


def build_condition(mode, y, table: Optional[AttributeTable], n_classes: Optional[int] = None) -> np.ndarray:
    """Generator condition for class ``y``: one-hot label, attributes, or both.

    A scalar ``y`` gives a vector; an array of labels gives one row per label.
    """
    mode = ConditionMode(mode)
    scalar = np.ndim(y) == 0
    ys = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if n_classes is None:
        if table is None:
            raise ValueError("n_classes is required when no attribute table is given")
        n_classes = table.n_classes
    if ys.size and (ys.min() < 0 or ys.max() >= n_classes):
        raise IndexError(f"class index out of range [0, {n_classes}): {y}")
    parts = []
    if mode in (ConditionMode.CLASS, ConditionMode.CLASS_ATTR):
        parts.append(np.eye(n_classes)[ys])
    if mode in (ConditionMode.ATTR, ConditionMode.CLASS_ATTR):
        if table is None:
            raise ValueError(f"condition mode {mode.value!r} needs an attribute table")
        parts.append(describe(table, ys))
    cond = np.concatenate(parts, axis=1)
    return cond[0] if scalar else cond


class CvaeModel(Module):
    """Conditional VAE over features.

    Encoder: (z, cond) -> hidden -> hidden -> (mu, logvar), three layers.
    Decoder: (r, cond) -> hidden -> feature, two layers, linear output.
    """

    def __init__(self, feature_dim: int, cond_dim: int, latent_dim: int = 32,
                 enc_hidden: Sequence[int] = (256, 128), dec_hidden: Sequence[int] = (256,),
                 rng: Optional[np.random.Generator] = None, encoder_rng: Optional[np.random.Generator] = None,
                 name: str = "vae"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.feature_dim, self.cond_dim, self.latent_dim = int(feature_dim), int(cond_dim), int(latent_dim)
        self.enc_hidden, self.dec_hidden = tuple(enc_hidden), tuple(dec_hidden)
        self.name = name
        self.decoder = MLP((latent_dim + cond_dim, *dec_hidden, feature_dim), rng, f"{name}.dec")
        self.reset_encoder(rng if encoder_rng is None else encoder_rng)

    def reset_encoder(self, rng: np.random.Generator):
        self.encoder = MLP((self.feature_dim + self.cond_dim, *self.enc_hidden, 2 * self.latent_dim),
                           rng, f"{self.name}.enc")

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def config(self):
        return {"feature_dim": self.feature_dim, "cond_dim": self.cond_dim, "latent_dim": self.latent_dim,
                "enc_hidden": list(self.enc_hidden), "dec_hidden": list(self.dec_hidden)}

    def encode(self, z, cond) -> Tuple[Tensor, Tensor]:
        z = _as_tensor(z, self.feature_dim, "encoder features")
        cond = _as_tensor(cond, self.cond_dim, "encoder condition")
        if z.shape[0] != cond.shape[0]:
            raise ShapeError(f"encode: {z.shape[0]} feature rows vs {cond.shape[0]} condition rows")
        h = self.encoder(ad.concat([z, cond]))
        L = self.latent_dim
        mu = ad.columns(h, 0, L)
        logvar = ad.clamp(ad.columns(h, L, 2 * L), ad.LOGVAR_MIN, ad.LOGVAR_MAX)
        return mu, logvar

    def decode(self, r, cond) -> Tensor:
        r = _as_tensor(r, self.latent_dim, "decoder latent")
        cond = _as_tensor(cond, self.cond_dim, "decoder condition")
        if r.shape[0] != cond.shape[0]:
            raise ShapeError(f"decode: {r.shape[0]} latent rows vs {cond.shape[0]} condition rows")
        return self.decoder(ad.concat([r, cond]))


def encode(model: CvaeModel, z, cond):
    return model.encode(z, cond)


def decode(model: CvaeModel, r, cond) -> np.ndarray:
    return model.decode(r, cond).data


# ---------------------------------------------------------------------------
# bundles and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Models in force after one time step.

    ``generators`` maps a role ('main', or 'backward'/'forward' for the
    asymmetric variant) to a conditional VAE and ``modes`` to its condition.
    """

    feature_extractor: FeatureExtractor
    classifier: Optional[JointClassifier] = None
    generators: Dict[str, CvaeModel] = field(default_factory=dict)
    modes: Dict[str, str] = field(default_factory=dict)

    def modules(self):
        out = [("feature_extractor", self.feature_extractor)]
        if self.classifier is not None:
            out.append(("classifier", self.classifier))
        out.extend((f"generator.{role}", self.generators[role]) for role in sorted(self.generators))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, m in self.modules() for p in m.parameters()]


def save_bundle(bundle: ModelBundle, path) -> None:
    header = {
        "feature_extractor": bundle.feature_extractor.config(),
        "classifier": None if bundle.classifier is None else bundle.classifier.config(),
        "generators": {role: m.config() for role, m in sorted(bundle.generators.items())},
        "modes": dict(sorted(bundle.modes.items())),
        "tensors": [[p.name, *p.shape] for p in bundle.parameters()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in bundle.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    fe = header["feature_extractor"]
    bundle = ModelBundle(FeatureExtractor(fe["input_dim"], fe["feature_dim"], fe["hidden"]))
    if header["classifier"] is not None:
        c = header["classifier"]
        bundle.classifier = JointClassifier(c["feature_dim"], c["n_classes"], bias=c["bias"])
    for role, g in header["generators"].items():
        bundle.generators[role] = CvaeModel(g["feature_dim"], g["cond_dim"], g["latent_dim"],
                                            g["enc_hidden"], g["dec_hidden"], name=f"vae.{role}")
    bundle.modes = header["modes"]
    params = bundle.parameters()
    declared = header["tensors"]
    if [[p.name, *p.shape] for p in params] != [list(d) for d in declared]:
        raise SchemaError(f"{path}: tensor layout does not match the declared architecture")
    offset = 16 + hlen
    for p in params:
        n = p.data.size
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise SchemaError(f"{path}: truncated parameter data for {p.name}")
        p.data = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(p.shape)
        offset += 8 * n
    if offset != len(raw):
        raise SchemaError(f"{path}: {len(raw) - offset} trailing bytes")
    return bundle
