"""The three training stages run at every time step.

1. ``train_feature_extractor``: cross-entropy through an auxiliary head over
   the current task, plus l2 distillation toward the frozen previous extractor.
2. ``train_cvae``: conditional VAE on current-task features (fresh encoder,
   decoder warm-started), plus replay alignment of the decoder on past
   conditions.
3. ``synthesize_features`` + ``train_joint_classifier``: a classifier over the
   whole class universe trained on real current features and synthetic
   features of every other reachable class.

Every source of randomness comes from :func:`stream`, keyed by
``(seed, t, stage, role)``, so that variants sharing a sub-computation draw
identical numbers for it.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .data import AttributeTable
from .exceptions import CapabilityError, ConfigError
from .models import (ConditionMode, CvaeModel, FeatureExtractor, JointClassifier, Linear, ModelBundle,
                     build_condition, extract_features)

# stage keys for random streams
INIT_FEATURES, INIT_AUX, TRAIN_FEATURES = 1, 2, 3
INIT_DECODER, INIT_ENCODER, TRAIN_VAE = 4, 5, 6
SYNTHESIS, INIT_CLASSIFIER, TRAIN_CLASSIFIER = 7, 8, 9

ROLE_KEYS = {"main": 0, "backward": 0, "forward": 1}


def stream(seed: int, t: int, stage: int, role: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(t), int(stage), int(role)])


@dataclass
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    synth_per_class: int = 300
    lr_feature: float = 1e-4
    lr_vae: float = 1e-3
    lr_classifier: float = 1e-3
    epochs_feature: int = 50
    epochs_vae: int = 100
    epochs_classifier: int = 50
    batch_size: int = 64
    feature_dim: int = 32
    feature_hidden: Tuple[int, ...] = (64, 64)
    latent_dim: int = 32
    enc_hidden: Tuple[int, ...] = (256, 128)
    dec_hidden: Tuple[int, ...] = (256,)
    classifier_bias: bool = False
    classifier_warm_start: bool = False
    seed: int = 0

    def __post_init__(self):
        self.feature_hidden = tuple(int(h) for h in self.feature_hidden)
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)

    def validate(self):
        for name in ("lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", f"train.{name}")
        for name in ("lr_feature", "lr_vae", "lr_classifier"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be > 0, got {getattr(self, name)}", f"train.{name}")
        for name in ("synth_per_class", "epochs_feature", "epochs_vae", "epochs_classifier", "batch_size",
                     "feature_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", f"train.{name}")
        return self

    def replace(self, **changes) -> "TrainingConfig":
        values = asdict(self)
        values.update(changes)
        return TrainingConfig(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


class Variant(str, enum.Enum):
    CLASS = "class_bimag"
    ATTR = "attr_bimag"
    CLASS_ATTR = "class_attr_bimag"
    ASYM = "asym_bimag"
    JOINT = "joint_training"

    @property
    def generator_modes(self) -> Dict[str, ConditionMode]:
        return {
            Variant.CLASS: {"main": ConditionMode.CLASS},
            Variant.ATTR: {"main": ConditionMode.ATTR},
            Variant.CLASS_ATTR: {"main": ConditionMode.CLASS_ATTR},
            Variant.ASYM: {"backward": ConditionMode.CLASS, "forward": ConditionMode.ATTR},
            Variant.JOINT: {},
        }[self]

    @property
    def needs_attributes(self) -> bool:
        return any(m is not ConditionMode.CLASS for m in self.generator_modes.values())


def can_imagine(mode: ConditionMode, table: Optional[AttributeTable]) -> bool:
    """Whether a generator with this condition can produce never-observed classes.

    One-hot labels say nothing about an unseen class, and neither does an
    identity attribute table.
    """
    mode = ConditionMode(mode)
    if mode is ConditionMode.CLASS:
        return False
    return table is not None and not table.is_identity


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _require_data(X, y, stage):
    if len(X) == 0 or len(y) == 0:
        raise ValueError(f"{stage}: no training samples for this task")
    if len(X) != len(y):
        raise ValueError(f"{stage}: {len(X)} inputs but {len(y)} labels")


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def train_feature_extractor(F_prev: Optional[FeatureExtractor], X: np.ndarray, y: np.ndarray,
                            cfg: TrainingConfig, t: int = 1, seed: Optional[int] = None):
    """Fit F_t on the current task with an auxiliary head; returns ``(F_t, log)``.

    The auxiliary head spans only the classes present in ``y`` and is
    discarded. Distillation toward ``F_prev`` uses current-task inputs only.
    """
    _require_data(X, y, "feature extraction")
    seed = cfg.seed if seed is None else seed
    X = np.asarray(X, dtype=np.float64)
    local_classes, y_local = np.unique(y, return_inverse=True)
    if F_prev is None:
        F = FeatureExtractor(X.shape[1], cfg.feature_dim, cfg.feature_hidden, rng=stream(seed, t, INIT_FEATURES))
        anchors = None
    else:
        F = F_prev.clone()
        with ad.no_grad():
            anchors = extract_features(F_prev, X)
    distill = anchors is not None and cfg.lambda1 > 0
    aux = Linear(F.feature_dim, len(local_classes), stream(seed, t, INIT_AUX), "aux")
    opt_f = Adam(F.parameters(), lr=cfg.lr_feature)
    opt_aux = Adam(aux.parameters(), lr=cfg.lr_classifier)
    rng = stream(seed, t, TRAIN_FEATURES)
    losses = []
    for _ in range(cfg.epochs_feature):
        total, count = 0.0, 0
        for idx in _batches(len(X), cfg.batch_size, rng):
            z = F(X[idx])
            loss = ad.softmax_cross_entropy(aux(z), y_local[idx])
            if distill:
                loss = loss + cfg.lambda1 * ad.l2_distance(z, Tensor(anchors[idx]))
            opt_f.zero_grad()
            opt_aux.zero_grad()
            ad.backward(loss)
            opt_f.step()
            opt_aux.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
    with ad.no_grad():
        pred = np.argmax(aux(F(X)).data, axis=1)
    return F, {"loss": losses, "aux_train_accuracy": float(np.mean(pred == y_local))}


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def train_cvae(F_t: FeatureExtractor, X: np.ndarray, y: np.ndarray, D_prev: Optional[CvaeModel],
               mode, table: Optional[AttributeTable], n_classes: int, past_classes: Sequence[int],
               cfg: TrainingConfig, t: int = 1, role: str = "main", seed: Optional[int] = None):
    """Fit a conditional VAE on ``F_t(X)``; returns ``(vae, log)``.

    The encoder is always fresh; the decoder starts from ``D_prev`` when
    given and is tied to it on ``past_classes`` by the replay-alignment term.
    ``F_t`` is only read.
    """
    _require_data(X, y, "generator training")
    mode = ConditionMode(mode)
    if mode is not ConditionMode.CLASS and table is None:
        raise ConfigError(f"condition mode {mode.value!r} needs an attribute table")
    seed = cfg.seed if seed is None else seed
    rk = ROLE_KEYS[role]
    with ad.no_grad():
        Z = extract_features(F_t, X)
    cond = build_condition(mode, y, table, n_classes)
    cond_dim = mode.dim(n_classes, table.n_attributes if table is not None else 0)
    if D_prev is None:
        vae = CvaeModel(F_t.feature_dim, cond_dim, cfg.latent_dim, cfg.enc_hidden, cfg.dec_hidden,
                        rng=stream(seed, t, INIT_DECODER, rk), encoder_rng=stream(seed, t, INIT_ENCODER, rk),
                        name=f"vae.{role}")
    else:
        if D_prev.cond_dim != cond_dim:
            raise ConfigError(f"previous decoder expects {D_prev.cond_dim}-dim conditions, mode "
                              f"{mode.value!r} builds {cond_dim}")
        vae = D_prev.clone()
        vae.reset_encoder(stream(seed, t, INIT_ENCODER, rk))
    past = np.asarray(past_classes, dtype=np.int64)
    replay = D_prev is not None and cfg.lambda2 > 0 and len(past) > 0
    opt = Adam(vae.parameters(), lr=cfg.lr_vae)
    rng = stream(seed, t, TRAIN_VAE, rk)
    elbo_hist, loss_hist = [], []
    L = cfg.latent_dim
    for _ in range(cfg.epochs_vae):
        tot_elbo = tot_loss = 0.0
        count = 0
        for idx in _batches(len(Z), cfg.batch_size, rng):
            zb, cb = Tensor(Z[idx]), cond[idx]
            mu, logvar = vae.encode(zb, cb)
            r = ad.reparameterize(mu, logvar, rng)
            elbo = ad.l2_distance(vae.decode(r, cb), zb) + ad.gaussian_kl(mu, logvar)
            loss = elbo
            if replay:
                pc = rng.choice(past, size=len(idx))
                rr = rng.standard_normal((len(idx), L))
                c_past = build_condition(mode, pc, table, n_classes)
                with ad.no_grad():
                    target = D_prev.decode(rr, c_past)
                loss = loss + cfg.lambda2 * ad.l2_distance(vae.decode(rr, c_past), target)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            tot_elbo += elbo.item() * len(idx)
            tot_loss += loss.item() * len(idx)
            count += len(idx)
        elbo_hist.append(tot_elbo / count)
        loss_hist.append(tot_loss / count)
    return vae, {"elbo": elbo_hist, "loss": loss_hist}


def decoder_drift(current: CvaeModel, previous: CvaeModel, mode, table, n_classes: int,
                  classes: Sequence[int], n_per_class: int = 100, seed: int = 0) -> float:
    """Mean squared l2 gap between two decoders on shared noise over ``classes``."""
    rng = np.random.default_rng(seed)
    ys = np.repeat(np.asarray(classes, dtype=np.int64), n_per_class)
    r = rng.standard_normal((len(ys), current.latent_dim))
    cond = build_condition(mode, ys, table, n_classes)
    with ad.no_grad():
        return ad.l2_distance(current.decode(r, cond), previous.decode(r, cond)).item()


# ---------------------------------------------------------------------------
# stage 3
# ---------------------------------------------------------------------------

def synthesize_features(bundle: ModelBundle, targets: Sequence[int], table: Optional[AttributeTable],
                        n_classes: int, n_per_class: int, seen: Sequence[int],
                        rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Decode ``n_per_class`` features for every class in ``targets``.

    Classes in ``seen`` are past classes (backward generation); the rest are
    future classes (forward generation). With separate 'backward'/'forward'
    generators each direction uses its own; otherwise the 'main' one serves
    both. Asking a generator that cannot imagine for a future class raises
    :class:`CapabilityError`.
    """
    targets = [int(c) for c in targets]
    feature_dim = bundle.feature_extractor.feature_dim
    if not targets:
        return np.empty((0, feature_dim)), np.empty(0, dtype=np.int64)
    seen = set(int(c) for c in seen)
    Zs, ys = [], []
    for y in targets:
        past = y in seen
        role = "main" if "main" in bundle.generators else ("backward" if past else "forward")
        if role not in bundle.generators:
            raise CapabilityError(f"no generator available for class {y}")
        mode = ConditionMode(bundle.modes[role])
        if not past and not can_imagine(mode, table):
            raise CapabilityError(
                f"class {y} has not been observed and a {mode.value!r}-conditioned generator "
                "cannot imagine unseen classes")
        vae = bundle.generators[role]
        cond = build_condition(mode, np.full(n_per_class, y), table, n_classes)
        r = rng.standard_normal((n_per_class, vae.latent_dim))
        with ad.no_grad():
            Zs.append(vae.decode(r, cond).data)
        ys.append(np.full(n_per_class, y, dtype=np.int64))
    return np.concatenate(Zs), np.concatenate(ys)


def train_joint_classifier(Z_real: np.ndarray, y_real: np.ndarray, Z_syn: np.ndarray, y_syn: np.ndarray,
                           n_classes: int, cfg: TrainingConfig, t: int = 1, seed: Optional[int] = None,
                           init: Optional[JointClassifier] = None):
    """Softmax classifier over all ``n_classes`` on real plus synthetic features."""
    seed = cfg.seed if seed is None else seed
    Z = np.concatenate([np.asarray(Z_real, dtype=np.float64).reshape(-1, Z_real.shape[-1]), Z_syn])
    y = np.concatenate([np.asarray(y_real, dtype=np.int64), y_syn])
    _require_data(Z, y, "classifier training")
    if init is not None:
        clf = init.clone()
    else:
        clf = JointClassifier(Z.shape[1], n_classes, bias=cfg.classifier_bias, rng=stream(seed, t, INIT_CLASSIFIER))
    opt = Adam(clf.parameters(), lr=cfg.lr_classifier)
    rng = stream(seed, t, TRAIN_CLASSIFIER)
    losses = []
    for _ in range(cfg.epochs_classifier):
        total = 0.0
        for idx in _batches(len(Z), cfg.batch_size, rng):
            loss = ad.softmax_cross_entropy(clf(Z[idx]), y[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(Z))
    return clf, {"loss": losses}
