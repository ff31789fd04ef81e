import numpy as np
import pytest

from bimag import autodiff as ad
from bimag.autodiff import Adam, Tensor
from bimag.data import AttributeTable, BenchmarkSpec, generate_benchmark, split_tasks
from bimag.exceptions import CapabilityError, ConfigError
from bimag.estimator import BImagClassifier
from bimag.experiment import StageError, run_bcl
from bimag.metrics import autac, task_groups
from bimag.models import (CvaeModel, FeatureExtractor, Linear, ModelBundle, build_condition, decode,
                          extract_features)
from bimag.training import (INIT_AUX, TRAIN_FEATURES, TrainingConfig, Variant, can_imagine, decoder_drift,
                            stream, synthesize_features, train_cvae, train_feature_extractor,
                            train_joint_classifier)


class Passthrough:
    """Stand-in extractor that hands raw inputs to the generator unchanged."""

    def __init__(self, dim):
        self.feature_dim = dim

    def __call__(self, x):
        return Tensor(x)


def l2(a, b):
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


# -- configuration ----------------------------------------------------------------

def test_defaults():
    cfg = TrainingConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.synth_per_class) == (1.0, 0.1, 300)
    assert (cfg.lr_feature, cfg.lr_vae, cfg.lr_classifier) == (1e-4, 1e-3, 1e-3)
    assert (cfg.epochs_feature, cfg.epochs_vae, cfg.epochs_classifier, cfg.batch_size) == (50, 100, 50, 64)
    assert cfg.classifier_bias is False and cfg.classifier_warm_start is False


@pytest.mark.parametrize("changes, key", [(dict(lambda1=-1.0), "train.lambda1"), (dict(lr_vae=0.0), "train.lr_vae"),
                                          (dict(batch_size=0), "train.batch_size"),
                                          (dict(synth_per_class=0), "train.synth_per_class")])
def test_invalid_config_names_key(changes, key):
    with pytest.raises(ConfigError) as info:
        TrainingConfig(**changes).validate()
    assert info.value.key == key


def test_variant_generators():
    assert set(Variant.CLASS.generator_modes) == {"main"}
    assert set(Variant.ASYM.generator_modes) == {"backward", "forward"}
    assert Variant.JOINT.generator_modes == {}
    assert not Variant.CLASS.needs_attributes and Variant.ASYM.needs_attributes


def test_imagination_capability():
    table = AttributeTable([[1, 0], [0, 1], [1, 1]])
    assert not can_imagine("class", table)
    assert can_imagine("attr", table) and can_imagine("class_attr", table)
    assert not can_imagine("attr", AttributeTable.identity(3))


# -- stage 1 ------------------------------------------------------------------------

def test_feature_stage_needs_data(fast_config):
    with pytest.raises(ValueError, match="no training samples"):
        train_feature_extractor(None, np.empty((0, 3)), np.empty(0), fast_config)


def test_without_distillation_it_is_plain_fine_tuning(toy_world, fast_config):
    seq, _ = toy_world
    A, B = seq[0], seq[1]
    cfg = fast_config.replace(lambda1=0.0, epochs_feature=4)
    F1, _ = train_feature_extractor(None, A.X_train, A.y_train, cfg, t=1)
    F2, _ = train_feature_extractor(F1, B.X_train, B.y_train, cfg, t=2)

    # reference: cross-entropy only, same starting point, heads and batches
    F = F1.clone()
    classes, y_local = np.unique(B.y_train, return_inverse=True)
    aux = Linear(F.feature_dim, len(classes), stream(cfg.seed, 2, INIT_AUX), "aux")
    opt_f, opt_aux = Adam(F.parameters(), cfg.lr_feature), Adam(aux.parameters(), cfg.lr_classifier)
    rng = stream(cfg.seed, 2, TRAIN_FEATURES)
    for _ in range(cfg.epochs_feature):
        order = rng.permutation(len(y_local))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = ad.softmax_cross_entropy(aux(F(B.X_train[idx])), y_local[idx])
            opt_f.zero_grad()
            opt_aux.zero_grad()
            ad.backward(loss)
            opt_f.step()
            opt_aux.step()
    assert F.fingerprint() == F2.fingerprint()


def test_huge_distillation_weight_freezes_features(toy_world):
    seq, _ = toy_world
    A, B = seq[0], seq[1]
    cfg = TrainingConfig(epochs_feature=10)
    F1, _ = train_feature_extractor(None, A.X_train, A.y_train, cfg, t=1)
    F2, _ = train_feature_extractor(F1, B.X_train, B.y_train, cfg.replace(lambda1=1e6), t=2)
    for X in (B.X_test, A.X_test):  # held out from stage-1 training at t=2
        with ad.no_grad():
            assert l2(extract_features(F2, X), extract_features(F1, X)) < 1e-2


def test_previous_extractor_is_not_modified(toy_world, fast_config):
    seq, _ = toy_world
    F1, _ = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, fast_config, t=1)
    before = F1.fingerprint()
    train_feature_extractor(F1, seq[1].X_train, seq[1].y_train, fast_config, t=2)
    assert F1.fingerprint() == before


@pytest.mark.slow
def test_auxiliary_head_learns_task_a(toy_world):
    seq, _ = toy_world
    _, log = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, TrainingConfig(), t=1)
    assert log["aux_train_accuracy"] >= 0.95


# -- stage 2 --------------------------------------------------------------------------

def test_elbo_strictly_decreases_early(toy_world):
    seq, table = toy_world
    cfg = TrainingConfig(epochs_feature=5, epochs_vae=10, lambda2=0.0)
    F, _ = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, cfg, t=1)
    _, log = train_cvae(F, seq[0].X_train, seq[0].y_train, None, "attr", table, 10, [], cfg, t=1)
    elbo = log["elbo"]
    assert len(elbo) == 10
    assert all(b < a for a, b in zip(elbo, elbo[1:]))


@pytest.mark.parametrize("mode", ["class", "attr"])
def test_huge_replay_weight_pins_past_decoder(toy_world, mode):
    seq, table = toy_world
    cfg = TrainingConfig(epochs_feature=5, epochs_vae=30)
    F, _ = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, cfg, t=1)
    D1, _ = train_cvae(F, seq[0].X_train, seq[0].y_train, None, mode, table, 10, [], cfg, t=1)
    D2, _ = train_cvae(F, seq[1].X_train, seq[1].y_train, D1, mode, table, 10, seq[0].classes,
                       cfg.replace(lambda2=1e3), t=2)
    assert decoder_drift(D2, D1, mode, table, 10, seq[0].classes) < 1e-2
    # without the penalty the decoder moves much further
    D_free, _ = train_cvae(F, seq[1].X_train, seq[1].y_train, D1, mode, table, 10, seq[0].classes,
                           cfg.replace(lambda2=0.0), t=2)
    assert decoder_drift(D_free, D1, mode, table, 10, seq[0].classes) > 10 * decoder_drift(
        D2, D1, mode, table, 10, seq[0].classes)


def test_generator_stage_leaves_extractor_alone(toy_world, fast_config):
    seq, table = toy_world
    F, _ = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, fast_config, t=1)
    before = F.fingerprint()
    D1, _ = train_cvae(F, seq[0].X_train, seq[0].y_train, None, "attr", table, 10, [], fast_config, t=1)
    d1 = D1.fingerprint()
    train_cvae(F, seq[1].X_train, seq[1].y_train, D1, "attr", table, 10, seq[0].classes, fast_config, t=2)
    assert F.fingerprint() == before
    assert D1.fingerprint() == d1


def test_encoder_fresh_decoder_warm(toy_world, fast_config):
    seq, table = toy_world
    F, _ = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, fast_config, t=1)
    D1, _ = train_cvae(F, seq[0].X_train, seq[0].y_train, None, "class", table, 10, [], fast_config, t=1)
    cfg = fast_config.replace(epochs_vae=1, lr_vae=1e-12)  # barely move, to read off the initialization
    D2, _ = train_cvae(F, seq[1].X_train, seq[1].y_train, D1, "class", table, 10, seq[0].classes, cfg, t=2)
    for a, b in zip(D1.decoder.parameters(), D2.decoder.parameters()):
        assert np.allclose(a.data, b.data, atol=1e-9)
    assert not np.allclose(D1.encoder.parameters()[0].data, D2.encoder.parameters()[0].data, atol=1e-3)


def test_mode_mismatch_rejected(toy_world, fast_config):
    seq, table = toy_world
    F, _ = train_feature_extractor(None, seq[0].X_train, seq[0].y_train, fast_config, t=1)
    D1, _ = train_cvae(F, seq[0].X_train, seq[0].y_train, None, "class", table, 10, [], fast_config, t=1)
    with pytest.raises(ConfigError):
        train_cvae(F, seq[1].X_train, seq[1].y_train, D1, "attr", table, 10, seq[0].classes, fast_config, t=2)
    with pytest.raises(ConfigError):
        train_cvae(F, seq[0].X_train, seq[0].y_train, None, "attr", None, 10, [], fast_config, t=1)


def test_single_class_moments():
    rng = np.random.default_rng(100)
    mu = np.array([1.0, -2.0, 0.5, 3.0])
    X = mu + rng.standard_normal((2000, 4))
    vae, log = train_cvae(Passthrough(4), X, np.zeros(2000, dtype=int), None, "class", None, 1, [],
                          TrainingConfig(latent_dim=4), t=1)
    r = np.random.default_rng(1).standard_normal((1000, 4))
    Z = decode(vae, r, build_condition("class", np.zeros(1000, dtype=int), None, 1))
    assert np.abs(Z.mean(axis=0) - mu).max() < 0.1
    # the l2 reconstruction term is a Gaussian likelihood of variance 1/2, so the
    # generative covariance is that of the decoded means plus 0.5 I
    assert np.abs(np.cov(Z.T) + 0.5 * np.eye(4) - np.eye(4)).max() < 0.1


# -- stage 3 ---------------------------------------------------------------------------

def attr_bundle(n_classes=50, Q=8, seed=0):
    rng = np.random.default_rng(seed)
    table = generate_benchmark(BenchmarkSpec(n_classes=n_classes, n_attributes=Q, train_per_class=1,
                                             test_per_class=1, seed=seed))[1]
    bundle = ModelBundle(FeatureExtractor(4, 6, hidden=(5,), rng=rng))
    bundle.generators["main"] = CvaeModel(6, Q, 3, (8, 8), (8,), rng=rng, name="vae.main")
    bundle.modes["main"] = "attr"
    return bundle, table


def test_synthesis_count():
    bundle, table = attr_bundle()
    targets = [c for c in range(50) if c != 17]
    Z, y = synthesize_features(bundle, targets, table, 50, 300, seen=range(10), rng=np.random.default_rng(0))
    assert Z.shape == (14_700, 6) and len(y) == 14_700
    assert np.array_equal(np.bincount(y, minlength=50), np.array([0 if c == 17 else 300 for c in range(50)]))


def test_synthesis_is_seeded():
    bundle, table = attr_bundle()
    a = synthesize_features(bundle, [1, 2], table, 50, 30, [1], np.random.default_rng(4))
    b = synthesize_features(bundle, [1, 2], table, 50, 30, [1], np.random.default_rng(4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_class_generator_cannot_imagine():
    rng = np.random.default_rng(0)
    bundle = ModelBundle(FeatureExtractor(4, 6, hidden=(5,), rng=rng))
    bundle.generators["main"] = CvaeModel(6, 5, 3, (8, 8), (8,), rng=rng, name="vae.main")
    bundle.modes["main"] = "class"
    Z, _ = synthesize_features(bundle, [0, 1], None, 5, 4, seen=[0, 1], rng=rng)
    assert Z.shape == (8, 6)
    with pytest.raises(CapabilityError):
        synthesize_features(bundle, [0, 3], None, 5, 4, seen=[0, 1], rng=rng)
    assert synthesize_features(bundle, [], None, 5, 4, seen=[], rng=rng)[0].shape == (0, 6)


def test_asymmetric_routing():
    rng = np.random.default_rng(0)
    table = AttributeTable([[1, 0], [0, 1], [1, 1], [0, 0]])
    bundle = ModelBundle(FeatureExtractor(3, 2, hidden=(4,), rng=rng))
    bundle.generators["backward"] = CvaeModel(2, 4, 2, (4, 4), (4,), rng=rng, name="vae.backward")
    bundle.generators["forward"] = CvaeModel(2, 2, 2, (4, 4), (4,), rng=rng, name="vae.forward")
    bundle.modes.update(backward="class", forward="attr")
    Z, y = synthesize_features(bundle, [0, 3], table, 4, 5, seen=[0], rng=np.random.default_rng(1))
    r = np.random.default_rng(1).standard_normal((10, 2))
    expect_past = decode(bundle.generators["backward"], r[:5], build_condition("class", np.zeros(5, int), table))
    expect_future = decode(bundle.generators["forward"], r[5:], build_condition("attr", np.full(5, 3), table))
    assert np.array_equal(Z[:5], expect_past) and np.array_equal(Z[5:], expect_future)


def test_classifier_stage_leaves_generators_alone(toy_world, fast_config):
    bundle, table = attr_bundle(10)
    before = bundle.generators["main"].fingerprint()
    Z_syn, y_syn = synthesize_features(bundle, range(8), table, 10, 10, range(8), np.random.default_rng(0))
    Z_real = np.abs(np.random.default_rng(1).normal(size=(20, 6)))
    train_joint_classifier(Z_real, np.repeat([8, 9], 10), Z_syn, y_syn, 10, fast_config, t=2)
    assert bundle.generators["main"].fingerprint() == before


def _clusters(centers, n, rng, spread):
    X = np.concatenate([c + spread * rng.standard_normal((n, len(c))) for c in centers])
    return X, np.repeat(np.arange(len(centers)), n)


def test_separable_synthetic_clusters_classified_perfectly():
    rng = np.random.default_rng(0)
    centers = 5.0 * np.eye(3)
    Z_real, y_real = _clusters(centers[:1], 50, rng, 0.2)
    Z_syn, y_syn = _clusters(centers[1:], 50, rng, 0.2)
    y_syn = y_syn + 1
    clf, _ = train_joint_classifier(Z_real, y_real, Z_syn, y_syn, 3, TrainingConfig(epochs_classifier=30))
    Z_test, y_test = _clusters(centers, 100, np.random.default_rng(1), 0.2)
    with ad.no_grad():
        pred = np.argmax(clf(Z_test).data, axis=1)
    assert np.all(pred == y_test)


def test_balanced_input_gives_balanced_predictions():
    rng = np.random.default_rng(2)
    centers = 1.5 * np.eye(4) + 1.0  # symmetric, overlapping clusters
    Z, y = _clusters(centers, 200, rng, 0.8)
    # trained to convergence so the initialization no longer tilts the scores
    clf, _ = train_joint_classifier(Z, y, np.empty((0, 4)), np.empty(0, dtype=int), 4,
                                    TrainingConfig(epochs_classifier=200))
    Z_test, _ = _clusters(centers, 250, np.random.default_rng(3), 0.8)
    with ad.no_grad():
        counts = np.bincount(np.argmax(clf(Z_test).data, axis=1), minlength=4)
    assert np.all(np.abs(counts - 250) <= 0.2 * 250)


def test_classifier_spans_universe_and_switches(fast_config):
    Z = np.abs(np.random.default_rng(0).normal(size=(10, 3)))
    y = np.repeat([0, 1], 5)
    empty = (np.empty((0, 3)), np.empty(0, dtype=int))
    clf, _ = train_joint_classifier(Z, y, *empty, 7, fast_config)
    assert clf.linear.W.shape == (3, 7) and clf.linear.b is None
    clf_b, _ = train_joint_classifier(Z, y, *empty, 7, fast_config.replace(classifier_bias=True))
    assert clf_b.linear.b is not None
    warm, _ = train_joint_classifier(Z, y, *empty, 7, fast_config.replace(lr_classifier=1e-12), init=clf)
    assert np.allclose(warm.linear.W.data, clf.linear.W.data, atol=1e-9)


# -- full runs ----------------------------------------------------------------------------

def test_run_scores_span_universe(toy_world, fast_config):
    seq, table = toy_world
    rec = run_bcl("attr_bimag", seq, table, fast_config, keep_scores=True)
    assert [s.t for s in rec.steps] == [1, 2]
    for s in rec.steps:
        assert s.scores.shape == (len(seq.test_set()[1]), 10)


def test_rerun_is_bit_identical(toy_world, fast_config):
    seq, table = toy_world
    a = run_bcl("class_attr_bimag", seq, table, fast_config)
    b = run_bcl("class_attr_bimag", seq, table, fast_config)
    assert a.to_json() == b.to_json()


def test_identity_attributes_reduce_to_class_conditioning(toy_world, fast_config):
    seq, _ = toy_world
    eye = AttributeTable.identity(10)
    a = run_bcl("class_bimag", seq, eye, fast_config, keep_scores=True)
    b = run_bcl("attr_bimag", seq, eye, fast_config, keep_scores=True)
    for sa, sb in zip(a.steps, b.steps):
        assert np.array_equal(sa.scores, sb.scores)
        assert sa.payload() == sb.payload()


def test_asym_backward_generator_tracks_class_generator(toy_world, fast_config):
    seq, table = toy_world
    cls = run_bcl("class_bimag", seq, table, fast_config, keep_models=True)
    asym = run_bcl("asym_bimag", seq, table, fast_config, keep_models=True)
    for sc, sa in zip(cls.steps, asym.steps):
        for p, q in zip(sc.bundle.generators["main"].parameters(), sa.bundle.generators["backward"].parameters()):
            assert np.array_equal(p.data, q.data)
    # at the last step nothing is left to imagine, so the runs coincide
    assert cls.steps[-1].payload() == asym.steps[-1].payload()


def test_class_variant_synthesizes_nothing_at_first_step(toy_world, fast_config):
    seq, table = toy_world
    rec = run_bcl("class_bimag", seq, table, fast_config)
    assert rec.history[0]["synthetic_classes"] == []
    assert rec.history[1]["synthetic_classes"] == list(range(8))
    attr = run_bcl("attr_bimag", seq, table, fast_config)
    assert attr.history[0]["synthetic_classes"] == [8, 9]


def test_joint_training_is_one_plain_classifier(toy_world, fast_config):
    seq, table = toy_world
    joint = run_bcl("joint_training", seq, table, fast_config, keep_scores=True)
    merged = seq.merged()[0]
    plain = BImagClassifier.from_config("class_bimag", fast_config, n_classes=10)
    plain.fit(merged.X_train, merged.y_train)
    X_test, y_test = seq.test_set()
    scores = plain.decision_function(X_test)
    assert len(joint.steps) == 1
    assert np.array_equal(joint.steps[0].scores, scores)
    groups = task_groups(seq.class_to_task, 1)
    assert joint.steps[0].autac == autac(scores, y_test, *groups).area


def test_stage_errors_carry_context(toy_world, fast_config, monkeypatch):
    import bimag.estimator as est

    def boom(*args, t=1, **kwargs):
        if t == 2:
            raise FloatingPointError("diverged")
        return real(*args, t=t, **kwargs)

    real = est.train_cvae
    monkeypatch.setattr(est, "train_cvae", boom)
    seq, table = toy_world
    with pytest.raises(StageError, match=r"attr_bimag seed=0 t=2: FloatingPointError"):
        run_bcl("attr_bimag", seq, table, fast_config)


@pytest.mark.slow
def test_attribute_variant_recognizes_unseen_classes():
    accs = []
    for seed in range(5):
        data, table = generate_benchmark(BenchmarkSpec(n_classes=20, n_attributes=8, input_dim=16, alpha=1.0,
                                                       sigma=0.6, seed=seed))
        rec = run_bcl("attr_bimag", split_tasks(data, [15, 5]), table, TrainingConfig(seed=seed))
        accs.append(rec.steps[0].acc_per_task[1])
    chance = 1 / 5  # even restricted to task B alone
    assert np.median(accs) > 2 * chance
