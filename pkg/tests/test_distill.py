import numpy as np
import pytest

from s2kd import distill as K
from s2kd import tensor as T
from s2kd.config import DataConfig, ExperimentConfig, ModelConfig
from s2kd.data import Dataset, generate_split
from s2kd.errors import ContractError, DimensionError, InputError
from s2kd.formats import encode_checkpoint

TINY = DataConfig(height=4, width=4, t_in=2, t_out=2, n_train=24, n_val=8, n_test=8, e_max=1)


def tiny_config(**train):
    cfg = ExperimentConfig(data=TINY,
                           model=ModelConfig(patch=2, d_model=8, d_student=4, n_align=1, n_enc=1,
                                             n_heads=2, student_heads=1))
    cfg.train.max_epochs = 3
    cfg.train.batch_size = 8
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture(scope="module")
def tiny_data():
    splits = {}
    for name, n in (("train", 24), ("val", 8), ("test", 8)):
        frames, desc = generate_split(TINY, 5, name, n)
        splits[name] = K.SplitData(frames[:, :2], desc, frames[:, 2:])
    return Dataset.from_arrays(TINY, 5, **splits)


@pytest.fixture(scope="module")
def tiny_teacher(tiny_data):
    teacher, _ = K.train_teacher(tiny_data, tiny_config())
    return teacher


def test_pred_loss_examples(rng):
    assert K.pred_loss(np.ones((2, 3)), np.ones((2, 3))).item() == 0.0
    assert K.pred_loss(np.full((2, 3), 2.0), np.zeros((2, 3))).item() == 4.0
    with T.using_float_width(64):
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
        acc = 0.0
        for v, w in zip(a.ravel(), b.ravel()):
            acc += (v - w) ** 2
        assert K.pred_loss(a, b).item() == pytest.approx(acc / a.size, abs=1e-9)
    with pytest.raises(DimensionError):
        K.pred_loss(np.ones(3), np.ones(4))


def test_semantic_loss_examples(f64, rng):
    z = rng.normal(size=(6, 4))
    assert K.semantic_loss(z, z).item() == 0.0
    assert K.semantic_loss(np.full((6, 4), 1.5), np.zeros((6, 4))).item() == pytest.approx(2.25)
    target = rng.normal(size=(6, 4))
    rep = T.grad_check(lambda x: K.semantic_loss(x, T.Tensor(target)), z, tol=1e-6)
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, 2 * (z - target) / z.size, rtol=1e-12)
    np.testing.assert_allclose(rep.numeric, 2 * (z - target) / z.size, rtol=1e-6)


def test_semantic_loss_contracts():
    with pytest.raises(DimensionError):
        K.semantic_loss(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ContractError):
        K.semantic_loss(np.ones((2, 3)), T.Tensor(np.ones((2, 3)), requires_grad=True))


def test_distill_loss_modes(f64, rng):
    z = rng.normal(size=(8, 4))
    for mode in K.MODES:
        assert K.distill_loss(z, z, K.DistillConfig(mode=mode)).item() == 0.0
    terms = {"semantic": T.Tensor(0.2), "spectral": T.Tensor(0.4)}
    assert K.combine_distill(terms, K.DistillConfig(beta=0.5)).item() == pytest.approx(0.4)
    a, b = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    sem = K.semantic_loss(a, b).item()
    from s2kd.spectral import spectral_loss
    spec = spectral_loss(a, b).item()
    assert K.distill_loss(a, b, K.DistillConfig(mode="semantic-only")).item() == sem
    assert K.distill_loss(a, b, K.DistillConfig(mode="spectral-only")).item() == spec
    assert K.distill_loss(a, b, K.DistillConfig()).item() == pytest.approx(sem + 0.5 * spec, rel=1e-12)


def test_baseline_distill_has_no_gradient():
    with T.recording():
        z = T.Tensor(np.ones((4, 2)), requires_grad=True)
        out = K.distill_loss(z, np.zeros((4, 2)), K.DistillConfig(mode="baseline"))
        assert out.item() == 0.0 and not out.requires_grad
    assert z.grad is None


def test_unknown_mode_and_negative_weights():
    from s2kd.errors import ConfigurationError
    with pytest.raises(ConfigurationError):
        K.DistillConfig(mode="both")
    with pytest.raises(ConfigurationError):
        K.DistillConfig(lam=-1.0)


def test_teacher_training_is_deterministic(tiny_data):
    t1, r1 = K.train_teacher(tiny_data, tiny_config())
    t2, r2 = K.train_teacher(tiny_data, tiny_config())
    assert r1.epochs == r2.epochs and r1.steps == r2.steps
    assert encode_checkpoint(t1.state_dict()) == encode_checkpoint(t2.state_dict())
    assert t1.frozen and all(not p.requires_grad for p in t1.parameters())


def test_zero_learning_rate_leaves_teacher_unchanged(tiny_data):
    from s2kd.models import build_teacher
    cfg = tiny_config(lr=0.0, max_epochs=2)
    fresh = build_teacher(TINY, cfg.model, K.purpose_rng(cfg.train.seed, K.TEACHER_INIT))
    trained, _ = K.train_teacher(tiny_data, cfg)
    assert encode_checkpoint(fresh.state_dict()) == encode_checkpoint(trained.state_dict())


def test_teacher_overfits_one_sample(tiny_data):
    one = tiny_data["train"].batch(np.arange(1))
    ds = Dataset.from_arrays(TINY, 0, train=one, val=one, test=one)
    _, report = K.train_teacher(ds, tiny_config(max_epochs=150, batch_size=1, lr=3e-3))
    first = report.steps[0].total
    assert min(s.total for s in report.steps) < 0.1 * first


def test_teacher_needs_descriptors(tiny_data):
    tr = tiny_data["train"]
    ds = Dataset.from_arrays(TINY, 0, train=K.SplitData(tr.x, None, tr.y), val=tiny_data["val"])
    with pytest.raises(InputError):
        K.train_teacher(ds, tiny_config())


def test_student_loss_decomposition(tiny_data, tiny_teacher):
    cfg = tiny_config()
    _, report = K.train_student(tiny_data, tiny_teacher, cfg, mode="full")
    assert report.steps
    for s in report.steps:
        expect = s.pred + cfg.train.lam * (s.semantic + cfg.train.beta * s.spectral)
        assert abs(s.total - expect) <= 1e-6 * max(1.0, abs(expect))
        assert s.semantic > 0 and s.spectral > 0


def test_student_leaves_teacher_untouched(tiny_data, tiny_teacher):
    before = encode_checkpoint(tiny_teacher.state_dict())
    K.train_student(tiny_data, tiny_teacher, tiny_config(), mode="full")
    assert encode_checkpoint(tiny_teacher.state_dict()) == before
    assert all(p.grad is None for p in tiny_teacher.parameters())


def test_zero_lambda_matches_baseline(tiny_data, tiny_teacher):
    s_base, r_base = K.train_student(tiny_data, None, tiny_config(), mode="baseline")
    s_zero, r_zero = K.train_student(tiny_data, tiny_teacher, tiny_config(lam=0.0), mode="full")
    assert r_base.epochs == r_zero.epochs
    assert encode_checkpoint(s_base.state_dict()) == encode_checkpoint(s_zero.state_dict())


def test_student_requires_frozen_teacher(tiny_data):
    from s2kd.models import build_teacher
    cfg = tiny_config()
    live = build_teacher(TINY, cfg.model, np.random.default_rng(0))
    with pytest.raises(ContractError, match="frozen"):
        K.train_student(tiny_data, live, cfg, mode="full")
    with pytest.raises(ContractError):
        K.train_student(tiny_data, None, cfg, mode="semantic")


def test_student_never_sees_descriptors(tiny_data, tiny_teacher):
    # scrambling descriptors only changes the teacher's latent, never the baseline student
    tr = tiny_data["train"]
    scrambled = Dataset.from_arrays(TINY, 0, train=K.SplitData(tr.x, tr.s[::-1].copy(), tr.y),
                                    val=tiny_data["val"])
    a, _ = K.train_student(tiny_data, None, tiny_config(), mode="baseline")
    b, _ = K.train_student(scrambled, None, tiny_config(), mode="baseline")
    assert encode_checkpoint(a.state_dict()) == encode_checkpoint(b.state_dict())


def test_learning_rate_schedule_in_report(tiny_data):
    cfg = tiny_config(max_epochs=40, plateau_patience=1, early_stop_patience=40, lr=0.05)
    _, report = K.train_student(tiny_data, None, cfg, mode="baseline")
    lrs = report.learning_rates
    assert lrs[0] == 0.05
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a * 0.1)
    assert len(set(lrs)) > 1


def test_early_stopping_restores_best(tiny_data):
    cfg = tiny_config(max_epochs=60, early_stop_patience=2, plateau_patience=50, lr=0.05)
    student, report = K.train_student(tiny_data, None, cfg, mode="baseline")
    assert report.stopped_early
    assert len(report.epochs) == report.best_epoch + 2
    val = K.student_split_loss(student, None, tiny_data["val"], K.distill_config(cfg, "baseline"))
    assert val == pytest.approx(report.best_val, rel=1e-6)


def test_evaluate_rows(tiny_data, tiny_teacher):
    student, _ = K.train_student(tiny_data, None, tiny_config(max_epochs=1), mode="baseline")
    row = K.evaluate_student(student, tiny_data["test"], "s", "baseline")
    assert row.params == sum(p.size for p in student.inference_parameters().values())
    assert row.mse >= 0 and row.mae >= 0 and -1 <= row.ssim <= 1
    trow = K.evaluate_teacher(tiny_teacher, tiny_data["test"], "t", "privileged")
    assert trow.params == tiny_teacher.num_parameters()
