import numpy as np
import pytest

from clft import numerics as nx
from clft.data import generate_corpus, indomain_spec
from clft.encoder import Encoder, EncoderConfig
from clft.numerics import ParamStore
from clft.ssl import (MaskSpec, TeacherState, corpus_ssl_loss, ema_update, expected_mask_fraction, instance_norm,
                      pretrain, sample_mask, ssl_loss, ssl_loss_batch, teacher_targets)

SMALL = EncoderConfig(d_in=16, conv_channels=8, blocks=2, d_model=8, heads=2, d_ff=16)


def test_zero_start_probability_forces_one_span():
    rng = np.random.default_rng(0)
    for frames in (1, 2, 3, 10):
        m = sample_mask(frames, MaskSpec(p_start=0.0, span=3), rng)
        assert m.sum() == min(3, frames)
        idx = np.flatnonzero(m)
        assert (np.diff(idx) == 1).all()


def test_full_start_probability_masks_everything():
    assert sample_mask(17, MaskSpec(p_start=1.0, span=1), np.random.default_rng(0)).all()


def test_mask_always_non_empty():
    rng = np.random.default_rng(1)
    for _ in range(500):
        assert sample_mask(int(rng.integers(1, 8)), MaskSpec(p_start=0.05, span=2), rng).any()


def test_mask_coverage_matches_exact_expectation():
    rng = np.random.default_rng(2)
    T, n = 50, 10_000
    masks = np.stack([sample_mask(T, MaskSpec(0.15, 3), rng) for _ in range(n)])
    frac = masks.mean(1)
    expected = expected_mask_fraction(T, 0.15, 3)
    assert abs(frac.mean() - expected) <= 3 * frac.std(ddof=1) / np.sqrt(n)
    # away from the left edge each frame is covered with the union-of-spans probability
    interior = 1 - (1 - 0.15) ** 3
    assert interior == pytest.approx(0.386, abs=1e-3)
    col = masks[:, 2:].mean(0)
    assert abs(col.mean() - interior) <= 3 * np.sqrt(interior * (1 - interior) / (n * 48))


def _ident_setup(seed=0):
    enc = Encoder(SMALL, seed=seed)
    return enc, TeacherState.from_student(enc)


def test_loss_zero_when_student_reproduces_targets():
    # a student whose masked output equals the teacher targets exactly
    enc, teacher = _ident_setup()
    x = np.random.default_rng(0).normal(size=(1, 24, 16))
    lengths = np.array([24])
    mask = np.zeros((1, 6), dtype=bool)
    mask[0, 2] = True
    with nx.no_grad():
        pred = enc.forward(x, lengths, mask=mask)[0][-1].values
    loss = ssl_loss(enc, teacher, x, lengths, mask, targets=pred.copy())
    assert float(loss.values) == 0.0


def test_identical_networks_see_identical_latents():
    # with the true frame as mask embedding the student reproduces the raw teacher
    # output exactly; the loss then only measures the target normalisation
    enc, teacher = _ident_setup(3)
    x = np.random.default_rng(1).normal(size=(1, 16, 16))
    lengths = np.array([16])
    with nx.no_grad():
        layers, _ = enc.forward(x, lengths)
    mask = np.zeros((1, 4), dtype=bool)
    mask[0, 1] = True
    enc.params["mask_embedding"].values = layers[0].values[0, 1].copy()
    with nx.no_grad():
        student = enc.forward(x, lengths, mask=mask)[0][-1].values
        raw = teacher.encoder.forward(x, lengths)[0][-1].values
    np.testing.assert_allclose(student, raw, atol=1e-12)
    targets = teacher_targets(teacher, x, lengths)
    np.testing.assert_allclose(targets, instance_norm(raw, [4]), atol=1e-12)
    expected = np.mean((student[0, 1] - targets[0, 1]) ** 2)
    assert float(ssl_loss(enc, teacher, x, lengths, mask).values) == pytest.approx(expected, abs=1e-12)


def test_one_masked_frame_unit_difference():
    p = ParamStore()
    pred = p.add("pred", np.array([[[0.0, 0.0], [1.0, -1.0]]]))
    mask = np.array([[False, True]])
    assert float(nx.masked_mse(pred, np.zeros((1, 2, 2)), mask).values) == pytest.approx(1.0)


def test_unmasked_targets_do_not_matter():
    enc, teacher = _ident_setup()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 20, 16))
    lengths = np.array([20, 14])
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 1] = mask[1, 3] = True
    t = teacher_targets(teacher, x, lengths)
    a = float(ssl_loss(enc, teacher, x, lengths, mask, t).values)
    t2 = t.copy()
    t2[~mask] = rng.normal(size=t2[~mask].shape) * 100
    assert float(ssl_loss(enc, teacher, x, lengths, mask, t2).values) == a
    assert a >= 0


def test_instance_norm_statistics():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(2, 7, 3))
    y = instance_norm(x, [7, 4])
    np.testing.assert_allclose(y[0].mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(y[1, :4].std(0), 1, atol=1e-4)
    assert not y[1, 4:].any()


def test_ssl_gradient_and_teacher_constant():
    enc, teacher = _ident_setup(1)
    for n in list(enc.params.names())[:4]:
        enc.params[n].values = enc.params[n].values + 0.05
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 20, 16))
    lengths = np.array([20, 15])
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, :2] = mask[1, 2] = True

    def f():
        return ssl_loss(enc, teacher, x, lengths, mask)

    assert nx.finite_diff_check(f, enc.params, n_coords=60) <= 1e-4
    assert teacher.encoder.params.trainable_names() == []
    loss = f()
    nx.backward(loss, enc.params)
    assert all(t.grad is None for _, t in teacher.encoder.params.items())


def test_ema_update_rules():
    enc, teacher = _ident_setup()
    before = {k: v.values.copy() for k, v in teacher.encoder.params.items()}
    for _, t in enc.params.items():
        t.values = t.values + 1.0
    teacher.decay = 1.0
    ema_update(teacher, enc)
    for k, t in teacher.encoder.params.items():
        assert t.values.tobytes() == before[k].tobytes()
    teacher.decay = 0.0
    ema_update(teacher, enc)
    for k, t in teacher.encoder.params.items():
        assert t.values.tobytes() == enc.params[k].values.tobytes()


def test_ema_scalar_and_contraction():
    s = Encoder(SMALL)
    t = TeacherState(Encoder(SMALL, params=s.params.copy()), decay=0.9)
    name = "mask_embedding"
    t.encoder.params[name].values = np.ones_like(s.params[name].values)
    s.params[name].values = 2 * np.ones_like(s.params[name].values)
    gap = np.abs(t.encoder.params[name].values - s.params[name].values)
    ema_update(t, s)
    np.testing.assert_allclose(t.encoder.params[name].values, 1.1, atol=1e-15)
    np.testing.assert_allclose(np.abs(t.encoder.params[name].values - s.params[name].values), 0.9 * gap, atol=1e-15)
    with pytest.raises(ValueError):
        TeacherState(Encoder(SMALL), decay=1.5)


def test_ema_shape_mismatch():
    t = TeacherState.from_student(Encoder(SMALL))
    other = Encoder(EncoderConfig(d_in=16, conv_channels=8, blocks=2, d_model=8, heads=2, d_ff=32))
    with pytest.raises(ValueError):
        ema_update(t, other)


def test_pretrain_is_deterministic_and_rejects_empty():
    c = generate_corpus(indomain_spec(0, text_mode="uniform"), 10, seed=0)
    a = pretrain(SMALL, c, 1, seed=3, batch_size=4)
    b = pretrain(SMALL, c, 1, seed=3, batch_size=4)
    for name in a.student.params.names():
        assert a.student.params[name].values.tobytes() == b.student.params[name].values.tobytes()
        assert a.teacher.encoder.params[name].values.tobytes() == b.teacher.encoder.params[name].values.tobytes()
    with pytest.raises(ValueError):
        pretrain(SMALL, c[:0], 1)


def test_pretraining_reduces_validation_loss(tmp_path):
    spec = indomain_spec(0, text_mode="uniform")
    train = generate_corpus(spec, 120, seed=0)
    valid = generate_corpus(spec, 20, seed=1)
    res = pretrain(SMALL, train, 6, seed=0, valid=valid, log_path=tmp_path / "log.csv")
    v = [r["ssl_loss"] for r in res.log if r["split"] == "valid"]
    assert v[-1] < v[0]
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,split,ssl_loss"


def test_corpus_loss_uses_fixed_masks():
    enc, teacher = _ident_setup(2)
    c = generate_corpus(indomain_spec(0), 7, seed=4)
    spec = MaskSpec(seed=9)
    a = corpus_ssl_loss(enc, teacher, c, spec, batch_size=3)
    b = corpus_ssl_loss(enc, teacher, c, spec, batch_size=5)
    assert a == pytest.approx(b, abs=1e-12)
    assert corpus_ssl_loss(enc, teacher, c, spec, batch_size=3) == a
    one = float(ssl_loss_batch(enc, teacher, [c[0]], spec, keys=[0]).values)
    assert corpus_ssl_loss(enc, teacher, c[:1], spec) == pytest.approx(one, abs=1e-12)
