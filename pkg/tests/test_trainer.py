import zipfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import rel_error
from pfctc.ctc import ctc_loss_and_grad
from pfctc.encoder import EncoderConfig, encoder_backward, encoder_forward, init_params
from pfctc.errors import CheckpointError, InfeasibleError, TrainingError, UsageError
from pfctc.numerics import tempered_softmax_rows
from pfctc.pfr import PfrConfig, joint_loss
from pfctc.synthdata import Dataset, SynthConfig, Utterance, generate_dataset
from pfctc.trainer import (
    AdamState,
    Checkpoint,
    TrainConfig,
    TrainingLog,
    adam_step,
    average_params,
    batch_loss_and_grads,
    evaluate,
    lr_at_step,
    train,
)

DATA_CFG = SynthConfig(vocab_size=4, utterance_count=12, feature_dim=4, min_tokens=2,
                       max_tokens=3, min_frames_per_token=2, max_frames_per_token=4,
                       min_silence=1, max_silence=2, noise_std=0.2)
ENC = EncoderConfig(feature_dim=4, hidden_dim=8, vocab_size=4, left_context=2, right_context=1)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DATA_CFG, 0)


def small_train_cfg(**kw):
    base = dict(epochs=3, batch_size=4, base_lr=0.5, warmup_steps=4, average_last_k=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_peak(self):
        assert lr_at_step(2.0, 400, 400) == pytest.approx(2.0 * 400 ** -0.5, rel=1e-15)

    def test_warmup_is_linear(self):
        # a quarter of the way through warmup gives a quarter of the peak
        assert lr_at_step(2.0, 400, 100) == pytest.approx(0.25 * lr_at_step(2.0, 400, 400),
                                                          rel=1e-15)
        for s in (1, 37, 250):
            assert lr_at_step(2.0, 400, s) == pytest.approx(2.0 * s * 400 ** -1.5, rel=1e-15)

    def test_decay(self):
        assert lr_at_step(2.0, 400, 1600) == pytest.approx(0.5 * lr_at_step(2.0, 400, 400),
                                                           rel=1e-15)

    def test_step_zero(self):
        with pytest.raises(UsageError):
            lr_at_step(1.0, 10, 0)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_first_step(self):
        p = {"w": np.array([0.0])}
        new, _ = adam_step(p, {"w": np.array([1.0])}, AdamState.zeros_like(p), 0.01)
        # m_hat = v_hat = 1 after bias correction
        assert new["w"][0] == pytest.approx(-0.01 / (1 + 1e-9), rel=1e-12)

    def test_deterministic(self, rng):
        p = {"w": rng.normal(size=3)}
        g = {"w": rng.normal(size=3)}
        a = adam_step(p, g, AdamState.zeros_like(p), 0.1)
        b = adam_step(p, g, AdamState.zeros_like(p), 0.1)
        np.testing.assert_array_equal(a[0]["w"], b[0]["w"])
        np.testing.assert_array_equal(a[1].v["w"], b[1].v["w"])

    def test_non_finite(self):
        p = {"w": np.zeros(2), "b": np.zeros(1)}
        with pytest.raises(TrainingError, match="'b'"):
            adam_step(p, {"w": np.zeros(2), "b": np.array([np.nan])},
                      AdamState.zeros_like(p), 0.1)

    def test_inputs_not_mutated(self):
        p = {"w": np.ones(2)}
        s = AdamState.zeros_like(p)
        adam_step(p, {"w": np.ones(2)}, s, 0.1)
        np.testing.assert_array_equal(p["w"], 1.0)
        assert s.step == 0 and not s.m["w"].any()


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(warmup_steps=0),
                                    dict(epochs=3, average_last_k=4), dict(lam=-1.0),
                                    dict(tau=0.0)])
    def test_validation(self, kw):
        with pytest.raises(UsageError):
            TrainConfig(**kw)

    def test_desk_defaults(self):
        cfg = TrainConfig()
        assert (cfg.warmup_steps, cfg.epochs, cfg.batch_size, cfg.average_last_k) == (400, 40, 8, 5)
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.98, 1e-9)
        assert cfg.tau == 10.0 and cfg.detach_teacher


def pure_ctc_train(dataset, enc_cfg, cfg):
    """Reference loop that only ever touches the CTC gradient."""
    rng = np.random.default_rng(cfg.seed)
    params = init_params(enc_cfg, cfg.seed)
    state = AdamState.zeros_like(params)
    utts = list(dataset)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(utts))
        for start in range(0, len(order), cfg.batch_size):
            batch = [utts[i] for i in order[start:start + cfg.batch_size]]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for u in batch:
                logits, cache = encoder_forward(params, enc_cfg, u.features)
                _, d, _ = ctc_loss_and_grad(logits, u.labels)
                g = encoder_backward(params, enc_cfg, cache, d)
                for k in acc:
                    acc[k] += g[k]
            grads = {k: v / len(batch) for k, v in acc.items()}
            lr = lr_at_step(cfg.base_lr, cfg.warmup_steps, state.step + 1)
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        history.append({k: v.copy() for k, v in params.items()})
    return history


class TestTrain:
    def test_lambda_zero_matches_pure_ctc(self, data):
        cfg = small_train_cfg(lam=0.0, average_last_k=1)
        ckpt, log = train(data, ENC, cfg)
        ref = pure_ctc_train(data, ENC, cfg)
        for k in ckpt.params:
            np.testing.assert_array_equal(ckpt.params[k], ref[-1][k])
        # regularizer still logged
        assert (log.column("pfr_loss") > 0).all()

    def test_average_last_one_is_last_checkpoint(self, data, tmp_path):
        cfg = small_train_cfg(average_last_k=1)
        ckpt, _ = train(data, ENC, cfg, checkpoint_dir=tmp_path)
        last = Checkpoint.load(tmp_path / "epoch_003.npz")
        for k in ckpt.params:
            np.testing.assert_array_equal(ckpt.params[k], last.params[k])

    def test_average_of_saved_checkpoints(self, data, tmp_path):
        cfg = small_train_cfg(lam=0.3, average_last_k=2)
        ckpt, _ = train(data, ENC, cfg, checkpoint_dir=tmp_path)
        loaded = [Checkpoint.load(tmp_path / f"epoch_00{e}.npz").params for e in (2, 3)]
        avg = average_params(loaded)
        for k in ckpt.params:
            np.testing.assert_array_equal(ckpt.params[k], avg[k])

    def test_log_shape(self, data):
        cfg = small_train_cfg(lam=0.5)
        _, log = train(data, ENC, cfg)
        assert [r.epoch for r in log.records] == [1, 2, 3]
        assert [r.step for r in log.records] == [3, 6, 9]
        r = log.records[-1]
        assert r.lr == lr_at_step(cfg.base_lr, cfg.warmup_steps, 9)
        assert r.total == pytest.approx(r.ctc_loss + 0.5 * r.pfr_loss, rel=1e-12)
        assert TrainingLog.from_csv(log.to_csv()).records == log.records
        assert log.to_csv().splitlines()[0] == "epoch,step,lr,ctc_loss,pfr_loss,total"

    def test_deterministic(self, data):
        cfg = small_train_cfg(lam=0.5)
        a, la = train(data, ENC, cfg)
        b, lb = train(data, ENC, cfg)
        assert la.to_csv() == lb.to_csv()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_infeasible_utterance_named(self):
        bad = Utterance("too-short", np.zeros((2, 4)), [1, 1], [0, 1], 1, 40.0)
        with pytest.raises(InfeasibleError, match="too-short"):
            train(Dataset([bad]), ENC, small_train_cfg(average_last_k=1))

    def test_empty_dataset(self):
        with pytest.raises(UsageError):
            train(Dataset([]), ENC, small_train_cfg())

    def test_eval_every(self, data):
        cfg = small_train_cfg(eval_every=1, lam=0.0, epochs=2, average_last_k=1)
        _, log = train(data, ENC, cfg, eval_dataset=data)
        assert [e for e, _ in log.evals] == [1, 2]


@pytest.mark.parametrize("detach", [False, True])
def test_batch_gradient_matches_finite_differences(data, detach):
    pfr = PfrConfig(lam=0.5, tau=10.0, detach_teacher=detach)
    cfg = replace(ENC, layers=2)
    params = init_params(cfg, 1)
    batch = list(data)[:4]
    _, _, _, grads = batch_loss_and_grads(params, cfg, batch, pfr)
    teachers = [tempered_softmax_rows(encoder_forward(params, cfg, u.features)[0], pfr.tau)
                for u in batch]

    def batch_loss(p):
        total = 0.0
        for u, teacher in zip(batch, teachers):
            z, _ = encoder_forward(p, cfg, u.features)
            if detach:
                _, ctc, _ = joint_loss(z, u.labels, pfr)
                q = tempered_softmax_rows(z, pfr.tau)
                total += ctc + pfr.lam * (teacher[1:] * (np.log(teacher[1:])
                                                         - np.log(q[:-1]))).sum()
            else:
                total += joint_loss(z, u.labels, pfr)[0]
        return total / len(batch)

    rng = np.random.default_rng(0)
    flat = [(k, idx) for k, v in params.items() for idx in np.ndindex(v.shape)]
    chosen = rng.choice(len(flat), size=max(5, len(flat) // 100), replace=False)
    h = 1e-6
    analytic, numeric = [], []
    for c in chosen:
        k, idx = flat[c]
        old = params[k][idx]
        params[k][idx] = old + h
        fp = batch_loss(params)
        params[k][idx] = old - h
        fm = batch_loss(params)
        params[k][idx] = old
        numeric.append((fp - fm) / (2 * h))
        analytic.append(grads[k][idx])
    assert rel_error(analytic, numeric) <= 1e-3


class TestCheckpoint:
    def _ckpt(self, data):
        ckpt, _ = train(data, ENC, small_train_cfg(lam=0.5))
        return ckpt

    def test_round_trip_and_eval(self, data, tmp_path):
        ckpt = self._ckpt(data)
        path = tmp_path / "m.npz"
        ckpt.save(path)
        back = Checkpoint.load(path)
        assert back.encoder_config == ckpt.encoder_config
        assert back.train_config == ckpt.train_config
        assert back.epoch == ckpt.epoch and back.metrics == ckpt.metrics
        for k in ckpt.params:
            assert back.params[k].tobytes() == ckpt.params[k].tobytes()
        assert evaluate(back, data) == evaluate(ckpt, data)

    def test_truncated(self, data, tmp_path):
        path = tmp_path / "m.npz"
        self._ckpt(data).save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            Checkpoint.load(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope.npz")

    def test_version_mismatch(self, data, tmp_path):
        path = tmp_path / "m.npz"
        self._ckpt(data).save(path)
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        arrays["meta"] = np.array(str(arrays["meta"]).replace('"version": 1', '"version": 99'))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.load(path)

    def test_single_file(self, data, tmp_path):
        path = tmp_path / "model.ckpt"
        self._ckpt(data).save(path)
        assert path.exists() and zipfile.is_zipfile(path)
        assert list(Path(tmp_path).iterdir()) == [path]


class TestEvaluate:
    def test_repeatable(self, data):
        ckpt, _ = train(data, ENC, small_train_cfg())
        assert evaluate(ckpt, data) == evaluate(ckpt, data)

    def test_vocab_mismatch(self, data):
        ckpt, _ = train(data, ENC, small_train_cfg())
        ckpt = Checkpoint(ckpt.params, replace(ENC, vocab_size=3), ckpt.train_config, 1)
        with pytest.raises(UsageError, match="vocab"):
            evaluate(ckpt, data)
