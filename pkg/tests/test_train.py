import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from muwarm.checkpoint import Checkpoint, CheckpointError
from muwarm.data import DataExhausted, TokenStream, intervals_disjoint
from muwarm.model import ModelConfig, build, param_count
from muwarm.parameterization import Scheme
from muwarm.train import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    evaluate,
    flops,
    make_eval_set,
    read_metrics,
    stream_for,
    token_budget,
    train,
)
from muwarm.warmstart import WarmstartConfig, warmstart_model

SCHEME = Scheme("muP", base_width=32, sigma0=0.2, zero_readout=True)
BLOCK, BATCH = 32, 8
TPB = BLOCK * BATCH


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig.with_width(32, block_size=BLOCK)


@pytest.fixture(scope="module")
def eval_set(small_corpus):
    return make_eval_set(small_corpus.held_out, BLOCK, BATCH, eval_tokens=4 * TPB)


def short_run(small_corpus, cfg, eval_set, tmp_path=None, steps=20, seed=0, lr=2**-6, name="m"):
    tc = TrainConfig(lr, BATCH, seed=seed, max_tokens=steps * TPB, eval_interval=5)
    path = None if tmp_path is None else tmp_path / f"{name}.jsonl"
    res = train(build(cfg, SCHEME, seed), stream_for(small_corpus.train, BLOCK, BATCH), tc, eval_set,
                run_id=name, metrics_path=path)
    return res, path


class TestAdam:
    def test_first_step_closed_form(self):
        p = {"w": np.zeros(1)}
        adam_step(p, {"w": np.ones(1)}, AdamState(), {"w": 0.1})
        assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_zero_gradient_is_noop(self):
        p = {"w": np.random.default_rng(0).standard_normal(5)}
        before = p["w"].copy()
        state = AdamState()
        for _ in range(3):
            adam_step(p, {"w": np.zeros(5)}, state, {"w": 0.1})
        assert p["w"].tobytes() == before.tobytes()

    def test_quadratic_convergence(self):
        p = {"w": np.zeros(1)}
        state = AdamState()
        for _ in range(500):
            adam_step(p, {"w": 2 * (p["w"] - 3)}, state, {"w": 0.05})
        assert abs(p["w"][0] - 3) < 0.01

    def test_per_tensor_lr(self):
        p = {"a": np.zeros(1), "b": np.zeros(1)}
        adam_step(p, {"a": np.ones(1), "b": np.ones(1)}, AdamState(), {"a": 0.1, "b": 0.025})
        assert p["a"][0] / p["b"][0] == pytest.approx(4.0)

    def test_nan_gradient(self):
        with pytest.raises(FloatingPointError, match="w"):
            adam_step({"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])}, AdamState(), {"w": 0.1})


class TestBudgets:
    def test_spec_example(self):
        assert token_budget(100_000, 20) == 2_000_000

    def test_extended_ratio(self):
        assert token_budget(100_000, 30) == 3_000_000

    def test_rounds_down_to_batches(self):
        assert token_budget(100_001, 20, tokens_per_batch=1024) == (2_000_020 // 1024) * 1024

    def test_from_config(self, cfg):
        assert token_budget(cfg, 20) == 20 * param_count(cfg)

    @pytest.mark.parametrize("ratio", [0, -1])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ValueError):
            token_budget(10, ratio)

    def test_flops(self):
        assert flops(10**6, 2 * 10**7) == 1.2e14
        assert flops(123, 0) == 0

    @given(st.integers(0, 10**9), st.integers(0, 10**9))
    def test_flops_exact_integer(self, n, d):
        assert flops(n, d) == 6 * n * d


class TestTrain:
    def test_records_and_ledger(self, small_corpus, cfg, eval_set, tmp_path):
        res, path = short_run(small_corpus, cfg, eval_set, tmp_path)
        recs = read_metrics(path)
        assert [r["step"] for r in recs] == [0, 5, 10, 15, 20]
        n = param_count(cfg)
        for r in recs:
            assert r["flops"] == 6 * n * r["tokens"]
            assert r["tokens"] == r["step"] * TPB
            assert set(r["per_layer_act_l1"]) == {"embed", "block0", "block1", "logits"}
        assert recs[0]["val_loss"] == pytest.approx(math.log(256), abs=1e-3)
        assert recs[-1]["val_loss"] < recs[0]["val_loss"]
        led = res.checkpoint.ledger
        assert led["tokens_consumed"] == 20 * TPB and led["flops"] == 6 * n * 20 * TPB
        assert led["cursor"] == 20 * TPB and led["served"] == [[0, 20 * TPB]]

    def test_metrics_keys(self, small_corpus, cfg, eval_set, tmp_path):
        _, path = short_run(small_corpus, cfg, eval_set, tmp_path, steps=5)
        rec = read_metrics(path)[-1]
        assert set(rec) == {"run_id", "step", "tokens", "flops", "train_loss", "val_loss", "per_layer_act_l1",
                            "weight_l1", "weight_l2", "lr", "lambda_shrink", "scheme", "width"}

    def test_determinism(self, small_corpus, cfg, eval_set, tmp_path):
        _, a = short_run(small_corpus, cfg, eval_set, tmp_path, name="a")
        _, b = short_run(small_corpus, cfg, eval_set, tmp_path, name="a2")
        strip = [json.dumps({k: v for k, v in r.items() if k != "run_id"}) for r in read_metrics(a)]
        strip2 = [json.dumps({k: v for k, v in r.items() if k != "run_id"}) for r in read_metrics(b)]
        assert strip == strip2

    def test_evaluate_is_deterministic(self, cfg, eval_set):
        m = build(cfg, SCHEME, 1)
        assert evaluate(m, eval_set) == evaluate(m, eval_set)

    def test_base_then_warmstart_is_sub_epoch(self, small_corpus, cfg, eval_set):
        base, _ = short_run(small_corpus, cfg, eval_set, steps=10)
        target = ModelConfig.with_width(64, block_size=BLOCK)
        model, cursor = warmstart_model(base.checkpoint, target, SCHEME, WarmstartConfig(0.4))
        stream = stream_for(small_corpus.train, BLOCK, BATCH, cursor=cursor)
        ws = train(model, stream, TrainConfig(2**-6, BATCH, max_tokens=10 * TPB, eval_interval=5), eval_set)
        served = base.checkpoint.ledger["served"] + ws.checkpoint.ledger["served"]
        assert intervals_disjoint(served)
        assert ws.checkpoint.ledger["served"][0][0] == base.checkpoint.ledger["cursor"]

    def test_exhaustion(self, small_corpus, cfg, eval_set):
        tc = TrainConfig(2**-6, BATCH, max_tokens=10 * TPB)
        stream = stream_for(small_corpus.train[: 5 * TPB], BLOCK, BATCH)
        with pytest.raises(DataExhausted):
            train(build(cfg, SCHEME, 0), stream, tc, eval_set)

    def test_divergence_keeps_good_checkpoint(self, small_corpus, cfg, eval_set):
        model = build(cfg, SCHEME, 0)

        class Poisoned(TokenStream):
            # corrupts the weights right before the 7th batch is served
            calls = 0

            def next_batch(self):
                Poisoned.calls += 1
                if Poisoned.calls == 7:
                    model.params["wte"].data[:] = np.nan
                return super().next_batch()

        stream = Poisoned(small_corpus.train, BLOCK, BATCH)
        tc = TrainConfig(2**-6, BATCH, max_tokens=10 * TPB, eval_interval=5)
        with pytest.raises(TrainingDiverged) as info:
            train(model, stream, tc, eval_set)
        err = info.value
        assert err.diagnostic["step"] == 7
        assert [r["step"] for r in err.records] == [0, 5]
        assert all(np.isfinite(v).all() for v in err.checkpoint.tensors.values())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(tokens_per_param=0)


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, small_corpus, cfg, eval_set, tmp_path):
        res, _ = short_run(small_corpus, cfg, eval_set, steps=3)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        res.checkpoint.save(p1)
        Checkpoint.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        back = Checkpoint.load(p1)
        assert back.model_cfg == cfg and back.scheme == SCHEME
        for k, v in res.checkpoint.tensors.items():
            assert back.tensors[k].tobytes() == v.astype("<f4").tobytes()

    def test_layout(self, cfg, tmp_path):
        ck = Checkpoint(cfg, SCHEME, {k: t.data for k, t in build(cfg, SCHEME, 0).params.items()})
        data = ck.to_bytes()
        assert data[:8] == b"MUWARM1\x00"
        n = int.from_bytes(data[8:16], "little")
        header = json.loads(data[16:16 + n])
        assert len(data) == 16 + n + 4 * param_count(cfg)
        first = header["tensors"][0]
        assert first["name"] == "wte" and first["offset"] == 0

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"NOTMUWRM" + bytes(8))

    def test_incomplete_tensor_set(self, cfg):
        tensors = {k: t.data for k, t in build(cfg, SCHEME, 0).params.items()}
        tensors.pop("wout")
        with pytest.raises(CheckpointError):
            Checkpoint(cfg, SCHEME, tensors).to_bytes()
