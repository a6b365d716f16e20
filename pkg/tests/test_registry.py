import threading

import numpy as np
import pytest

from conftest import TINY, random_model
from prefixtune.model import ModelConfig
from prefixtune.prefix import Placement, dump_prefix, init_random, init_reparam, save_prefix
from prefixtune.registry import F32_BYTES, PrefixRegistry, RegistryError, read_requests
from prefixtune.strategies import TuningStrategy, TunedModel


def sequential(model, prefix, src, max_len):
    tm = TunedModel(model, TuningStrategy.prefix_tune(prefix.prefix_len, reparam=False), prefix=prefix)
    logits, state = tm.start(src)
    toks, seen = [], []
    for _ in range(max_len):
        seen.append(logits)
        nxt = int(np.argmax(logits))
        if nxt == 1:
            break
        toks.append(nxt)
        logits, state = tm.step(state, nxt)
    return tuple(toks), seen


@pytest.fixture
def served():
    model = random_model()
    reg = PrefixRegistry(model)
    prefixes = {f"t{i}": init_random(n, TINY, seed=i, scale=0.5) for i, n in enumerate((1, 4, 7))}
    for t, p in prefixes.items():
        reg.register(t, p)
    return model, reg, prefixes


def test_mixed_batches_equal_sequential(served):
    model, reg, prefixes = served
    rng = np.random.default_rng(0)
    for _ in range(10):
        reqs = [(f"t{rng.integers(3)}", list(rng.integers(3, TINY.vocab_size, size=rng.integers(1, 9))))
                for _ in range(5)]
        for (t, src), r in zip(reqs, reg.batched_infer(reqs, max_len=8, keep_logits=True)):
            toks, seen = sequential(model, prefixes[t], src, 8)
            assert r.ok and r.tokens == toks
            assert max(np.abs(a - b).max() for a, b in zip(seen, r.logits)) <= 1e-10


def test_chunked_batches_match_one_batch(served):
    _, reg, _ = served
    reqs = [("t0", [3, 4]), ("t1", [5]), ("t2", [6, 7, 8]), ("t1", [9, 10])]
    assert [r.tokens for r in reg.batched_infer(reqs, 6)] == [r.tokens for r in reg.batched_infer(reqs, 6, batch_size=1)]


def test_unknown_task_fails_only_its_row(served):
    _, reg, _ = served
    res = reg.batched_infer([("t0", [3]), ("ghost", [4]), ("t1", [5])], max_len=4)
    assert [r.ok for r in res] == [True, False, True]
    assert "ghost" in res[1].error


def test_register_rules(served, tmp_path):
    model, reg, prefixes = served
    with pytest.raises(ValueError):
        reg.register("t0", prefixes["t0"])
    with pytest.raises(ValueError):
        reg.register("r", init_reparam(3, TINY))
    with pytest.raises(ValueError):
        reg.register("x", init_random(3, ModelConfig(2, 8, 2, 16, 23, 64)))
    with pytest.raises(ValueError):
        reg.register("i", init_random(3, TINY, placement=Placement.INFIX))
    reg.register("bytes", dump_prefix(prefixes["t1"]))
    save_prefix(tmp_path / "p.pfxp", prefixes["t2"])
    reg.register("file", tmp_path / "p.pfxp")
    assert reg.tasks == ["bytes", "file", "t0", "t1", "t2"]
    assert np.array_equal(reg.get("file").flat.data, prefixes["t2"].flat.data.astype(np.float32))  # f32 on disk
    reg.remove("bytes")
    assert "bytes" not in reg and len(reg) == 4
    with pytest.raises(RegistryError):
        reg.remove("bytes")
    with pytest.raises(RegistryError):
        reg.get("bytes")


def test_storage_report_arithmetic(served):
    model, reg, prefixes = served
    rep = reg.storage_report()
    n_model = sum(t.size for _, t in model)
    assert rep.model_scalars == n_model and rep.model_bytes == F32_BYTES * n_model
    for t, p in prefixes.items():
        assert rep.task_scalars[t] == p.prefix_len * 2 * TINY.n_layers * TINY.d_model
        assert rep.task_bytes[t] == F32_BYTES * rep.task_scalars[t]
        assert rep.fraction(t) == rep.task_bytes[t] / rep.model_bytes
        assert rep.task_file_bytes[t] > rep.task_bytes[t]
    assert rep.finetune_total_bytes() == 3 * rep.model_bytes
    assert [r["item"] for r in rep.rows()] == ["shared_model", "prefix:t0", "prefix:t1", "prefix:t2",
                                               "finetune_per_task"]


def test_concurrent_writers_do_not_disturb_batches(served):
    model, reg, prefixes = served
    reqs = [("t0", [3, 4]), ("t1", [5, 6]), ("t2", [7])]
    expected = [r.tokens for r in reg.batched_infer(reqs, 6)]
    errors = []

    def churn():
        for k in range(30):
            reg.register(f"x{k}", init_random(2, TINY, seed=100 + k))
            reg.remove(f"x{k}")

    def serve():
        for _ in range(10):
            got = [r.tokens for r in reg.batched_infer(reqs, 6)]
            if got != expected:
                errors.append(got)

    threads = [threading.Thread(target=churn), threading.Thread(target=serve), threading.Thread(target=serve)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not errors and reg.tasks == ["t0", "t1", "t2"]


def test_read_requests(tmp_path):
    p = tmp_path / "req.tsv"
    p.write_text("a\tname : x\n\nb\tfoo bar\n")
    assert read_requests(p) == [("a", "name : x"), ("b", "foo bar")]
    p.write_text("no tab here\n")
    with pytest.raises(ValueError, match="line 1"):
        read_requests(p)


def test_encdec_models_are_rejected():
    from conftest import TINY_ENCDEC
    with pytest.raises(ValueError):
        PrefixRegistry(random_model(TINY_ENCDEC))
