"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line (run with `pytest -s` to see them live).

The heavy complementarity experiment trains seven models once (module
fixture) and both experiment tests read from it.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from emofuse.autodiff import Tensor
from emofuse.cli import ablate, run
from emofuse.data import gen_blobs, gen_shares, split
from emofuse.gradcheck import TOLERANCE, run_suite, worst_error
from emofuse.layers import (
    SEParams,
    conv2d,
    global_max_pool,
    se_excite,
    se_scale,
    se_squeeze,
    softmax,
)
from emofuse.metrics import confusion, prf_accuracy, roc_auc
from emofuse.model import FafModel, ModelConfig
from emofuse.service import PredictionServer, load_models
from emofuse.training import AdamState, TrainConfig, adam_step, cross_entropy, train


def report_line(name: str, ok: bool, detail: str = "") -> None:
    suffix = f"  ({detail})" if detail else ""
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}{suffix}", flush=True)


def check(name: str, ok: bool, detail: str = "") -> None:
    report_line(name, ok, detail)
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# gradient suite
# --------------------------------------------------------------------------

def test_gradient_suite():
    started = time.monotonic()
    suite = run_suite(eps=1e-4)
    elapsed = time.monotonic() - started
    worst = worst_error(suite)
    ok = worst < TOLERANCE and elapsed < 60 and "full_graph" in suite
    check("gradient-suite", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# layer oracles, >= 100 random instances each, 1e-6 relative
# --------------------------------------------------------------------------

def _close(a, b, rtol=1e-6):
    return np.allclose(a, b, rtol=rtol, atol=1e-12)


def test_layer_oracles():
    rs = np.random.RandomState(100)
    failures = []

    for i in range(100):
        b, cin, cout = rs.randint(1, 3), rs.randint(1, 4), rs.randint(1, 4)
        h, w = rs.randint(2, 7), rs.randint(2, 7)
        kh, kw = rs.randint(1, min(3, h) + 1), rs.randint(1, min(3, w) + 1)
        stride, pad = rs.randint(1, 3), rs.randint(0, 2)
        x = rs.randn(b, cin, h, w)
        k = rs.randn(cout, cin, kh, kw)
        got = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        want = np.zeros((b, cout, ho, wo))
        for bi in range(b):
            for co in range(cout):
                for oi in range(ho):
                    for oj in range(wo):
                        want[bi, co, oi, oj] = np.sum(
                            xp[bi, :, oi * stride : oi * stride + kh, oj * stride : oj * stride + kw]
                            * k[co]
                        )
        if not _close(got, want):
            failures.append(f"conv2d[{i}]")

    for i in range(100):
        b, c, h, w = rs.randint(1, 4), rs.randint(1, 5), rs.randint(1, 5), rs.randint(1, 5)
        x = rs.randn(b, c, h, w)
        if not _close(se_squeeze(Tensor(x)).data, x.mean(axis=(2, 3))):
            failures.append(f"se_squeeze[{i}]")
        if not _close(global_max_pool(Tensor(x)).data, x.max(axis=(2, 3))):
            failures.append(f"global_max_pool[{i}]")
        s = rs.rand(b, c) + 0.1
        want = np.array([[x[bi, ci] * s[bi, ci] for ci in range(c)] for bi in range(b)])
        if not _close(se_scale(Tensor(x), Tensor(s)).data, want):
            failures.append(f"se_scale[{i}]")

    for i in range(100):
        b, c, r = rs.randint(1, 4), 8, rs.choice([2, 4])
        z = rs.randn(b, c)
        w1, w2 = rs.randn(c // r, c), rs.randn(c, c // r)
        got = se_excite(Tensor(z), SEParams(Tensor(w1), Tensor(w2), int(r))).data
        want = 1.0 / (1.0 + np.exp(-(np.maximum(z @ w1.T, 0.0) @ w2.T)))
        if not _close(got, want):
            failures.append(f"se_excite[{i}]")

    for i in range(100):
        logits = rs.randn(rs.randint(1, 5), rs.randint(2, 7)) * rs.choice([0.5, 3, 10])
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        if not _close(softmax(Tensor(logits)).data, e / e.sum(axis=1, keepdims=True)):
            failures.append(f"softmax[{i}]")

    check("layer-oracles", not failures, f"{len(failures)} mismatches {failures[:3]}")


# --------------------------------------------------------------------------
# SE invariants (property-tested)
# --------------------------------------------------------------------------

def test_se_invariants():
    rs = np.random.RandomState(200)
    ok = True
    detail = ""
    for i in range(100):
        b, c = rs.randint(1, 4), 8
        scale_pow = rs.choice([0.1, 1.0, 10.0, 100.0])
        z = rs.randn(b, c) * scale_pow
        p = SEParams(Tensor(rs.randn(2, c) * scale_pow), Tensor(rs.randn(c, 2) * scale_pow), 4)
        gates = se_excite(Tensor(z), p).data
        if not ((gates > 0).all() and (gates < 1).all()):
            ok, detail = False, f"excite escaped (0,1) at case {i}"
            break
        x = rs.randn(b, c, 3, 4) + rs.choice([-5, 0, 5])
        s = rs.rand(b, c) + 0.05
        scaled = se_scale(Tensor(x), Tensor(s)).data
        ratios = scaled / x
        if not np.allclose(ratios, s[:, :, None, None], rtol=1e-6):
            ok, detail = False, f"scale ratio not constant per channel at case {i}"
            break
        v = float(rs.randn())
        const = np.full((b, c, 2, 5), v)
        if not np.allclose(se_squeeze(Tensor(const)).data, v, rtol=0, atol=1e-12):
            ok, detail = False, f"squeeze of constant map != constant at case {i}"
            break
    check("se-invariants", ok, detail or "100 random cases")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def test_optimizer():
    failures = []

    params = {"theta": np.array([1.0], np.float64)}
    state = AdamState.fresh(params, lr=0.1, eps=0.0)
    adam_step(params, {"theta": np.array([2.0])}, state)
    if not abs(params["theta"][0] - 0.9) < 1e-12:
        failures.append(f"closed form gave {params['theta'][0]!r}")

    params = {"w": np.array([0.5, -0.25], np.float32)}
    state = AdamState.fresh(params, lr=0.05)
    adam_step(params, {"w": np.zeros(2, np.float32)}, state)
    if not np.array_equal(params["w"], [0.5, -0.25]):
        failures.append("zero gradient moved parameters")

    for g in (1e-3, 1.0, 1e3):
        params = {"w": np.array([2.0], np.float64)}
        state = AdamState.fresh(params, lr=1e-3)
        adam_step(params, {"w": np.array([g])}, state)
        step = abs(2.0 - params["w"][0])
        if abs(step - 1e-3) > 1e-8:
            failures.append(f"first step {step} for g={g}")

    check("optimizer", not failures, "; ".join(failures))


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def test_loss():
    failures = []
    onehot = np.zeros((4, 5))
    onehot[np.arange(4), [0, 1, 2, 3]] = 1.0
    if cross_entropy(Tensor(onehot), [0, 1, 2, 3]).item() != 0.0:
        failures.append("one-hot-correct loss nonzero")
    for batch in (1, 3, 8):
        uniform = np.full((batch, 5), 0.2)
        loss = cross_entropy(Tensor(uniform), [0] * batch).item()
        if abs(loss - batch * math.log(5)) > 1e-9 * batch:
            failures.append(f"uniform loss off at batch {batch}: {loss}")
    check("loss", not failures, "; ".join(failures))


# --------------------------------------------------------------------------
# metrics oracle equivalence
# --------------------------------------------------------------------------

def test_metrics_oracles():
    rs = np.random.RandomState(300)
    failures = []

    for i in range(1000):
        classes = rs.randint(2, 6)
        n = rs.randint(classes, 40)
        y_true = rs.randint(0, classes, n)
        y_pred = rs.randint(0, classes, n)
        cm = confusion(y_true, y_pred, classes)
        manual = np.zeros((classes, classes), np.int64)
        for t, p in zip(y_true, y_pred):
            manual[t, p] += 1
        if not np.array_equal(cm.counts, manual):
            failures.append(f"confusion[{i}]")
            continue
        report = prf_accuracy(cm)
        if report.accuracy != np.mean(y_true == y_pred):
            failures.append(f"accuracy[{i}]")
        for c in range(classes):
            tp = manual[c, c]
            fp = manual[:, c].sum() - tp
            fn = manual[c].sum() - tp
            m = report.per_class[c]
            if m.precision != (tp / (tp + fp) if tp + fp else 0.0):
                failures.append(f"precision[{i}]")
            if m.recall != (tp / (tp + fn) if tp + fn else 0.0):
                failures.append(f"recall[{i}]")
            if m.f1 != (2 * tp / (2 * tp + fn + fp) if 2 * tp + fn + fp else 0.0):
                failures.append(f"f1[{i}]")

    for i in range(200):
        n = rs.randint(4, 30)
        scores = rs.choice([0.1, 0.3, 0.5, 0.7, 0.9], n)
        y = rs.randint(0, 2, n)
        if y.min() == y.max():
            continue
        _, auc = roc_auc(scores, y, 1)
        pos = scores[y == 1]
        neg = scores[y == 0]
        pair = Fraction(0)
        for p in pos:
            for q in neg:
                pair += 1 if p > q else (Fraction(1, 2) if p == q else 0)
        pair = pair / (len(pos) * len(neg))
        if abs(auc - float(pair)) > 1e-12:
            failures.append(f"auc[{i}]")

    hand = prf_accuracy(confusion([0] * 60 + [1] * 40,
                                  [0] * 50 + [1] * 10 + [0] * 5 + [1] * 35, 2))
    c0 = hand.per_class[0]
    expected = (0.90909, 0.83333, 0.86957, 0.85)
    got = (round(c0.precision, 5), round(c0.recall, 5), round(c0.f1, 5), hand.accuracy)
    if got != expected:
        failures.append(f"hand case {got}")

    check("metrics-oracles", not failures, f"{len(failures)} mismatches {failures[:3]}")


# --------------------------------------------------------------------------
# complementarity experiment (shared seven-model ablation)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def shares_ablation():
    started = time.monotonic()
    dataset = gen_shares(seed=7, n=5000, num_classes=5)
    result = ablate(dataset, seed=7, epochs=60)
    result["_elapsed"] = time.monotonic() - started
    return result


def _accuracies(result):
    return {row["modalities"]: row["accuracy"] for row in result["rows"]}


def test_complementarity_accuracies(shares_ablation):
    acc = _accuracies(shares_ablation)
    elapsed = shares_ablation["_elapsed"]
    failures = []
    for key in ("face", "body", "text"):
        if acc[key] > 0.30:
            failures.append(f"{key} {acc[key]:.3f} > 0.30")
    if acc["face+body+text"] < 0.90:
        failures.append(f"trimodal {acc['face+body+text']:.3f} < 0.90")
    if elapsed >= 600:
        failures.append(f"runtime {elapsed:.0f}s >= 600s")
    detail = (f"uni {[round(acc[k], 3) for k in ('face', 'body', 'text')]}, "
              f"tri {acc['face+body+text']:.3f}, {elapsed:.0f}s")
    check("complementarity-accuracies", not failures, "; ".join(failures) or detail)


def test_complementarity_ordering(shares_ablation):
    acc = _accuracies(shares_ablation)
    uni = [acc[k] for k in ("face", "body", "text")]
    bi = [acc[k] for k in ("face+body", "face+text", "body+text")]
    tri = acc["face+body+text"]
    failures = []
    if not all(tri >= b for b in bi):
        failures.append(f"trimodal {tri:.3f} below a bimodal {max(bi):.3f}")
    if not all(b >= u for b in bi for u in uni):
        failures.append(
            f"bimodal floor {min(bi):.4f} below unimodal ceiling {max(uni):.4f} "
            "(both groups are at chance by construction; their ordering is a "
            "sampling coin-flip)"
        )
    check("complementarity-ordering", not failures, "; ".join(failures))


# --------------------------------------------------------------------------
# separable baseline
# --------------------------------------------------------------------------

def test_separable_baseline():
    dataset = gen_blobs(seed=7, n_per_class=200)
    train_ds, test_ds = split(dataset, 0.2, seed=7)
    failures = []
    results = {}
    for mods in (("face",), ("body",), ("text",), ("face", "body", "text")):
        model, _ = train(train_ds, ModelConfig(enabled_modalities=mods),
                         TrainConfig(epochs=30, seed=7))
        y_true, y_pred, _ = model.predict_dataset(test_ds.records)
        acc = float((y_true == y_pred).mean())
        results["+".join(mods)] = acc
        if acc < 0.95:
            failures.append(f"{'+'.join(mods)} {acc:.3f} < 0.95")
    check("separable-baseline", not failures,
          "; ".join(failures) or str({k: round(v, 3) for k, v in results.items()}))


# --------------------------------------------------------------------------
# determinism
# --------------------------------------------------------------------------

def test_determinism(tmp_path):
    from emofuse.data import save_jsonl

    data_path = tmp_path / "blobs.jsonl"
    save_jsonl(gen_blobs(seed=21, n_per_class=10), data_path)
    flags = ["--data", str(data_path), "--epochs", "2", "--seed", "21",
             "--modalities", "face,body,text"]
    c1, c2 = tmp_path / "m1.json", tmp_path / "m2.json"
    ok = run(["train", *flags, "--out", str(c1)]) == 0
    ok = run(["train", *flags, "--out", str(c2)]) == 0 and ok
    identical = c1.read_bytes() == c2.read_bytes()

    model = FafModel.load(c1)
    feats = {m: np.linspace(-1, 1, model.config.input_dims[m]).astype(np.float32)
             for m in model.config.enabled_modalities}
    before = model.predict(feats)
    resaved = tmp_path / "resaved.json"
    model.save(resaved)
    after = FafModel.load(resaved).predict(feats)
    bitwise = all(
        np.float32(before["scores"][k]) == np.float32(after["scores"][k])
        for k in before["scores"]
    ) and before["predicted"] == after["predicted"]

    check("determinism", ok and identical and bitwise,
          f"checkpoints identical={identical}, roundtrip predictions bitwise={bitwise}")


# --------------------------------------------------------------------------
# gate behavior
# --------------------------------------------------------------------------

def test_gate_behavior(tmp_path):
    dims = {"face": 64, "body": 64, "text": 64}
    dataset = gen_blobs(seed=9, n_per_class=8, input_dims=dims)
    config = ModelConfig(input_dims=dims, d_align=8, conv_out_channels=8,
                         reduction_ratio=4)
    failures = []

    # plateau run: tiny lr means the loss cannot decline measurably
    model, history = train(dataset, config, TrainConfig(epochs=5, seed=9, lr=1e-12))
    if history.gate_epoch is None:
        failures.append("gate never latched on a plateau")
    if not model.gate_active:
        failures.append("gate_active false after latch")
    latch_epochs = [history.gate_epoch] if history.gate_epoch is not None else []
    if len(latch_epochs) != 1:
        failures.append("history must record exactly one latch epoch")

    path = tmp_path / "gated.json"
    model.save(path)
    if not FafModel.load(path).gate_active:
        failures.append("gate_active lost through checkpoint")

    # pre-latch (gate off) outputs ignore logit_scale entirely
    fresh = FafModel.init(config, seed=9)
    feats = {m: np.random.RandomState(1).randn(2, 64).astype(np.float32)
             for m in config.enabled_modalities}
    base = fresh.forward(feats).data.copy()
    fresh.params["logit_scale"].data[:] = [7.0, -2.0, 0.01]
    if not np.array_equal(fresh.forward(feats).data, base):
        failures.append("pre-latch output depends on logit_scale")

    check("gate-behavior", not failures, "; ".join(failures) or
          f"latched at epoch {history.gate_epoch}")


# --------------------------------------------------------------------------
# service contract
# --------------------------------------------------------------------------

def test_service_contract(tmp_path):
    import threading
    import urllib.error
    import urllib.request

    dims = {"face": 16, "body": 16, "text": 12}
    model_dir = tmp_path / "models"
    model_dir.mkdir()
    config = ModelConfig(input_dims=dims, d_align=4, conv_out_channels=4,
                         reduction_ratio=2)
    FafModel.init(config, seed=2).save(model_dir / "tri.json")
    FafModel.init(ModelConfig(enabled_modalities=("face",), input_dims=dims,
                              d_align=4, conv_out_channels=4, reduction_ratio=2),
                  seed=3).save(model_dir / "face.json")

    registry = load_models(model_dir)
    server = PredictionServer(("127.0.0.1", 0), registry)
    server.start_background()
    base = f"http://127.0.0.1:{server.port}"
    failures = []

    def post(payload):
        req = urllib.request.Request(
            f"{base}/api/predict", data=json.dumps(payload).encode(),
            headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as err:
            return err.code, err.read()

    try:
        with urllib.request.urlopen(f"{base}/api/health", timeout=10) as resp:
            health = json.loads(resp.read())
        if health["models"] != ["face", "face+body+text"]:
            failures.append(f"health models {health['models']}")

        payload = {"model": "face+body+text",
                   "face": [0.1] * 16, "body": [0.2] * 16, "text": [0.3] * 12}
        results = [None] * 32
        barrier = threading.Barrier(32)

        def hit(i):
            barrier.wait()
            results[i] = post(payload)

        threads = [threading.Thread(target=hit, args=(i,)) for i in range(32)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if {s for s, _ in results} != {200}:
            failures.append(f"statuses {sorted({s for s, _ in results})}")
        if len({b for _, b in results}) != 1:
            failures.append("concurrent responses differ")

        status, body = post({"model": "nope"})
        if status != 400 or json.loads(body)["error"] != "unknown_model":
            failures.append(f"unknown model -> {status}")
        status, body = post({"model": "face+body+text", "face": [0.0] * 16,
                             "text": [0.0] * 12})
        if status != 400 or json.loads(body)["error"] != "missing_modality":
            failures.append(f"missing modality -> {status}")
        status, body = post({"model": "face", "face": [0.0] * 3})
        parsed = json.loads(body)
        if status != 400 or parsed["error"] != "wrong_length" or "16" not in parsed["message"]:
            failures.append(f"wrong length -> {status} {parsed}")
    finally:
        server.shutdown()
        server.server_close()

    check("service-contract", not failures, "; ".join(failures))
