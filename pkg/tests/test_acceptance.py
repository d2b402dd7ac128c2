"""One test per acceptance criterion; each prints a PASS/FAIL line in the summary."""
import time

import numpy as np
import pytest

import conftest
from minicnn import layers as L
from minicnn.arch import analyze, forward, parse_archspec, shipped_spec
from minicnn.arch.analyzer import compare_stacks
from minicnn.augment import CropPolicy, apply_pca_color, fit_pca_color, ten_crop, ten_crop_offsets
from minicnn.autodiff import GRADCHECK_EPS, Tape, check_gradients
from minicnn.dataio import (
    Dataset,
    decode_checkpoint,
    encode_checkpoint,
    encode_idx,
    encode_ppm,
    load_checkpoint,
    load_dataset,
    load_ppm,
    parse_idx,
    parse_ppm,
    save_checkpoint,
    save_dataset,
    save_ppm,
)
from minicnn.errors import FormatError
from minicnn.experiments import TransferConfig, compare_activations, compare_depth, deep_net_spec, run_transfer
from minicnn.params import ParamStore
from minicnn.svm import KernelDesc, solve_dual, svm_predict, svm_train
from minicnn.synthetic import SyntheticConfig, gen_synthetic
from minicnn.tensor import Rng
from minicnn.training import InitPolicy, SgdConfig, init_params

from test_svm import XOR_X, XOR_Y, kkt_violation


def record(n, passed, detail, elapsed=None, limit=None):
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.1f}s" + (f" / limit {limit:g}s]" if limit else "]")
        passed = passed and (limit is None or elapsed < limit)
    conftest.ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}{timing}")
    return passed


def test_criterion_01_analyzer_totals():
    t = time.perf_counter()
    alex, vgg = analyze(shipped_spec("alexnet")), analyze(shipped_spec("vgg19"))
    elapsed = time.perf_counter() - t
    ok = (abs(alex.total_params - 60e6) <= 0.05 * 60e6 and abs(vgg.total_params - 144e6) <= 0.05 * 144e6
          and vgg.depth == 19)
    assert record(1, ok, f"alexnet {alex.total_params:,d}, vgg19 {vgg.total_params:,d} depth {vgg.depth}",
                  elapsed, 1)


def test_criterion_02_parameter_algebra():
    c = 64
    stack = analyze(parse_archspec(f"input {c}x16x16\nnode s vgg depth=3 out={c} from=input\noutput s\n"))
    single = analyze(parse_archspec(f"input {c}x16x16\nnode s conv out={c} k=7x7 p=3 from=input\noutput s\n"))
    stack_w = stack.total_weights
    single_w = single.total_weights
    text = compare_stacks(c).to_text()
    ok = stack_w == 27 * c * c and single_w == 49 * c * c and "81%" in text
    assert record(2, ok, f"C={c}: stack {stack_w} = 27C^2, single {single_w} = 49C^2, ratio line has 81%")


def test_criterion_03_receptive_fields():
    rf = [analyze(parse_archspec(f"input 1x16x16\nnode s vgg depth={d} out=1 from=input\noutput s\n"))
          .receptive_field("s") for d in (2, 3)]
    assert record(3, rf == [5, 7], f"2-stack {rf[0]}, 3-stack {rf[1]}")


def test_criterion_04_crop_multiplicity():
    m = CropPolicy(256, 224, True).multiplicity
    assert record(4, m == 2048, f"256/224/flip -> {m}")


def test_criterion_05_ten_crop():
    img = np.random.default_rng(5).random((3, 32, 40))
    crops = ten_crop(img, 24)
    ok = len(crops) == 10
    for i, (top, left) in enumerate(ten_crop_offsets(32, 40, 24)):
        patch = img[:, top : top + 24, left : left + 24]
        ok &= np.array_equal(crops[i], patch) and np.array_equal(crops[i + 5], patch[..., ::-1])
    assert record(5, ok, f"{len(crops)} patches, each equal to its slice")


def test_criterion_06_inception_macs():
    reduced = analyze(shipped_spec("inception3a")).total_macs
    naive = analyze(shipped_spec("inception3a_naive")).total_macs
    assert record(6, reduced < naive, f"reduced {reduced:,d} < naive {naive:,d} MACs")


# -- criterion 7 -------------------------------------------------------------------


class _Probe:
    """Fixed random projection to a scalar loss, drawn on first use."""

    def __init__(self, g):
        self.g, self.coef = g, None

    def __call__(self, tape, out):
        if self.coef is None:
            self.coef = self.g.normal(size=out.value.shape)
        return (out * tape.leaf(self.coef, requires_grad=False)).sum()


def _layer_cases():
    """name -> builder(g, probe) returning (loss_fn, arrays) for one randomized instance."""

    def conv(g, probe):
        s, p = int(g.integers(1, 3)), int(g.integers(0, 2))
        arrays = {"x": g.normal(size=(2, 2, 6, 6)), "w": g.normal(size=(3, 2, 3, 3)), "b": g.normal(size=3)}
        return lambda t, v: probe(t, L.conv2d(v["x"], L.ConvParams(v["w"], v["b"], s, p))), arrays

    def pool(kind):
        def build(g, probe):
            k, s, p = int(g.integers(2, 4)), int(g.integers(1, 3)), int(g.integers(0, 2))
            return (lambda t, v: probe(t, L.pool2d(kind, v["x"], k, s, p)),
                    {"x": g.normal(size=(2, 2, 6, 6))})
        return build

    def unary(fn, shape=(3, 4, 5)):
        return lambda g, probe: (lambda t, v: probe(t, fn(v["x"])), {"x": g.normal(size=shape)})

    def dense(g, probe):
        arrays = {"x": g.normal(size=(3, 5)), "w": g.normal(size=(5, 4)), "b": g.normal(size=4)}
        return lambda t, v: probe(t, L.dense(v["x"], v["w"], v["b"])), arrays

    def concat(g, probe):
        arrays = {"a": g.normal(size=(2, 2, 3, 3)), "b": g.normal(size=(2, 3, 3, 3))}
        return lambda t, v: probe(t, L.concat([v["a"], v["b"]])), arrays

    def dropout(g, probe):
        mask = (g.random((4, 6)) >= 0.5).astype(np.float64)
        return (lambda t, v: probe(t, L.dropout(v["x"], L.DropoutConfig(0.5), mask=mask)[0]),
                {"x": g.normal(size=(4, 6))})

    def softmax_ce(g, probe):
        labels = g.integers(0, 5, 4)
        return lambda t, v: L.softmax_cross_entropy(v["x"], labels), {"x": g.normal(size=(4, 5))}

    def mse(g, probe):
        target = g.normal(size=(4, 3))
        return lambda t, v: L.mse(v["x"], target), {"x": g.normal(size=(4, 3))}

    def mlpconv(g, probe):
        arrays = {"x": g.normal(size=(1, 2, 5, 5)), "w1": g.normal(size=(3, 2, 3, 3)), "b1": g.normal(size=3),
                  "w2": g.normal(size=(2, 3, 1, 1)), "b2": g.normal(size=2)}

        def loss(t, v):
            out = L.mlpconv(v["x"], [L.ConvParams(v["w1"], v["b1"], 1, 1), L.ConvParams(v["w2"], v["b2"])])
            return probe(t, out)
        return loss, arrays

    return {
        "conv": conv, "maxpool": pool("max"), "avgpool": pool("avg"), "gap": unary(L.global_avg_pool, (2, 3, 4, 4)),
        "dense": dense, "flatten": unary(L.flatten, (2, 3, 2, 2)), "concat": concat,
        "relu": unary(lambda x: L.activation("relu", x)), "tanh": unary(lambda x: L.activation("tanh", x)),
        "sigmoid": unary(lambda x: L.activation("sigmoid", x)), "dropout": dropout,
        "softmax": unary(L.softmax, (3, 5)), "softmax_ce": softmax_ce, "mse": mse, "mlpconv": mlpconv,
    }


def _block_case(text, seed):
    spec = parse_archspec(text)
    g = np.random.default_rng(seed)
    params = init_params(spec, InitPolicy("gaussian", 0.0, 0.5), Rng(seed))
    x = g.normal(size=(2,) + tuple(spec.input_shape))
    out_shape = forward(spec, params, x)[spec.output].value.shape
    coef = g.normal(size=out_shape)

    def loss(tape, leaves):
        out = forward(spec, params, x, tape, leaves=leaves)[spec.output]
        return (out * tape.leaf(coef, requires_grad=False)).sum()

    return loss, dict(params.items())




def test_criterion_07_gradcheck():
    t = time.perf_counter()
    worst = {}
    for name, build in _layer_cases().items():
        errs = []
        for i in range(20):
            g = np.random.default_rng(1000 * i + 7)
            errs.append(check_gradients(*build(g, _Probe(g))))
        worst[name] = max(p.max_rel_err for r in errs for p in r.params)
    for i in range(20):
        shortcut = "identity" if i % 2 == 0 else "projection"
        out = 3 if shortcut == "identity" else 4
        stride = 1 if shortcut == "identity" else 1 + i % 4 // 2
        res = check_gradients(*_block_case(
            f"input 3x5x5\nnode r residual layers={2 + i % 3 // 2} out={out} shortcut={shortcut} s={stride} "
            "from=input\noutput r\n", i))
        worst["residual"] = max(worst.get("residual", 0.0), *(p.max_rel_err for p in res.params))
        inc = check_gradients(*_block_case(
            "input 3x5x5\nnode m inception n1=2 r3=2 n3=3 r5=2 n5=2 pp=2 from=input\noutput m\n", i))
        worst["inception"] = max(worst.get("inception", 0.0), *(p.max_rel_err for p in inc.params))
    elapsed = time.perf_counter() - t
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values())
    detail = f"{len(worst)} ops x 20 instances at eps {GRADCHECK_EPS:g}, worst {top} {worst[top]:.2e} < 1e-4"
    assert record(7, ok, detail, elapsed, 120)


def test_criterion_08_dropout_expectation():
    t = time.perf_counter()
    p = 0.5
    x = np.random.default_rng(8).normal(size=16) + 3.0
    batch = np.broadcast_to(x, (100_000, 16)).copy()
    tape = Tape()
    train, _ = L.dropout(tape.leaf(batch), L.DropoutConfig(p), Rng(8))
    test, _ = L.dropout(tape.leaf(x), L.DropoutConfig(p, "test"))
    rel = np.max(np.abs(train.value.mean(axis=0) - test.value) / np.abs(test.value))
    elapsed = time.perf_counter() - t
    assert record(8, rel < 0.02, f"p={p}: max relative gap {rel:.4f} < 0.02 over 1e5 masks", elapsed, 30)


def test_criterion_09_pca_color():
    g = np.random.default_rng(9)
    mix = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
    model = fit_pca_color(g.random((5000, 3)) @ mix)
    img = g.random((3, 6, 5))
    out = apply_pca_color(img, model, Rng(9))
    offset = out - img
    zero_off = apply_pca_color(np.zeros_like(img), model, Rng(9))
    constant = bool(np.all(zero_off == zero_off[:, :1, :1]))
    zero = np.zeros((3, 1, 1))
    proj = np.array([model.eigvecs[:, 0] @ apply_pca_color(zero, model, Rng(9).child(i))[:, 0, 0]
                     for i in range(100_000)])
    target = 0.1 * model.eigvals[0]
    rel = abs(proj.std() - target) / target
    ok = constant and np.allclose(offset, zero_off, atol=1e-15) and rel < 0.03
    assert record(9, ok, f"offset constant: {constant}; std along b1 off by {100 * rel:.3f}% (< 3%)")


def test_criterion_10_residual_identity():
    spec = parse_archspec("input 4x6x6\nnode r residual layers=2 out=4 from=input\noutput r\n")
    params = init_params(spec, InitPolicy("zeros"), Rng(0))
    x = np.abs(np.random.default_rng(10).normal(size=(3, 4, 6, 6)))
    out = forward(spec, params, x)["r"].value
    assert record(10, np.array_equal(out, x), "zero-initialized block returns its input bit-exactly")


@pytest.mark.slow
def test_criterion_11_transfer_ordering():
    t = time.perf_counter()
    raw, feat, tuned = [], [], []
    for seed in range(5):
        res = run_transfer(TransferConfig(), seed)
        raw.append(res.row("raw-pixel").accuracy)
        feat.append(res.row("transfer-r7").accuracy)
        tuned.append(res.row("fine-tune").accuracy)
    elapsed = time.perf_counter() - t
    mr, mf, mt = (100 * float(np.median(v)) for v in (raw, feat, tuned))
    ok = mf - mr >= 5.0 and mt >= mf
    assert record(11, ok, f"median raw {mr:.1f}, transfer-r7 {mf:.1f}, fine-tune {mt:.1f}", elapsed, 1800)


@pytest.mark.slow
def test_criterion_12_relu_vs_tanh():
    t = time.perf_counter()
    ds = gen_synthetic(SyntheticConfig(10, 100, seed=1))
    report = compare_activations(shipped_spec("desk_cnn"), ds, SgdConfig(64, 0.001, 0.9, 5e-4, 40))
    elapsed = time.perf_counter() - t
    relu, tanh = report.median_epochs("relu"), report.median_epochs("tanh")
    assert record(12, relu <= tanh, f"median epochs to 25% train error: relu {relu:g}, tanh {tanh:g}",
                  elapsed, 600)


@pytest.mark.slow
def test_criterion_13_depth():
    t = time.perf_counter()
    ds = gen_synthetic(SyntheticConfig(10, 50, seed=1))
    report = compare_depth(deep_net_spec(9, 8, False), deep_net_spec(9, 8, True), ds,
                           SgdConfig(64, 0.01, 0.9, 5e-4, 15))
    elapsed = time.perf_counter() - t
    plain, resid = report.median_final("plain"), report.median_final("residual")
    ok = report.conv_layers == 20 and resid <= plain
    assert record(13, ok, f"{report.conv_layers} convs: median final loss residual {resid:.4f}, plain {plain:.4f}",
                  elapsed, 1200)


def test_criterion_14_svm():
    t = time.perf_counter()
    rbf = svm_train(XOR_X, XOR_Y, 10.0, KernelDesc("rbf", 1.0))
    lin = svm_train(XOR_X, XOR_Y, 10.0, KernelDesc("linear"))
    acc_rbf = float(np.mean(svm_predict(rbf, XOR_X)[0] == XOR_Y))
    acc_lin = float(np.mean(svm_predict(lin, XOR_X)[0] == XOR_Y))
    g = np.random.default_rng(14)
    worst = 0.0
    for _ in range(50):
        n = int(g.integers(4, 40))
        x = g.normal(size=(n, int(g.integers(1, 5))))
        y = np.where(g.random(n) < 0.5, 1.0, -1.0)
        y[:2] = [1.0, -1.0]
        C = float(g.choice([0.1, 1.0, 10.0, 100.0]))
        kernel = KernelDesc("rbf", float(g.uniform(0.1, 2.0))) if g.random() < 0.5 else KernelDesc("linear")
        K = kernel(x, x)
        alpha, rho, _ = solve_dual(K, y, C, tol=1e-6)
        v, eq = kkt_violation(alpha, K, y, C, rho)
        worst = max(worst, v, eq)
    elapsed = time.perf_counter() - t
    ok = acc_rbf == 1.0 and acc_lin <= 0.75 and worst < 1e-3
    assert record(14, ok, f"xor rbf {acc_rbf:.2f} vs linear {acc_lin:.2f}; worst KKT violation {worst:.1e}",
                  elapsed, 60)


def _mutations(data, g, count):
    for _ in range(count):
        blob = bytearray(data[: int(g.integers(0, len(data) + 1))])
        for _ in range(int(g.integers(0, 4))):
            if blob:
                blob[int(g.integers(0, len(blob)))] = int(g.integers(0, 256))
        yield bytes(blob)


def test_criterion_15_formats(tmp_path):
    t = time.perf_counter()
    g = np.random.default_rng(15)
    ok = True
    for i in range(20):
        imgs = g.integers(0, 256, (int(g.integers(1, 6)), 1, 7, 5)) / 255.0
        labels = g.integers(0, 10, len(imgs))
        save_dataset(Dataset(imgs, labels), tmp_path / "i.idx", tmp_path / "l.idx")
        back = load_dataset(tmp_path / "i.idx", tmp_path / "l.idx")
        ok &= np.array_equal(back.images, imgs) and np.array_equal(back.labels, labels)
        rgb = g.integers(0, 256, (3, int(g.integers(1, 9)), int(g.integers(1, 9)))) / 255.0
        save_ppm(tmp_path / "x.ppm", rgb)
        ok &= np.array_equal(load_ppm(tmp_path / "x.ppm"), rgb)
        params = ParamStore({f"n{j}.w": g.normal(size=tuple(g.integers(1, 4, int(g.integers(1, 5)))))
                             for j in range(3)})
        params.velocity["n0.w"] = g.normal(size=params["n0.w"].shape)
        h = g.bytes(32)
        save_checkpoint(tmp_path / "m.cnnb", params, h)
        ck = load_checkpoint(tmp_path / "m.cnnb", h)
        ok &= ck.params.equal(params) and np.array_equal(ck.params.velocity["n0.w"], params.velocity["n0.w"])
        ok &= (tmp_path / "m.cnnb").read_bytes() == encode_checkpoint(ck.params, h)
    x = g.normal(size=(12, 2))
    svm = svm_train(x, np.where(x[:, 0] > 0, 1, -1), 1.0, KernelDesc("rbf", 0.5))
    blobs = [
        (parse_idx, encode_idx((g.random((3, 4, 4)) * 255).astype(np.uint8))),
        (parse_ppm, encode_ppm(g.random((3, 4, 4)))),
        (decode_checkpoint, encode_checkpoint(params, h, svm)),
    ]
    structured = crashed = 0
    for parse, good in blobs:
        for blob in _mutations(good, g, 1000):
            try:
                parse(blob)
            except FormatError:
                structured += 1
            except Exception:
                crashed += 1
    elapsed = time.perf_counter() - t
    ok = ok and crashed == 0
    assert record(15, ok, f"round-trips bit-exact; {structured} corrupt inputs rejected, {crashed} crashes",
                  elapsed, 10)
