"""Release gate: one test per acceptance criterion, each printing a PASS/FAIL line.

The overfit run takes several minutes on a single CPU; everything else is quick.
"""
import math
import time

import numpy as np

from gradcheck import check_op, rel_error
from hypertransformer import checkpoint
from hypertransformer import tensor as T
from hypertransformer.cubeio import decode_cube, encode_cube, load_cube, save_cube
from hypertransformer.losses import (
    LossWeights, PerceptualNet, loss_overall, loss_rec, loss_transfer_per, loss_vgg_per,
)
from hypertransformer.metrics import cc, ergas, mae_per_band, psnr, rmse, sam
from hypertransformer.model import DescriptorSet, HyperTransformerBlock, HyperTransformerNet, ModelConfig, fcce
from hypertransformer.pipeline import HsiCube, gaussian_kernel, synth_dataset, walds_degrade
from hypertransformer.tensor import Tensor, backward
from hypertransformer.trainer import TrainConfig, evaluate_baseline, train
from test_metrics import loop_cc, loop_ergas, loop_mae, loop_rmse, loop_sam
from test_model import brute_force_attention
from test_tensor import naive_conv


def verdict(number, title, checks):
    """Print one line for the criterion and fail on the first unmet check."""
    failed = [name for name, ok in checks if not ok]
    status = "PASS" if not failed else "FAIL"
    print(f"\nACCEPTANCE {number} {title}: {status}" + (f" ({', '.join(failed)})" if failed else ""))
    assert not failed, failed


# 1 -------------------------------------------------------------------------------------------
def _op_suite(r):
    def bn(x, g, b):
        return T.batch_norm2d(x, g, b, np.zeros(3), np.ones(3), True)

    cases = [
        (lambda a, b: a * b + a, r.standard_normal((2, 3)), r.standard_normal((2, 3))),
        (T.matmul, r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))),
        (T.linear, r.standard_normal((3, 5)), r.standard_normal((4, 5)), r.standard_normal(4)),
        (lambda x: T.softmax(x, 2), r.standard_normal((2, 3, 4))),
        (lambda x: T.leaky_relu(x, 0.2), r.standard_normal((2, 3, 4)) + 0.05),
        (T.l2_norm, r.standard_normal((2, 3, 4))),
        (lambda x: T.pad2d(x, 1, 0, 1, 0), r.standard_normal((2, 3, 3))),
        (lambda x, w, b: T.conv2d(x, w, b, 1, 1), r.standard_normal((2, 5, 5)),
         r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)),
        (lambda x, w, b: T.conv2d(x, w, b, 2, 0), r.standard_normal((2, 5, 5)),
         r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)),
        (lambda x, w, b: T.conv_transpose2d(x, w, b, 2, 0), r.standard_normal((2, 3, 3)),
         r.standard_normal((2, 3, 2, 2)), r.standard_normal(3)),
        (bn, r.standard_normal((3, 4, 4)), r.uniform(0.5, 1.5, 3), r.standard_normal(3)),
    ]
    return max(check_op(op, *arrays) for op, *arrays in cases)


def _loss_suite(r):
    from hypertransformer.model import FeatureExtractor

    net = PerceptualNet()
    fe = FeatureExtractor(4, (3, 4, 5), rng=np.random.default_rng(2))
    x, ref = r.random((4, 8, 8)), r.random((4, 8, 8))
    feats = fe(Tensor(x))
    tex = {s: feats[s].data + 0.1 * r.standard_normal(feats[s].shape) for s in (1, 2, 4)}
    return max(
        check_op(lambda t: loss_rec(t, ref), x),
        check_op(lambda t: loss_vgg_per(t, ref, net), x),
        check_op(lambda t: loss_transfer_per(t, tex, fe), x),
    )


def _model_gradient_error(samples=20, h=1e-5):
    cfg = ModelConfig(bands=4, hr_size=(16, 16), fe_channels=(4, 6, 8), residual_blocks=(1, 1, 1),
                      heads=2, tail_init_gain=1.0, seed=3)
    model = HyperTransformerNet(cfg)
    patch = synth_dataset(3, 1, 4, 16, 16)[0]
    net = PerceptualNet()
    weights = LossWeights()
    base = model(patch.lr, patch.pan)
    frozen = {s: t.data.copy() for s, t in base.textures.items()}

    def loss_value():
        with T.no_grad():
            out = model(patch.lr, patch.pan)
            return loss_overall(out.x, patch.x_ref, frozen, weights, fe_hsi=model.fe_hsi, net=net)[0].item()

    model.zero_grad()
    out = model(patch.lr, patch.pan)
    backward(loss_overall(out.x, patch.x_ref, frozen, weights, fe_hsi=model.fe_hsi, net=net)[0])
    params = list(model.named_parameters())
    r = np.random.default_rng(11)
    worst = 0.0
    for k in r.choice(len(params), size=samples, replace=len(params) < samples):
        _, p = params[k]
        idx = tuple(int(r.integers(n)) for n in p.shape)
        analytic = p.grad[idx]
        old = p.data[idx]
        p.data[idx] = old + h
        up = loss_value()
        p.data[idx] = old - h
        down = loss_value()
        p.data[idx] = old
        worst = max(worst, float(rel_error(analytic, (up - down) / (2 * h))))
    return worst


def test_acceptance_1_gradient_suite():
    start = time.perf_counter()
    ops = max(_op_suite(np.random.default_rng(1)), _loss_suite(np.random.default_rng(2)))
    model = _model_gradient_error()
    elapsed = time.perf_counter() - start
    print(f"\n  op and loss max rel error {ops:.2e}, model max rel error {model:.2e}, {elapsed:.1f} s")
    verdict(1, "gradient checks", [("ops and losses < 1e-6", ops < 1e-6), ("model < 1e-4", model < 1e-4),
                                   ("under 2 min", elapsed < 120)])


# 2 -------------------------------------------------------------------------------------------
def test_acceptance_2_attention_oracle():
    r = np.random.default_rng(42)
    f, h, w = 4, 4, 4
    block = HyperTransformerBlock(1, f, f, h, w, heads=1, length=16, rng=r)
    for layer in (block.q_proj, block.k_proj, block.v_proj, block.out_proj):
        layer.bias.data[...] = 0.1 * r.standard_normal(layer.bias.shape)
    Q, K, V = (r.standard_normal((f, h, w)) for _ in range(3))
    got = block.attend(Tensor(Q), Tensor(K), Tensor(V)).data
    want = brute_force_attention(
        Q, K, V, block.q_proj.weight.data, block.q_proj.bias.data, block.k_proj.weight.data,
        block.k_proj.bias.data, block.v_proj.weight.data, block.v_proj.bias.data,
        block.out_proj.weight.data, block.out_proj.bias.data,
    )
    diff = np.abs(got - want).max()
    sums = []
    for heads in (1, 2, 16):
        d = DescriptorSet(*(Tensor(3 * r.standard_normal((6, heads, 8))) for _ in range(3)))
        sums.append(np.abs(fcce(d).data.sum(axis=2) - 1.0).max())
    print(f"\n  oracle diff {diff:.2e}, worst row-sum deviation {max(sums):.2e}")
    verdict(2, "single-head attention oracle", [("oracle < 1e-10", diff < 1e-10),
                                                ("rows sum to 1", max(sums) < 1e-9)])


# 3 -------------------------------------------------------------------------------------------
def test_acceptance_3_conv_and_metric_oracles():
    r = np.random.default_rng(3)
    x = r.standard_normal((4, 8, 8))
    wgt = r.standard_normal((4, 4, 3, 3))
    b = r.standard_normal(4)
    conv = max(np.abs(T.conv2d(Tensor(c), Tensor(wgt), Tensor(b), s, p).data - naive_conv(c, wgt, b, s, p)).max()
               for c, s, p in ((x, 1, 1), (x, 1, 0), (x[:, :7, :7], 2, 0), (x[:, :7, :7], 2, 1)))
    ref = r.uniform(0.1, 1.0, (4, 8, 8))
    est = np.clip(ref + 0.05 * r.standard_normal(ref.shape), 0.01, 1.0)
    metric = max(
        abs(cc(est, ref) - loop_cc(est, ref)),
        abs(sam(est, ref) - loop_sam(est, ref)),
        abs(rmse(est, ref) - loop_rmse(est, ref)),
        abs(ergas(est, ref) - loop_ergas(est, ref)),
        abs(psnr(est, ref) - 20 * math.log10(1 / loop_rmse(est, ref))),
        float(np.abs(mae_per_band(est, ref) - loop_mae(est, ref)).max()),
    )
    ideal = (cc(ref, ref), sam(ref, ref), rmse(ref, ref), ergas(ref, ref), psnr(ref, ref))
    flat = np.full((1, 4, 4), 0.5)
    affine = abs(cc(2.5 * est - 0.3, ref) - cc(est, ref))
    scaled = abs(sam(4.0 * est, ref) - sam(est, ref))
    print(f"\n  conv diff {conv:.2e}, metric diff {metric:.2e}")
    verdict(3, "conv and metric oracles", [
        ("conv < 1e-10", conv < 1e-10), ("metrics < 1e-10", metric < 1e-10),
        ("ideal values", ideal == (1.0, 0.0, 0.0, 0.0, math.inf)),
        ("cc affine invariance", affine < 1e-12), ("sam scale invariance", scaled < 1e-12),
        ("ergas example", abs(ergas(flat + 0.05, flat) - 2.5) < 1e-12),
    ])


# 4 -------------------------------------------------------------------------------------------
def test_acceptance_4_degradation():
    k = gaussian_kernel()
    fixed = walds_degrade(HsiCube(np.full((3, 16, 16), 0.42))).data
    big = walds_degrade(HsiCube(np.random.default_rng(4).random((102, 160, 160)))).data
    verdict(4, "degradation", [
        ("kernel sums to 1", abs(k.sum() - 1.0) < 1e-12),
        ("constant fixed point", np.abs(fixed - 0.42).max() < 1e-12),
        ("102x160x160 -> 102x40x40", big.shape == (102, 40, 40)),
    ])


# 5 -------------------------------------------------------------------------------------------
def test_acceptance_5_overfit_single_patch():
    dataset = synth_dataset(0, 1, 8, 64, 64)
    baseline = evaluate_baseline(dataset).psnr_db
    config = TrainConfig(epochs=500, dtype="float32", checkpoint_every=0)
    start = time.perf_counter()
    _, manifest = train(config, dataset, dataset_seed=0)
    elapsed = time.perf_counter() - start
    first, last = manifest.loss_trace[0]["loss"], manifest.loss_trace[-1]["loss"]
    final = float(manifest.final_report["psnr"])
    print(f"\n  bicubic {baseline:.2f} dB, trained {final:.2f} dB, loss {first:.4g} -> {last:.4g}, {elapsed:.0f} s")
    verdict(5, "single-patch overfit", [
        ("PSNR >= bicubic + 3 dB", final >= baseline + 3.0), ("loss decreased", last < first),
        ("under 10 min", elapsed < 600),
    ])


# 6 -------------------------------------------------------------------------------------------
def test_acceptance_6_attention_ablation():
    dataset = synth_dataset(7, 8, 8, 32, 32)
    scores = {}
    for bypass in (False, True):
        config = TrainConfig(epochs=15, attention_bypass=bypass, checkpoint_every=0)
        scores[bypass] = float(train(config, dataset, dataset_seed=7)[1].final_report["psnr"])
    print(f"\n  full {scores[False]:.3f} dB, bypass {scores[True]:.3f} dB")
    verdict(6, "attention ablation", [("full >= bypass", scores[False] >= scores[True])])


# 7 -------------------------------------------------------------------------------------------
def test_acceptance_7_pan_isolation():
    patch = synth_dataset(5, 1, 4, 16, 16)[0]
    net = HyperTransformerNet(ModelConfig(bands=4, hr_size=(16, 16), fe_channels=(4, 6, 8),
                                          residual_blocks=(1, 1, 1), heads=2, scales=(), tail_init_gain=1.0))
    net.eval()
    with T.no_grad():
        a = net(patch.lr, patch.pan).x.data
        b = net(patch.lr, np.random.default_rng(9).random((1, 16, 16))).x.data
    verdict(7, "PAN isolation without transformers", [("bit-identical", a.tobytes() == b.tobytes())])


# 8 -------------------------------------------------------------------------------------------
def test_acceptance_8_reproducibility(tmp_path):
    dataset = synth_dataset(2, 2, 4, 16, 16)
    config = TrainConfig(epochs=3, fe_channels=(4, 6, 8), residual_blocks=(1, 1, 1), heads=2, checkpoint_every=1)
    for run in ("a", "b"):
        train(config, dataset, tmp_path / run, dataset_seed=2)
    manifests = (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    weights = (tmp_path / "a" / "final.htck").read_bytes() == (tmp_path / "b" / "final.htck").read_bytes()

    cube = np.random.default_rng(8).standard_normal((3, 5, 7))
    save_cube(tmp_path / "c.hsi", cube)
    cube_ok = load_cube(tmp_path / "c.hsi").data.tobytes() == cube.tobytes()
    cube_ok &= decode_cube(encode_cube(cube.astype(np.float32))).tobytes() == cube.astype(np.float32).tobytes()

    model, cfg = checkpoint.load_model(tmp_path / "a" / "final.htck")
    checkpoint.save_model(tmp_path / "again.htck", model, {k: v for k, v in cfg.items() if k != "model"})
    ckpt_ok = (tmp_path / "again.htck").read_bytes() == (tmp_path / "a" / "final.htck").read_bytes()
    verdict(8, "reproducibility and round trips", [
        ("manifests identical", manifests), ("checkpoints identical", weights),
        ("cube round trip", cube_ok), ("checkpoint round trip", ckpt_ok),
    ])
