"""Acceptance criteria, one test per criterion, each with its runtime budget.

Every test records a one-line PASS/FAIL verdict; the lines are printed in the
pytest terminal summary (and directly when this file is run as a script).
"""

import itertools
import math
import time

import numpy as np
import pytest

from tinytracker import cli, edgeprof, evalkit, modelio, netgraph, nnops, ptq
from tinytracker.faceprep import CropBox, preprocess
from tinytracker.modelio import FormatError
from tinytracker.nnops import Padding
from tinytracker.qtensor import QuantParams, Tensor, dequantize, quantize

import oracles
from conftest import synthetic_inputs
from datasets import write_frames, write_manifest
from fidelity import OPERATORS, run_fixture
from fuzzing import mutate_container, mutate_pnm

RESULTS: dict[int, str] = {}


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def verdict(n: int, title: str, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
    ok = bool(ok) and elapsed < budget
    limit = f"budget {budget:g}s" if math.isfinite(budget) else "no time budget"
    RESULTS[n] = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}: {detail} [{elapsed:.2f}s, {limit}]"
    print(RESULTS[n])
    return ok


@pytest.fixture(scope="module")
def table():
    return edgeprof.load_platforms(edgeprof.default_platforms_path())


def _spec(table, name):
    return next(s for s in table.platforms if s.name == name)


def test_criterion_1_hardware_metric_consistency(table):
    with Timer() as t:
        spr = _spec(table, "Spresense")
        macs = table.reference_macs
        lat_s = spr.inference_latency_ms / 1e3
        mpc = edgeprof.mac_per_cycle(macs, lat_s, spr.clock_hz)
        p = edgeprof.power_efficiency(spr.energy_inference_mj / spr.inference_latency_ms, spr.clock_hz)
        usb = _spec(table, "CoralUSB")
        usb_lat = usb.inference_latency_ms / 1e3
        clock = macs / (usb.reported["mac_per_cycle"] * usb_lat)
        p_usb = edgeprof.power_efficiency(usb.avg_power_w, clock)
        usb_rel = abs(p_usb - usb.reported["power_efficiency_uw_per_mhz"]) / usb.reported["power_efficiency_uw_per_mhz"]
        ok = (
            abs(mpc - 0.1957) <= 0.005
            and abs(mpc - spr.reported["mac_per_cycle"]) <= 0.005
            and abs(p - 530.13) / 530.13 <= 0.005
            and abs(p - 530.1) <= 0.05
            and abs(clock / 1e6 - 250.7) < 0.1
            and usb_rel <= 0.005
        )
    detail = (
        f"Spresense MAC/Cycle {mpc:.4f} (0.20), P {p:.2f} uW/MHz (530.13); "
        f"CoralUSB clock {clock / 1e6:.2f} MHz, P {p_usb:.1f} vs 4436.40 ({usb_rel:.2%})"
    )
    assert verdict(1, "hardware metric consistency", ok, detail, t.elapsed, 1.0)


def test_criterion_2_imx500_flagged(table):
    with Timer() as t:
        res = edgeprof.consistency_check(_spec(table, "IMX500"), table.reference_macs, table.reference_macs_half_unit)
        clock = next(r for r in res if r.quantity == "clock_hz")
        ok = clock.flagged and clock.relative > 0.25
    detail = (
        f"clock from P {clock.derived / 1e6:.1f} MHz vs from MAC/Cycle {clock.reference / 1e6:.1f} MHz, "
        f"residual {clock.relative:.1%}, flagged={clock.flagged}"
    )
    assert verdict(2, "IMX500 inconsistency flagged", ok, detail, t.elapsed, 1.0)


def test_criterion_3_model_size_targets():
    with Timer() as t:
        cfg = netgraph.TinyTrackerConfig()
        g = netgraph.init_random_weights(netgraph.build_tinytracker(cfg), seed=0)
        cost = edgeprof.cost_breakdown(g)
        q = ptq.quantize_graph(g, ptq.calibrate(g, synthetic_inputs(2, seed=3)))
        size = len(modelio.serialize_model(q))
        ok = 390_000 <= cost.total_params <= 520_000 and 10.0e6 <= cost.total_macs <= 13.6e6 and size <= 0.75e6
    detail = f"params {cost.total_params:,} (reference 455k), MACs {cost.total_macs / 1e6:.2f}M (reference 11.8M), int8 container {size / 1e6:.3f} MB (reference 0.6 MB)"
    assert verdict(3, "model size targets", ok, detail, t.elapsed, 10.0)


def test_criterion_4_imx500_total_latency(table):
    with Timer() as t:
        total = edgeprof.total_latency(_spec(table, "IMX500"))
        ok = total == 19.0 and f"{total:.1f}" == "19.0"
    assert verdict(4, "IMX500 end-to-end latency", ok, f"17.9 + 0.86 + 0.24 = {total!r} ms", t.elapsed, math.inf)


def _lut_exact() -> tuple[bool, int]:
    checked = 0
    for kind, seed in itertools.product(("hard_swish", "hard_sigmoid"), range(10)):
        rng = np.random.default_rng(100 + seed)
        in_qp = QuantParams.per_tensor(float(rng.uniform(0.005, 0.1)), int(rng.integers(-128, 128)))
        out_qp = QuantParams.per_tensor(float(rng.uniform(0.005, 0.1)), int(rng.integers(-128, 128)))
        lut = nnops.activation_lut(kind, in_qp, out_qp)
        ref = oracles.hard_swish if kind == "hard_swish" else oracles.hard_sigmoid
        codes = Tensor.i8(np.arange(-128, 128), in_qp)
        got = getattr(nnops, kind)(codes, lut=lut).data
        real = dequantize(codes).data
        want = quantize(Tensor.f32([ref(float(v)) for v in real]), out_qp).data
        if not np.array_equal(got, want):
            return False, checked
        checked += 256
    return True, checked


def test_criterion_5_quantization_fidelity():
    seeds = range(20)
    with Timer() as t:
        worst_max, worst_frac, failures = 0.0, 1.0, []
        for op in OPERATORS:
            for seed in seeds:
                r = run_fixture(op, seed)
                worst_max = max(worst_max, r.max_err_in_scales)
                worst_frac = min(worst_frac, r.frac_within_1)
                if r.max_err > 2 * r.s_out or r.frac_within_1 < 0.95:
                    failures.append((op, seed))
        lut_ok, lut_codes = _lut_exact()
        ok = not failures and lut_ok
    detail = (
        f"{len(OPERATORS)} ops x {len(seeds)} seeds, worst max {worst_max:.3f} s_out, "
        f"worst within-1 {worst_frac:.1%}, failures {failures}; LUT codes exact {lut_codes}"
    )
    assert verdict(5, "quantization fidelity", ok, detail, t.elapsed, 30.0)


def _oracle_sweep() -> tuple[int, list]:
    rng = np.random.default_rng(2024)
    count, mismatches = 0, []
    for h, w, c, k, s, same in itertools.product(range(1, 9), range(1, 9), range(1, 5), (1, 3), (1, 2), (True, False)):
        if not same and (h < k or w < k):
            continue
        pad = Padding.SAME if same else Padding.VALID
        zp = int(rng.integers(-128, 128))
        x = rng.integers(-128, 128, (1, h, w, c))
        xq = Tensor.i8(x, QuantParams.per_tensor(0.05, zp))
        cout = int(rng.integers(1, 5))
        wc = rng.integers(-127, 128, (cout, k, k, c))
        bc = rng.integers(-5000, 5000, cout)
        got = nnops.conv2d_acc(
            xq, Tensor.i8(wc, QuantParams.per_channel([0.01] * cout, 0)), Tensor.i32(bc), stride=(s, s), padding=pad
        )
        if got.tolist() != oracles.naive_conv_acc(x.tolist(), wc.tolist(), bc.tolist(), (s, s), same, 1, zp):
            mismatches.append(("conv2d", h, w, c, k, s, same))
        wd = rng.integers(-127, 128, (1, k, k, c))
        bd = rng.integers(-5000, 5000, c)
        got = nnops.depthwise_conv2d_acc(
            xq, Tensor.i8(wd, QuantParams.per_channel([0.01] * c, 3)), Tensor.i32(bd), stride=(s, s), padding=pad
        )
        if got.tolist() != oracles.naive_depthwise_acc(x.tolist(), wd.tolist(), bd.tolist(), (s, s), same, zp):
            mismatches.append(("depthwise", h, w, c, k, s, same))
        count += 2
    for h, w, c in itertools.product(range(1, 9), range(1, 9), range(1, 5)):
        zp = int(rng.integers(-128, 128))
        x = rng.integers(-128, 128, (1, h, w, c))
        o = int(rng.integers(1, 5))
        wf = rng.integers(-127, 128, (o, h * w * c))
        bf = rng.integers(-5000, 5000, o)
        got = nnops.fully_connected_acc(
            Tensor.i8(x, QuantParams.per_tensor(0.05, zp)),
            Tensor.i8(wf, QuantParams.per_channel([0.01] * o, 0)),
            Tensor.i32(bf),
        )
        if got.tolist() != oracles.naive_fc_acc(x.reshape(1, -1).tolist(), wf.tolist(), bf.tolist(), zp):
            mismatches.append(("fc", h, w, c))
        count += 1
    return count, mismatches


def test_criterion_6_oracle_equivalence():
    with Timer() as t:
        count, mismatches = _oracle_sweep()
        ok = not mismatches and count > 0
    detail = f"{count} conv/depthwise/FC shape cases bit-exact vs naive integer loops, mismatches {mismatches[:3]}"
    assert verdict(6, "integer oracle equivalence", ok, detail, t.elapsed, 60.0)


# gaze output drift allowed between float and int8 end to end, in output steps
E2E_BOUND_STEPS = 8


def _e2e_once(tmp_path):
    base = netgraph.build_tinytracker()
    seeded = netgraph.init_random_weights(base, seed=42)
    manifest = modelio.export_float_weights(seeded, tmp_path / "weights")
    fgraph = modelio.import_float_weights(base, manifest)
    calib = synthetic_inputs(8, seed=5)
    qgraph = ptq.quantize_graph(fgraph, ptq.calibrate(fgraph, calib))
    qpath = tmp_path / "q.ttrk"
    modelio.save_model(qgraph, qpath)
    rng = np.random.default_rng(9)
    yy, xx = np.mgrid[0:120, 0:160]
    px = np.clip(128 + 90 * np.sin(xx / 13.0) * np.cos(yy / 9.0) + rng.normal(0, 15, (120, 160)), 0, 255)
    img = tmp_path / "probe.pgm"
    modelio.save_image(px.astype(np.uint8), img)
    crop = CropBox(40, 20, 72, 72, 160, 120)
    x = preprocess(modelio.load_image(img), crop, 112)
    loaded = modelio.load_model(qpath)
    fy = netgraph.execute(fgraph, [x])[0]
    qy = netgraph.execute(loaded, [x])[0]
    return fy, qy, loaded, qpath.read_bytes()


def test_criterion_7_end_to_end(tmp_path, capsys):
    with Timer() as t:
        fy, qy, qgraph, blob = _e2e_once(tmp_path / "a")
        fy2, qy2, _, blob2 = _e2e_once(tmp_path / "b")
        s_out = qgraph.act_qparams["gaze:q"].scale
        drift = float(np.max(np.abs(fy.data.astype(np.float64) - qy.data)))
        # the same inference through the command line
        argv = ["infer", "--model", str(tmp_path / "a" / "q.ttrk"), "--image", str(tmp_path / "a" / "probe.pgm"),
                "--crop", "40,20,72,72", "--frame", "160,120"]
        runs = []
        for _ in range(2):
            code = cli.main(argv)
            runs.append((code, capsys.readouterr().out))
        cli_vals = [float(v) for v in runs[0][1].split()[1:]]
        ok = (
            qy.shape == (1, 2) and qy.data.dtype == np.float32 and bool(np.all(np.isfinite(qy.data)))
            and drift <= E2E_BOUND_STEPS * s_out
            and np.array_equal(fy.data, fy2.data) and np.array_equal(qy.data, qy2.data) and blob == blob2
            and runs[0] == runs[1] and runs[0][0] == 0
            and np.allclose(cli_vals, qy.data.reshape(-1), atol=5e-6)
        )
    detail = (
        f"float {fy.data.reshape(-1).round(5).tolist()} int8 {qy.data.reshape(-1).round(5).tolist()}, "
        f"drift {drift:.2e} = {drift / s_out:.2f} s_out (bound {E2E_BOUND_STEPS}), repeat runs bit-identical"
    )
    assert verdict(7, "end-to-end smoke", ok, detail, t.elapsed, 30.0)


def test_criterion_8_format_robustness(tmp_path, capsys):
    with Timer() as t:
        small = netgraph.build_tinytracker(
            netgraph.TinyTrackerConfig(resolution=16, stages=netgraph.DEFAULT_STAGES[:2], last_channels=32,
                                       head_channels=16, fc_hidden=8)
        )
        model_path = tmp_path / "small.ttrk"
        modelio.save_model(small, model_path)
        blob = model_path.read_bytes()
        rng = np.random.default_rng(8)
        crashes, lib_rejects, cli_threes = [], 0, 0
        target = tmp_path / "mut.ttrk"
        n_container = 0
        while n_container < 1000:
            m = mutate_container(blob, rng)
            if m == blob:
                continue
            n_container += 1
            try:
                modelio.deserialize_model(m)
            except FormatError:
                lib_rejects += 1
            except Exception as exc:  # noqa: BLE001 - any other exception is a crash
                crashes.append(repr(exc))
            target.write_bytes(m)
            cli_threes += cli.main(["profile", "--model", str(target)]) == 3
        base_img = modelio.encode_pnm(np.arange(48, dtype=np.uint8).reshape(4, 4, 3))
        img_target = tmp_path / "mut.ppm"
        n_image = 0
        while n_image < 1000:
            m = mutate_pnm(base_img, rng)
            if m == base_img:
                continue
            n_image += 1
            try:
                modelio.decode_pnm(m)
            except FormatError:
                lib_rejects += 1
            except Exception as exc:  # noqa: BLE001
                crashes.append(repr(exc))
            img_target.write_bytes(m)
            cli_threes += cli.main(["infer", "--model", str(model_path), "--image", str(img_target)]) == 3
        capsys.readouterr()
        total = n_container + n_image
        ok = not crashes and lib_rejects == total and cli_threes == total
    detail = (
        f"{n_container} container + {n_image} image mutations: {lib_rejects} clean rejections, "
        f"{cli_threes} CLI exit 3, {len(crashes)} crashes"
    )
    assert verdict(8, "format robustness", ok, detail, t.elapsed, 60.0)


def test_criterion_9_evaluation_arithmetic(tmp_path):
    with Timer() as t:
        rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(200):
            n1, n2 = int(rng.integers(1, 200)), int(rng.integers(1, 200))
            scale = 10.0 ** rng.uniform(-3, 3)
            d1 = (rng.exponential(scale, n1)).tolist()
            d2 = (rng.exponential(scale, n2)).tolist()
            u = evalkit.summarize(d1 + d2)
            a, b = evalkit.summarize(d1), evalkit.summarize(d2)
            weighted = (a.count * a.mean_cm + b.count * b.mean_cm) / (a.count + b.count)
            perm = evalkit.summarize(list(rng.permutation(d1 + d2)))
            worst = max(worst, abs(u.mean_cm - weighted) / max(1.0, u.mean_cm), abs(u.mean_cm - perm.mean_cm))
            if perm.median_cm != u.median_cm:
                worst = math.inf
        # the same identities through the full evaluation pipeline
        g = netgraph.init_random_weights(netgraph.build_tinytracker(netgraph.TinyTrackerConfig(
            resolution=32, stages=netgraph.DEFAULT_STAGES[:3], last_channels=64, head_channels=32, fc_hidden=16)), 1)
        recs = write_frames(tmp_path, 6, seed=12)
        ds = evalkit.load_manifest(write_manifest(tmp_path / "d.jsonl", recs))
        full = evalkit.evaluate(g, ds)
        part = [evalkit.evaluate(g, ds[:2]), evalkit.evaluate(g, ds[2:])]
        rev = evalkit.evaluate(g, ds[::-1])
        weighted = (part[0].count * part[0].mean_cm + part[1].count * part[1].mean_cm) / full.count
        worst = max(worst, abs(full.mean_cm - weighted), abs(full.mean_cm - rev.mean_cm))
        fixtures = (
            evalkit.euclidean_error((0, 0), (3, 4)) == 5.0
            and evalkit.euclidean_error((2.5, -1), (2.5, -1)) == 0.0
            and abs(evalkit.euclidean_error((1, 1), (2, 2)) - math.sqrt(2)) < 1e-15
        )
        ok = worst <= 1e-12 and fixtures
    detail = f"worst identity deviation {worst:.2e} (tolerance 1e-12), (0,0)-(3,4) -> 5.0 exact: {fixtures}"
    assert verdict(9, "evaluation arithmetic", ok, detail, t.elapsed, 60.0)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
