"""Acceptance criteria 1 to 10; the terminal summary prints one PASS/FAIL line per criterion."""
import itertools
import json
import math
import time

import numpy as np
import pytest

from mtconv import ops
from mtconv.cli import Experiment, run_command, shipped_config
from mtconv.complexity import count_params, delta_sweep
from mtconv.data import SyntheticSpec, gen_synthetic
from mtconv.multitemporal import MTConvConfig, build_mtconv, mtconv_forward, split_channels
from mtconv.network import NetworkConfig, build_network
from mtconv.pooling import adjacent_cosine, softpool_spatial, triplet_select
from mtconv.recurrent import CellState, cell_step, init_cell
from mtconv.suite import TOLERANCE, run_suite
from mtconv.tensor import ParamStore, Tensor
from mtconv.train import TrainConfig, cosine_lr, train_loop

SWEEP = [1.0, 7 / 8, 3 / 4, 5 / 8, 1 / 2, 3 / 8, 1 / 4]


def report(number, ok, detail):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


# -- 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient suite rel err <= 1e-4, runtime <= 5 min")
def test_c1_gradient_suite():
    start = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.error)
    names = {r.name for r in results}
    ok = all(r.passed for r in results) and elapsed <= 300
    report(1, ok, f"{len(results)} checks, worst {worst.name}={worst.error:.2e}, {elapsed:.0f}s")
    assert "micro_mtnet" in names and "mtconv" in names
    assert TOLERANCE == 1e-4
    assert all(r.passed for r in results), [(r.name, r.error) for r in results if not r.passed]
    assert elapsed <= 300


# -- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "MTConv(delta=1) equals Conv3D-BN-ReLU to 1e-12")
def test_c2_delta_one_degeneracy():
    r = np.random.default_rng(2)
    worst = 0.0
    for seed in range(5):
        c_in, c_out = int(r.integers(1, 6)), int(r.integers(1, 9))
        cfg = MTConvConfig(c_in, c_out, delta=1.0)
        store = build_mtconv(cfg, seed=seed)
        x = Tensor(r.normal(size=(2, c_in, 4, 5, 5)))
        out = mtconv_forward(x, store.scope("mtconv"), cfg).data
        plain = ops.relu(ops.batch_norm3d(ops.conv3d(x, store["mtconv.local.weight"], padding=1),
                                          store["mtconv.local.bn.gamma"], store["mtconv.local.bn.beta"])).data
        worst = max(worst, float(np.abs(out - plain).max()))
    report(2, worst <= 1e-12, f"max abs diff {worst:.1e}")
    assert worst <= 1e-12


# -- 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "C_L + C_P == C~ on 1e4 fuzzed pairs; (64, 7/8) -> (56, 8)")
def test_c3_channel_split():
    r = np.random.default_rng(3)
    bad = []
    for _ in range(10_000):
        c = int(r.integers(1, 4097))
        delta = float(1.0 - r.random())
        if sum(split_channels(c, delta)) != c:
            bad.append((c, delta))
    ok = not bad and split_channels(64, 7 / 8) == (56, 8)
    report(3, ok, f"{len(bad)} violations")
    assert not bad
    assert split_channels(64, 7 / 8) == (56, 8)


# -- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "SoftPool constant identity, strict bounds, {1,2} -> 1.731059")
def test_c4_softpool():
    r = np.random.default_rng(4)
    constant_ok = all(np.all(softpool_spatial(Tensor(np.full((1, 1, 2, 2), v))).data == v)
                      for v in r.normal(0, 10, size=500))
    inside = 0
    for _ in range(2000):
        win = r.normal(0, 3, size=4)
        out = softpool_spatial(Tensor(win.reshape(1, 1, 2, 2))).data.item()
        inside += win.min() < out < win.max()
    pair = softpool_spatial(Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2)), kernel=(1, 2)).data.item()
    ok = constant_ok and inside == 2000 and abs(pair - 1.731059) <= 1e-6
    report(4, ok, f"constant exact={constant_ok}, inside {inside}/2000, pair={pair:.7f}")
    assert constant_ok and inside == 2000
    assert abs(pair - 1.731059) <= 1e-6


# -- 5 ---------------------------------------------------------------------------

def _oracle_selection(frames):
    t = frames.shape[1]
    sims = []
    for i in range(t - 1):
        a, b = frames[:, i], frames[:, i + 1]
        den = math.sqrt(a @ a) * math.sqrt(b @ b)
        sims.append(0.0 if den == 0 else min(1.0, max(-1.0, (a @ b) / den)))
    score = [2 * sims[0]] + [sims[i - 1] + sims[i] for i in range(1, t - 1)] + [2 * sims[-1]]
    best = min(itertools.combinations(range(t), t // 2), key=lambda c: sorted((score[i], i) for i in c))
    return list(best)


@pytest.mark.criterion(5, "frame selection equals brute force on 1000 instances per even T <= 8")
def test_c5_frame_selection():
    mismatches = 0
    for t in (2, 4, 6, 8):
        r = np.random.default_rng(50 + t)
        for k in range(1000):
            frames = r.integers(-1, 2, size=(2, t)).astype(float) if k % 3 == 0 else r.normal(size=(4, t))
            sel = triplet_select(adjacent_cosine(frames), t).indices
            assert len(sel) == t // 2 and sel == sorted(set(sel))
            mismatches += sel != _oracle_selection(frames)
    report(5, mismatches == 0, f"{mismatches} mismatches over 4000 instances")
    assert mismatches == 0


# -- 6 ---------------------------------------------------------------------------

def _scalar_gru(p, x, h):
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    n = len(h)
    hx = list(h) + list(x)
    pre = {g: [sum(p.weights[g].data[i, j] * hx[j] for j in range(len(hx))) + p.biases[g].data[i]
               for i in range(n)] for g in ("z", "r")}
    z = [sig(v) for v in pre["z"]]
    r = [sig(v) for v in pre["r"]]
    rhx = [r[i] * h[i] for i in range(n)] + list(x)
    cand = [math.tanh(sum(p.weights["h"].data[i, j] * rhx[j] for j in range(len(rhx))) + p.biases["h"].data[i])
            for i in range(n)]
    return [z[i] * h[i] + (1 - z[i]) * cand[i] for i in range(n)]


@pytest.mark.criterion(6, "GRU matches scalar oracle to 1e-12; |h| <= 1 over 1000 rollouts")
def test_c6_gru():
    r = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        store = ParamStore()
        p = init_cell(store.scope("g"), "gru", 3, 3, r)
        for _, t in store.items():
            t.data[...] = r.normal(size=t.shape)
        x, h = r.normal(size=3), r.uniform(-1, 1, size=3)
        got = cell_step("gru", Tensor(x), CellState(Tensor(h)), p).hidden.data
        worst = max(worst, float(np.abs(got - _scalar_gru(p, x, h)).max()))
    bounded = 0
    for _ in range(1000):
        store = ParamStore()
        p = init_cell(store.scope("g"), "gru", 3, 3, r)
        for _, t in store.items():
            t.data[...] = r.normal(0, 2, size=t.shape)
        h = Tensor(r.uniform(-1, 1, size=3))
        ok = True
        for _ in range(8):
            h = cell_step("gru", Tensor(r.normal(0, 3, size=3)), CellState(h), p).hidden
            ok &= bool(np.all(np.abs(h.data) <= 1.0))
        bounded += ok
    report(6, worst <= 1e-12 and bounded == 1000, f"oracle diff {worst:.1e}, bounded {bounded}/1000")
    assert worst <= 1e-12
    assert bounded == 1000


# -- 7 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_rows():
    return delta_sweep(NetworkConfig.load(shipped_config("toy_net.json")), SWEEP)


@pytest.mark.criterion(7, "complexity sweep: FLOPs decrease, params minimal at 1/2, >= 15% cut at 7/8")
def test_c7_flops_strictly_decrease(sweep_rows):
    flops = [r.flops for r in sweep_rows]
    ok = all(a > b for a, b in zip(flops, flops[1:]))
    report(7, ok, "FLOPs strictly decreasing: " + " > ".join(f"{r.gflops:.3f}" for r in sweep_rows))
    assert ok


@pytest.mark.criterion(7, "complexity sweep: FLOPs decrease, params minimal at 1/2, >= 15% cut at 7/8")
def test_c7_params_minimum_at_half(sweep_rows):
    params = {r.delta: r.params for r in sweep_rows}
    argmin = min(params, key=params.get)
    report(7, argmin == 0.5, f"params minimum at delta={argmin:g}: "
           + ", ".join(f"{d:g}:{p}" for d, p in params.items()))
    assert argmin == 0.5


@pytest.mark.criterion(7, "complexity sweep: FLOPs decrease, params minimal at 1/2, >= 15% cut at 7/8")
def test_c7_flop_reduction_at_seven_eighths(sweep_rows):
    by = {r.delta: r.flops for r in sweep_rows}
    cut = 1.0 - by[7 / 8] / by[1.0]
    report(7, cut >= 0.15, f"FLOP reduction at 7/8: {cut:.1%}")
    assert cut >= 0.15


# -- 8 ---------------------------------------------------------------------------

@pytest.mark.criterion(8, "cosine_lr exact at 0, n_max/2, n_max; warm-up boundary continuous")
def test_c8_schedule():
    errs = []
    for lr0, n_max in [(0.1, 100), (1.0, 1000), (0.37, 64)]:
        cfg = TrainConfig(lr0=lr0, n_max=n_max)
        errs += [abs(cosine_lr(0, cfg) - lr0), abs(cosine_lr(n_max / 2, cfg) - lr0 / 2), abs(cosine_lr(n_max, cfg))]
    warm = TrainConfig(lr0=0.1, n_max=100, warmup_iters=10)
    jump = abs(cosine_lr(10 - 1e-9, warm) - cosine_lr(10, warm))
    ok = max(errs) <= 1e-12 and jump <= 1e-9
    report(8, ok, f"max error {max(errs):.1e}, warm-up jump {jump:.1e}")
    assert max(errs) <= 1e-12
    assert jump <= 1e-9


# -- 9 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_experiment():
    return Experiment(json.loads(shipped_config("train_toy.json").read_text()))


@pytest.mark.slow
@pytest.mark.criterion(9, "toy MTNet <= 100k params: overfit 32 clips, >= 90% val, <= 15 min")
def test_c9_desk_scale_learning(toy_experiment):
    exp = toy_experiment
    start = time.perf_counter()

    _, net = build_network(exp.network, exp.init_seed)
    n_params = count_params(net)
    train = gen_synthetic(exp.train_data)
    val = gen_synthetic(exp.val_data)
    assert len(train[1]) == 64 and len(val[1]) == 32
    result = train_loop(net, train, exp.train, val=val)
    val_acc = result.history[-1].val_acc

    overfit_spec = SyntheticSpec.from_json({**exp.train_data.to_json(), "per_class": 8})
    clips = gen_synthetic(overfit_spec)
    assert len(clips[1]) == 32
    _, net32 = build_network(exp.network, exp.init_seed)
    cfg32 = TrainConfig.from_json({**exp.train.to_json(), "epochs": 200})
    overfit = train_loop(net32, clips, cfg32, stop_at_train_acc=1.0)
    overfit_acc = overfit.history[-1].train_acc

    elapsed = time.perf_counter() - start
    ok = n_params <= 100_000 and val_acc >= 0.9 and overfit_acc == 1.0 and elapsed <= 900
    report(9, ok, f"{n_params} params, val acc {val_acc:.3f}, overfit {overfit_acc:.3f} after "
           f"{len(overfit.history)} epochs, {elapsed:.0f}s")
    assert n_params <= 100_000
    assert val_acc >= 0.9
    assert overfit_acc == 1.0 and len(overfit.history) <= 200
    assert elapsed <= 900


# -- 10 --------------------------------------------------------------------------

@pytest.mark.criterion(10, "two identical train runs give bit-identical checkpoints and history")
def test_c10_determinism(tmp_path):
    config = str(shipped_config("micro_train.json"))
    for run in ("a", "b"):
        assert run_command(["train", "--config", config, "--out", str(tmp_path / run), "--seed", "3"]) == 0
    names = ["params.mtn", "params.mtn.index.json", "buffers.mtn", "buffers.mtn.index.json", "history.csv"]
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    report(10, all(same.values()), ", ".join(f"{n}={'same' if s else 'DIFFERENT'}" for n, s in same.items()))
    assert all(same.values())
