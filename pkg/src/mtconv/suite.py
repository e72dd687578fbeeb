"""The finite-difference gradient suite run by ``mtconv gradcheck`` and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops, pooling
from .gradcheck import grad_check
from .multitemporal import MTConvConfig, RunContext, build_mtconv, mtconv_forward
from .network import BlockConfig, NetworkConfig, StemConfig, build_network, init_block, mtblock_forward
from .recurrent import CELL_GATES, CellState, cell_step, init_cell, run_dual_layer
from .tensor import ParamStore, Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def _t(rng, *shape, scale=1.0, away_from_zero=0.0):
    v = rng.normal(0.0, scale, size=shape)
    if away_from_zero:
        v = np.where(np.abs(v) < away_from_zero, np.sign(v + 1e-12) * (away_from_zero + np.abs(v)), v)
    return Tensor(v, requires_grad=True)


def micro_network_config() -> NetworkConfig:
    """About 2k parameters: one MTBlock over a 2 x 4 x 4 x 4 clip."""
    return NetworkConfig((2, 4, 4, 4), StemConfig(4), [BlockConfig(4, 4, delta=0.5)], 3)


def _op_checks(rng) -> list[tuple[str, Callable[[], float]]]:
    checks: list[tuple[str, Callable[[], float]]] = []

    def add(name, fn, inputs):
        checks.append((name, lambda: grad_check(fn, inputs)))

    x, w, b = _t(rng, 2, 4, 6, 6), _t(rng, 3, 2, 3, 3, 3, scale=0.3), _t(rng, 3)
    add("conv3d", lambda x, w, b: ops.conv3d(x, w, b, stride=1, padding=1), [x, w, b])
    xs, ws = _t(rng, 2, 2, 5, 6, 6), _t(rng, 3, 2, 3, 3, 3, scale=0.3)
    add("conv3d_strided_batched", lambda x, w: ops.conv3d(x, w, stride=(1, 2, 2), padding=1), [xs, ws])

    xb, g, be = _t(rng, 2, 3, 4, 4, 4), _t(rng, 3), _t(rng, 3)
    add("batch_norm3d_train", lambda x, g, b: ops.batch_norm3d(x, g, b, training=True), [xb, g, be])
    stats = ops.BatchNormStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    add("batch_norm3d_eval", lambda x, g, b: ops.batch_norm3d(x, g, b, stats, training=False),
        [_t(rng, 3, 4, 4, 4), _t(rng, 3), _t(rng, 3)])

    add("relu", ops.relu, [_t(rng, 3, 4, 4, 4, away_from_zero=1e-3)])
    add("sigmoid", ops.sigmoid, [_t(rng, 3, 4, 4, 4)])
    add("tanh", ops.tanh, [_t(rng, 3, 4, 4, 4)])
    add("concat_channels", ops.concat_channels, [_t(rng, 2, 2, 3, 3), _t(rng, 3, 2, 3, 3)])
    add("trilinear_interp", lambda v: ops.trilinear_interp(v, (4, 6, 5)), [_t(rng, 2, 2, 3, 3)])
    add("linear", ops.linear, [_t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)])
    add("cross_entropy", lambda z: ops.cross_entropy(z, [0, 2, 1]), [_t(rng, 3, 4)])

    add("softpool_spatial", pooling.softpool_spatial, [_t(rng, 2, 3, 4, 4)])
    add("softpool3d", lambda v: pooling.softpool3d(v, (2, 2, 2)), [_t(rng, 2, 4, 4, 4)])
    add("pool_avg", lambda v: pooling.pool_spatial(v, "avg"), [_t(rng, 2, 3, 4, 4)])
    add("pool_max", lambda v: pooling.pool_spatial(v, "max"), [_t(rng, 2, 3, 4, 4)])
    add("pool_stochastic_eval", lambda v: pooling.pool_spatial(v, "stochastic"),
        [_t(rng, 2, 3, 4, 4, away_from_zero=1e-3)])
    add("spatial_sum", pooling.spatial_sum, [_t(rng, 2, 3, 4, 4)])
    add("global_avg_pool", pooling.global_avg_pool, [_t(rng, 2, 3, 4, 4)])
    add("gather_frames", lambda v: pooling.gather_frames(v, [1, 2]), [_t(rng, 2, 4, 3, 3)])
    return checks


def _recurrent_checks(rng) -> list[tuple[str, Callable[[], float]]]:
    checks = []
    for kind in CELL_GATES:
        store = ParamStore()
        params = init_cell(store.scope("cell"), kind, 3, 2, rng)
        x, h = _t(rng, 2), _t(rng, 3, scale=0.5)
        c = _t(rng, 3, scale=0.5) if kind.startswith("lstm") else None

        def step(x, h, *rest, kind=kind, params=params, c=c):
            state = cell_step(kind, x, CellState(h, c), params)
            return state.hidden if state.cell is None else ops.concat([state.hidden, state.cell], axis=0)

        inputs = [x, h] + params.tensors()
        checks.append((f"cell_step_{kind}", lambda step=step, inputs=inputs: grad_check(step, inputs)))

    store = ParamStore()
    l1 = init_cell(store.scope("layer1"), "gru", 3, 3, rng)
    l2 = init_cell(store.scope("layer2"), "gru", 3, 3, rng)
    seq = _t(rng, 3, 4)
    checks.append(("dual_layer_gru", lambda: grad_check(lambda s, *p: run_dual_layer("gru", s, (l1, l2)),
                                                         [seq] + l1.tensors() + l2.tensors())))
    return checks


def _model_checks(rng) -> list[tuple[str, Callable[[], float]]]:
    checks = []
    cfg = MTConvConfig(4, 4, delta=0.75)
    store = build_mtconv(cfg, seed=int(rng.integers(1 << 30)))
    a = _t(rng, 2, 4, 4, 4, 4)
    fn = pooling.freeze_selections(lambda a, *p: mtconv_forward(a, store.scope("mtconv"), cfg, RunContext()))
    checks.append(("mtconv", lambda: grad_check(fn, [a] + [t for _, t in store.items()])))

    bcfg = BlockConfig(3, 4, delta=0.5)
    bstore = ParamStore()
    init_block(bstore.scope("block"), bcfg, rng)
    ab = _t(rng, 3, 4, 4, 4)
    bfn = pooling.freeze_selections(lambda a, *p: mtblock_forward(a, bstore.scope("block"), bcfg, RunContext()))
    checks.append(("mtblock", lambda: grad_check(bfn, [ab] + [t for _, t in bstore.items()])))

    ncfg = micro_network_config()
    nstore, net = build_network(ncfg, seed=int(rng.integers(1 << 30)))
    clip = _t(rng, 2, *ncfg.input_shape)
    nfn = pooling.freeze_selections(lambda c, *p: net.forward(c, training=True))
    checks.append(("micro_mtnet", lambda: grad_check(nfn, [clip] + [t for _, t in nstore.items()])))
    return checks


def all_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    return _op_checks(rng) + _recurrent_checks(rng) + _model_checks(rng)


def run_suite(seed: int = 0, names: set[str] | None = None) -> list[CheckResult]:
    results = []
    for name, run in all_checks(seed):
        if names is None or name in names:
            results.append(CheckResult(name, run()))
    return results
