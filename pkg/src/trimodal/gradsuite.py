"""Gradient-check cases for every differentiable op and for the whole network.

Each case builder takes a seed and returns ``(fn, params, resample)``; the
scalar ``fn()`` contracts the op output with a fixed random tensor so every
output coordinate contributes to the gradient.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Param
from .model import ModelConfig, TriModalNet, modulate, pairwise_attention, score_aggregate


def _contract(out, gen):
    weights = gen.standard_normal(out.shape)
    return dc.mean(dc.mul(out, weights), None)


def _case(op, shapes, gen, extra=None):
    """Params named ``x0, x1, ...`` drawn N(0,1) with the given shapes."""
    params = [Param(f"x{i}", gen.standard_normal(s)) for i, s in enumerate(shapes)]
    weights_gen = np.random.default_rng(gen.integers(1 << 31))
    w_seed = int(weights_gen.integers(1 << 31))

    def fn():
        out = op(*params) if extra is None else op(*params, **extra)
        return _contract(out, np.random.default_rng(w_seed))

    def resample():
        for p in params:
            p.value[...] = gen.standard_normal(p.value.shape)

    return fn, params, resample


def _bn_case(gen, train):
    x = Param("x", gen.standard_normal((4, 3, 5)))
    gamma = Param("gamma", gen.uniform(0.5, 1.5, 3))
    beta = Param("beta", gen.standard_normal(3))
    running = dc.BatchNormState(gen.standard_normal(3), gen.uniform(0.5, 2, 3), 1)
    w_seed = int(gen.integers(1 << 31))

    def fn():
        # a fresh copy keeps repeated evaluations pure
        state = dc.BatchNormState(running.running_mean.copy(), running.running_var.copy(), 1)
        out = dc.batchnorm(x, gamma, beta, state, train=train)
        return _contract(out, np.random.default_rng(w_seed))

    return fn, [x, gamma, beta], None


def _dropout_case(gen):
    drop_seed = int(gen.integers(1 << 31))
    return _case(lambda x: dc.dropout(x, 0.3, np.random.default_rng(drop_seed)), [(4, 6)], gen)


def _xent_case(gen):
    labels = gen.integers(0, 3, 5)
    logits = Param("logits", gen.standard_normal((5, 3)) * 2)
    return (lambda: dc.cross_entropy(logits, labels)), [logits], None


def _gate_case(gen):
    phi = Param("phi", gen.standard_normal((2, 4, 3)))
    a = Param("a", gen.standard_normal((2, 4, 3)))
    wq = Param("wq", gen.standard_normal((3, 2)))
    wk = Param("wk", gen.standard_normal((3, 2)))
    w_seed = int(gen.integers(1 << 31))

    def fn():
        scores = score_aggregate(pairwise_attention(a, phi, wq, wk))
        return _contract(modulate(phi, [scores]), np.random.default_rng(w_seed))

    return fn, [phi, a, wq, wk], None


OP_CASES = {
    "add": lambda g: _case(dc.add, [(3, 4), (4,)], g),
    "mul": lambda g: _case(dc.mul, [(3, 4), (3, 1)], g),
    "scale": lambda g: _case(lambda x: dc.scale(x, -1.7), [(3, 4)], g),
    "matmul": lambda g: _case(dc.matmul, [(2, 3, 4), (4, 5)], g),
    "transpose": lambda g: _case(lambda x: dc.transpose(x, (2, 0, 1)), [(2, 3, 4)], g),
    "reshape": lambda g: _case(lambda x: dc.reshape(x, (6, 4)), [(2, 3, 4)], g),
    "concat": lambda g: _case(lambda a, b: dc.concat([a, b], 1), [(2, 3), (2, 2)], g),
    "mean": lambda g: _case(lambda x: dc.mean(x, (0, 2)), [(2, 3, 4)], g),
    "relu": lambda g: _case(dc.relu, [(4, 5)], g),
    "sigmoid": lambda g: _case(dc.sigmoid, [(4, 5)], g),
    "softmax": lambda g: _case(lambda x: dc.softmax(x, -1), [(3, 5)], g),
    "dropout": _dropout_case,
    "channel_shuffle": lambda g: _case(lambda x: dc.channel_shuffle(x, 2), [(2, 6, 3)], g),
    "linear": lambda g: _case(dc.linear, [(3, 4), (4, 2), (2,)], g),
    "global_avg_pool": lambda g: _case(dc.global_avg_pool, [(2, 3, 4, 5)], g),
    "maxpool1d": lambda g: _case(lambda x: dc.maxpool1d(x, 2), [(2, 3, 9)], g),
    "conv1d": lambda g: _case(lambda x, w, b: dc.conv1d(x, w, b, stride=2, padding=1),
                              [(2, 3, 9), (4, 3, 3), (4,)], g),
    "conv2d": lambda g: _case(lambda x, w: dc.conv2d(x, w, stride=2, padding=1),
                              [(2, 3, 7, 6), (4, 3, 3, 3)], g),
    "conv2d_grouped": lambda g: _case(lambda x, w: dc.conv2d(x, w, padding=1, groups=2),
                                      [(2, 4, 5, 5), (4, 2, 3, 3)], g),
    "conv2d_depthwise": lambda g: _case(lambda x, w: dc.conv2d(x, w, stride=2, padding=1, groups=3),
                                        [(2, 3, 6, 6), (3, 1, 3, 3)], g),
    "batchnorm_train": lambda g: _bn_case(g, True),
    "batchnorm_eval": lambda g: _bn_case(g, False),
    "cross_entropy": _xent_case,
    "attention_gate": _gate_case,
}

TINY_MODEL = dict(frame_channels=1, n_mfcc=3, stem_channels=2, block_channels=(2, 2),
                  block_strides=(2, 1), stage2_channels=2, stage3_channels=2,
                  audio_channels=(2, 2, 2, 2), latent_dim=2, dropout=0.0)


def network_case(gen, mask="A-V-R"):
    """The full forward graph (train mode, cross-entropy) on a miniature config."""
    net = TriModalNet(ModelConfig(**TINY_MODEL), mask, gen, dtype=np.float64)
    inputs = {}

    def resample():
        inputs.update(audio=gen.standard_normal((2, 3, 16)),
                      face=gen.standard_normal((2, 2, 1, 8, 8)),
                      road=gen.standard_normal((2, 2, 1, 8, 8)))

    resample()
    labels = np.array([0, 1])
    return (lambda: dc.cross_entropy(net.forward(inputs, train=True), labels)), net.parameters(), resample


@dataclass
class SuiteResult:
    reports: dict = field(default_factory=dict)   # (case, seed) -> GradCheckReport
    seconds: float = 0.0

    @property
    def passed(self):
        return all(r.passed for r in self.reports.values())

    def lines(self):
        out = []
        for (case, seed), r in sorted(self.reports.items()):
            out.append(f"{case}\tseed={seed}\t{'PASS' if r.passed else 'FAIL'}\t"
                       f"max_err={r.max_error:.3g}\tcoords={r.coordinates}\t"
                       f"kink_skips={len(r.kink_skips)}\tresamples={r.resamples}")
        return out


def run_suite(seeds=range(20), cases=None, network=True, eps=1e-4, tol=1e-3):
    cases = list(OP_CASES) if cases is None else list(cases)
    result = SuiteResult()
    start = time.process_time()
    for seed in seeds:
        for name in cases:
            gen = np.random.default_rng([seed, sum(map(ord, name))])
            fn, params, resample = OP_CASES[name](gen)
            result.reports[(name, seed)] = dc.gradient_check(fn, params, eps, tol, resample)
        if network:
            gen = np.random.default_rng([seed, 7])
            fn, params, resample = network_case(gen)
            result.reports[("network", seed)] = dc.gradient_check(fn, params, eps, tol, resample)
    result.seconds = time.process_time() - start
    return result
