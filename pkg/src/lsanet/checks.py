"""Finite-difference gradient suites over every differentiable op and loss.

Each case builds a tiny random instance from a seed and compares
``backward`` with central differences.  Losses on an op's output are
contracted with a fixed random tensor so every output entry matters.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .gradcheck import CheckResult, check_gradients
from .lsa import EmbedConfig, build_embedding, build_lsa, embed_stage, lsa_weights, plan_embedding
from .nn import BackboneSpec, build_backbone, classify, forward_with_taps
from .supervision import (cross_entropy, dsn_loss, knowledge_synergy_loss, lsa_weighted_loss,
                          total_objective)
from .tensor import Tensor

TINY_BACKBONE = BackboneSpec(in_channels=2, input_size=8, channels=(2, 3, 3, 4))
TINY_EMBED = EmbedConfig(kernels=(5, 3, 3, 1), channels=2)
# instances with a ReLU input or max-pool runner-up closer than this to
# a kink are redrawn: central differences straddling a kink are meaningless
KINK_MARGIN = 3e-4
MAX_DRAWS = 50


def _smooth(fn: Callable[[], Tensor]) -> bool:
    with T.no_grad(), T.kink_monitor() as kinks:
        fn()
    return min(kinks, default=np.inf) > KINK_MARGIN


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _contract(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(out * weights)


def _probs(rng, n, c) -> tuple[Tensor, Callable[[], Tensor]]:
    logits = _param(rng, n, c)
    return logits, lambda: T.softmax(logits, axis=1)


# ----------------------------------------------------------------------
# tensor ops


def tensor_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, 8))
    x, w, b = _param(rng, n, c, h, h), _param(rng, o, c, k, k), _param(rng, o)
    ho = (h + 2 * pad - k) // stride + 1
    r = rng.standard_normal((n, o, ho, ho))
    yield "conv2d", lambda: _contract(T.conv2d(x, w, b, stride, pad), r), [x, w, b]

    xd, wd, bd = _param(rng, 3, 5), _param(rng, 5, 4), _param(rng, 4)
    rd = rng.standard_normal((3, 4))
    yield "dense", lambda: _contract(T.dense(xd, wd, bd), rd), [xd, wd, bd]

    # keep elementwise inputs away from the ReLU kink
    xe = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 2.0, size=(3, 4)), requires_grad=True)
    re = rng.standard_normal((3, 4))
    yield "relu", lambda: _contract(T.relu(xe), re), [xe]
    yield "sigmoid", lambda: _contract(T.sigmoid(xe), re), [xe]
    axis = int(rng.integers(0, 2))
    yield f"softmax(axis={axis})", lambda: _contract(T.softmax(xe, axis=axis), re), [xe]

    xg = _param(rng, 2, 3, 4, 5)
    rg = rng.standard_normal((2, 3))
    yield "global_avg_pool", lambda: _contract(T.global_avg_pool(xg), rg), [xg]

    kp = int(rng.integers(2, 4))
    sp = int(rng.integers(1, kp + 1))
    xm = _param(rng, 2, 2, 7, 7)
    hm = (7 - kp) // sp + 1
    rm = rng.standard_normal((2, 2, hm, hm))
    yield "maxpool2d", lambda: _contract(T.maxpool2d(xm, kp, sp), rm), [xm]

    xa, xb = _param(rng, 2, 3), _param(rng, 2, 3)
    rc = rng.standard_normal((2, 6))

    def composite():
        cat = T.concat([T.exp(xa * 0.3), xb * xb], axis=1)
        parts = T.split(cat, 2, axis=1)
        return _contract(T.concat(parts[::-1], axis=1), rc) + T.mean(T.log(T.clamp_min(T.exp(xa), 1e-12)))

    yield "concat/split/exp/log/mul", composite, [xa, xb]


# ----------------------------------------------------------------------
# feature embedding and attention


def _tiny_lsa(rng, seed):
    backbone, heads = build_backbone(TINY_BACKBONE, 3, seed)
    plan = plan_embedding(TINY_EMBED, TINY_BACKBONE.stage_shapes())
    emb = build_embedding(plan, (1, 2, 3, 4), seed)
    lsa = build_lsa(4, plan.channels, seed, reduction=2)
    # generic (non-zero) biases so no ReLU sits exactly at its kink
    for p in backbone.parameters() + emb.parameters() + [h.bias for h in heads]:
        if p.name.endswith("bias"):
            p.data = 0.1 * rng.standard_normal(p.shape)
    return backbone, heads, emb, lsa


def lsa_cases(rng: np.random.Generator, seed: int):
    for _ in range(MAX_DRAWS):
        backbone, heads, emb, lsa = _tiny_lsa(rng, seed)
        feats = [_param(rng, 2, *s) for s in TINY_BACKBONE.stage_shapes()]
        r = rng.standard_normal(4)

        def beta_loss():
            embedded = [embed_stage(f, s, emb) for s, f in enumerate(feats, start=1)]
            return _contract(lsa_weights(embedded, lsa), r)

        if _smooth(beta_loss):
            break
    else:
        raise RuntimeError(f"no kink-free attention instance in {MAX_DRAWS} draws")

    yield "embed+lsa_weights", beta_loss, feats + emb.parameters() + lsa.parameters()


# ----------------------------------------------------------------------
# losses


def supervision_cases(rng: np.random.Generator, seed: int):
    n, c = 4, 3
    labels = rng.integers(0, c, size=n)
    logits = [_param(rng, n, c) for _ in range(4)]

    def outs():
        return [T.softmax(z, axis=1) for z in logits]

    yield "cross_entropy", lambda: cross_entropy(outs()[-1], labels), logits[-1:]
    alpha = rng.uniform(0, 1, size=3).tolist()
    yield "dsn_loss", lambda: dsn_loss(outs(), labels, alpha), logits
    zb = _param(rng, 4)
    yield "lsa_weighted_loss", lambda: lsa_weighted_loss(outs(), labels, T.softmax(zb, axis=0)), logits + [zb]

    # the KL targets are constants in the analytic gradient; freeze them here too
    with T.no_grad():
        frozen = [p.detach() for p in outs()]
    mu = rng.uniform(0.5, 1.5, size=(4, 4))
    yield "knowledge_synergy_loss", lambda: knowledge_synergy_loss(outs(), mu, targets=frozen), logits

    for _ in range(MAX_DRAWS):
        backbone, heads, emb, lsa = _tiny_lsa(rng, seed)
        x = Tensor(rng.uniform(0, 1, size=(3, TINY_BACKBONE.in_channels, 8, 8)))
        y = rng.integers(0, 3, size=3)

        def model_outputs():
            feats = forward_with_taps(backbone, x)
            probs = [classify(h, feats[h.stage]) for h in heads]
            beta = lsa_weights([embed_stage(feats[s], s, emb) for s in (1, 2, 3, 4)], lsa)
            return probs, beta

        if _smooth(model_outputs):
            break
    else:
        raise RuntimeError(f"no kink-free model instance in {MAX_DRAWS} draws")

    with T.no_grad():
        frozen_model = [p.detach() for p in model_outputs()[0]]

    def full():
        probs, beta = model_outputs()
        return total_objective("lsanet", probs, y, beta=beta, mu=1.0, ks_targets=frozen_model)[0]

    params = backbone.parameters() + [p for h in heads for p in h.parameters()]
    params += emb.parameters() + lsa.parameters()
    yield "lsanet objective (backbone+heads+embed+lsa)", full, params


SUITES = ("tensor", "lsa", "supervision")


def run_suite(module: str = "all", seeds: int = 20, max_coords: int = 4) -> list[CheckResult]:
    modules = SUITES if module == "all" else (module,)
    results = []
    for mod in modules:
        if mod not in SUITES:
            raise ValueError(f"unknown gradcheck module {mod!r}")
        for seed in range(seeds):
            rng = np.random.default_rng([seed, SUITES.index(mod)])
            cases = {"tensor": lambda: tensor_cases(rng),
                     "lsa": lambda: lsa_cases(rng, seed),
                     "supervision": lambda: supervision_cases(rng, seed)}[mod]()
            for name, fn, params in cases:
                res = check_gradients(f"{mod}/{name}", fn, params, rng=rng, max_coords=max_coords)
                res.name += f" [seed {seed}]"
                results.append(res)
    return results


def summarize(results: list[CheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        key = r.name.rsplit(" [", 1)[0]
        worst[key] = max(worst.get(key, 0.0), r.max_rel_error)
    return worst
