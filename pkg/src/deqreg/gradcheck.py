"""Reverse-mode gradients versus central finite differences on random small models.

The reverse path builds an expression graph; the reference path evaluates
the same loss eagerly with numpy and differentiates it numerically.
Anchor states are constants on both paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .deq import (
    PARAM_NAMES, DeqModel, graph_head, graph_layer, graph_unroll, head_apply, init_model,
    layer_apply, model_nodes,
)

CHECKS = ("unrolled_ce", "entropy", "trades")


def _flat(model: DeqModel, x):
    return np.concatenate([getattr(model, n).ravel() for n in PARAM_NAMES] + [np.ravel(x)])


def _unflat(model: DeqModel, vec):
    out, pos = {}, 0
    for n in PARAM_NAMES:
        shape = getattr(model, n).shape
        size = int(np.prod(shape))
        out[n] = vec[pos:pos + size].reshape(shape)
        pos += size
    return model.with_params(**out), vec[pos:]


def _eager_unroll(model, z, x, steps):
    for _ in range(steps):
        z = layer_apply(model, z, x)
    return z


def _graph_grads(g, nodes, xn, out, model, x):
    res = ad.reverse_grad(g, out)
    return res.value, np.concatenate([res.grads[n].ravel() for n in PARAM_NAMES]
                                     + [res.grads[xn.name].ravel()])


def unrolled_ce_check(model: DeqModel, z0, x, label, K_p):
    """Cross-entropy after ``K_p`` steps from constant ``z0``; grads over params and ``x``."""
    g = ad.ExprGraph()
    nodes = model_nodes(g, model)
    xn = g.leaf(x, "x")
    z = graph_unroll(g, nodes, model.nonlinearity, g.const(z0), xn, K_p)
    out = ad.cross_entropy_node(g, graph_head(g, nodes, z), label)
    _, rev = _graph_grads(g, nodes, xn, out, model, x)

    def f(vec):
        m, xv = _unflat(model, vec)
        return ad.eval_cross_entropy(head_apply(m, _eager_unroll(m, z0, xv, K_p)), label)

    return rev, ad.finite_diff_grad(f, _flat(model, x))


def entropy_check(model: DeqModel, z_next, x):
    """Prediction entropy of ``h(f(z_next; x))`` with ``z_next`` constant."""
    g = ad.ExprGraph()
    nodes = model_nodes(g, model)
    xn = g.leaf(x, "x")
    ux = g.affine(nodes["U"], xn, nodes["b"])
    fz = graph_layer(g, nodes, model.nonlinearity, g.const(z_next), ux)
    out = ad.entropy_node(g, graph_head(g, nodes, fz))
    _, rev = _graph_grads(g, nodes, xn, out, model, x)

    def f(vec):
        m, xv = _unflat(model, vec)
        return ad.eval_pred_entropy(head_apply(m, layer_apply(m, z_next, xv)))

    return rev, ad.finite_diff_grad(f, _flat(model, x))


def trades_check(model: DeqModel, z_clean, z_adv, x, x_adv, label, K_p, weight=6.0):
    """``CE(clean) + weight * KL(p_adv || p_clean)``; grads over params and the clean ``x``."""
    g = ad.ExprGraph()
    nodes = model_nodes(g, model)
    xn = g.leaf(x, "x")
    lc = graph_head(g, nodes, graph_unroll(g, nodes, model.nonlinearity, g.const(z_clean), xn, K_p))
    la = graph_head(g, nodes, graph_unroll(g, nodes, model.nonlinearity, g.const(z_adv),
                                           g.const(x_adv), K_p))
    out = g.add(ad.cross_entropy_node(g, lc, label), g.scale(ad.kl_node(g, la, lc), weight))
    _, rev = _graph_grads(g, nodes, xn, out, model, x)

    def f(vec):
        m, xv = _unflat(model, vec)
        pc = head_apply(m, _eager_unroll(m, z_clean, xv, K_p))
        pa = head_apply(m, _eager_unroll(m, z_adv, x_adv, K_p))
        return ad.eval_cross_entropy(pc, label) + weight * ad.eval_kl(pa, pc)

    return rev, ad.finite_diff_grad(f, _flat(model, x))


@dataclass
class GradcheckSummary:
    n_instances: int
    max_rel_error: dict

    def passed(self, tol=1e-4):
        return all(v <= tol for v in self.max_rel_error.values())


def random_instance(rng, max_dim=8):
    l, d, C = (int(v) for v in rng.integers(2, max_dim + 1, size=3))
    model = init_model(l, d, C, rng, gamma=0.9)
    # non-zero biases so every parameter block gets a generic gradient
    model = model.with_params(b=0.3 * rng.standard_normal(d), c=0.3 * rng.standard_normal(C))
    x = rng.uniform(-1.5, 1.5, size=l)
    return model, x, int(rng.integers(C))


def run_gradchecks(n_instances=200, seed=0, K_p=5, max_dim=8) -> GradcheckSummary:
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(CHECKS, 0.0)
    for _ in range(n_instances):
        model, x, label = random_instance(rng, max_dim)
        d = model.dims[1]
        z0 = 0.5 * rng.standard_normal(d)
        z1 = 0.5 * rng.standard_normal(d)
        x_adv = x + rng.uniform(-0.1, 0.1, size=x.shape)
        errs = {
            "unrolled_ce": ad.relative_error(*unrolled_ce_check(model, z0, x, label, K_p)),
            "entropy": ad.relative_error(*entropy_check(model, z0, x)),
            "trades": ad.relative_error(*trades_check(model, z0, z1, x, x_adv, label, K_p)),
        }
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
    return GradcheckSummary(n_instances, worst)
