"""Double-precision central-difference checks for every differentiable piece."""

import time
from dataclasses import dataclass

import numpy as np

from . import diffusion, objectives, tensorcore as tc
from .freqdehaze import DehazeNet, NetworkConfig, fcl_backward, fcl_forward, pcm_backward, pcm_forward, sap_pool, sap_pool_backward

LAYER_TOL = 1e-5
CHAIN_TOL = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return self.error < self.tol


def _pick(size, rng, limit):
    return np.arange(size) if size <= limit else rng.choice(size, limit, replace=False)


def _rel(a, n):
    # entries whose gradients are both tiny carry no signal, only rounding
    scale = max(np.max(np.abs(n), initial=0.0), np.max(np.abs(a), initial=0.0))
    floor = max(1e-10, 1e-7 * scale)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def check(loss, targets, eps=1e-6, rng=None, limit=24):
    """Worst relative error over ``targets`` = [(array, analytic_grad), ...].

    ``loss()`` is re-evaluated with each selected entry nudged in place.
    Large arrays are sampled at ``limit`` random entries.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        ga = np.asarray(analytic, np.float64).reshape(-1)
        idx = _pick(flat.size, rng, limit)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = loss()
            flat[i] = old - eps
            fm = loss()
            flat[i] = old
            num[j] = (fp - fm) / (2 * eps)
        worst = max(worst, _rel(ga[idx], num))
    return worst


def _f64(module, rng, scale=0.3):
    """Cast to float64 and replace zero-initialised weights with small random ones."""
    module.astype(np.float64)
    for _, p in module.named_params():
        if not np.any(p.value):
            p.value = scale * rng.standard_normal(p.value.shape)
        p.grad = np.zeros_like(p.value)
    return module


def _param_targets(module):
    return [(p.value, p.grad.copy()) for _, p in module.named_params()]


def _layer(module, inputs, fwd, bwd, rng, eps=1e-6):
    """``fwd(*inputs) -> (y, cache)``; ``bwd(r, cache) -> grads for inputs``."""
    y, cache = fwd(*inputs)
    r = rng.standard_normal(np.shape(y))
    if module is not None:
        module.zero_grad()
    gins = bwd(r, cache)
    targets = list(zip(inputs, gins)) + (_param_targets(module) if module is not None else [])
    return check(lambda: float(np.sum(r * fwd(*inputs)[0])), targets, eps, rng)


def _cases(rng):
    n = lambda *s: rng.standard_normal(s)

    conv = _f64(tc.Conv2d(3, 4, 3, pad=1, rng=rng), rng)
    yield "conv3x3", lambda: _layer(conv, [n(2, 3, 6, 5)], lambda x: conv.forward(x),
                                    lambda g, c: [conv.backward(g, c)], rng)
    convs = _f64(tc.Conv2d(3, 2, 2, stride=2, rng=rng), rng)
    yield "conv2x2_stride2", lambda: _layer(convs, [n(2, 3, 6, 8)], lambda x: convs.forward(x),
                                            lambda g, c: [convs.backward(g, c)], rng)
    lin = _f64(tc.Linear(5, 3, rng), rng)
    yield "linear", lambda: _layer(lin, [n(4, 5)], lambda x: lin.forward(x),
                                   lambda g, c: [lin.backward(g, c)], rng)
    xl = n(3, 7)
    xl[np.abs(xl) < 0.05] = 0.3
    yield "leaky_relu", lambda: _layer(None, [xl], lambda x: tc.leaky_relu(x),
                                       lambda g, m: [tc.leaky_relu_backward(g, m)], rng)
    blk = _f64(tc.ResBlock(3, rng, emb_dim=4), rng)
    yield "resblock_emb", lambda: _layer(blk, [n(2, 3, 5, 5), n(2, 4)], lambda x, e: blk.forward(x, e),
                                         lambda g, c: list(blk.backward(g, c, return_emb=True)), rng)
    yield "gap", lambda: _layer(None, [n(2, 3, 4, 5)], lambda x: (tc.gap(x), x.shape),
                                lambda g, s: [tc.gap_backward(g, s)], rng)
    yield "softmax", lambda: _layer(None, [n(3, 6)], lambda x: (lambda y: (y, y))(tc.softmax(x)),
                                    lambda g, y: [tc.softmax_backward(g, y)], rng)
    yield "adaptive_pool", lambda: _layer(None, [n(2, 7, 9)], lambda x: (tc.adaptive_avg_pool(x, 3, 4), None),
                                          lambda g, _: [tc.adaptive_avg_pool_backward(g, 7, 9)], rng)
    yield "upsample2x", lambda: _layer(None, [n(2, 3, 3)], lambda x: (tc.upsample2x(x), None),
                                       lambda g, _: [tc.upsample2x_backward(g)], rng)
    yield "sap_pool", lambda: _layer(None, [n(2, 3, 8, 8)], lambda z: (sap_pool(z, 3, 5), None),
                                     lambda g, _: [sap_pool_backward(g, 8, 8)], rng)
    pconv = _f64(tc.Conv2d(3, 3, 1, init="zero"), rng)
    yield "pcm", lambda: _layer(pconv, [rng.uniform(-3, 3, (2, 3, 4, 4)), n(2, 3, 4, 4)],
                                lambda p, z: pcm_forward(p, z, pconv),
                                lambda g, c: list(pcm_backward(g, c, pconv)), rng)
    fconv = _f64(tc.Conv2d(3, 3, 1, init="zero"), rng)
    yield "fcl", lambda: _layer(fconv, [n(2, 3, 6, 6), 0.1 * n(2, 3, 6, 6)],
                                lambda f, z: fcl_forward(f, z, fconv),
                                lambda g, c: list(fcl_backward(g, c, fconv)), rng)
    yield "dehaze_net", lambda: _dehaze_net(rng)
    disc = _f64(objectives.Discriminator(2, rng), rng)
    yield "discriminator", lambda: _layer(disc, [n(2, 3, 8, 8)], lambda x: disc.forward(x),
                                          lambda g, c: [disc.backward(g, c)], rng, eps=1e-5)
    head = _f64(objectives.ProjectionHead(4, 5, rng), rng)
    yield "projection_head", lambda: _layer(head, [n(3, 4)], lambda x: head.forward(x),
                                            lambda g, c: [head.backward(g, c)], rng)
    yield "l2_normalize", lambda: _layer(None, [n(3, 4)], lambda x: (lambda y: (y[0], y))(objectives.l2_normalize(x)),
                                         lambda g, c: [objectives.l2_normalize_backward(g, *c)], rng)
    den = _f64(diffusion.DenoiserNet(2, hidden=4, n_blocks=2, T=4, emb_dim=4, rng=rng), rng)
    cond = n(2, 2, 4, 4)
    yield "denoiser", lambda: _layer(den, [n(2, 2, 4, 4)], lambda z: den.forward(z, cond, 3),
                                     lambda g, c: [den.backward(g, c)], rng)
    yield "lsgan_d_loss", lambda: _loss(lambda a, b: objectives.lsgan_d_loss(a, b), [n(2, 1, 3, 3), n(2, 1, 3, 3)],
                                        lambda out: (out[0], [out[1], out[2]]), rng)
    yield "lsgan_g_loss", lambda: _loss(objectives.lsgan_g_loss, [n(2, 1, 3, 3)],
                                        lambda out: (out[0], [out[1]]), rng)
    yield "patch_nce", lambda: _loss(lambda q, p, k: objectives.patch_nce_loss(q, p, k, 0.5),
                                     [n(4, 3), n(4, 3), n(4, 5, 3)], lambda out: (out[0], list(out[1])), rng)
    yield "patch_nce_matrix", lambda: _loss(lambda q, k: objectives.patch_nce_matrix(q, k, 0.5),
                                            [n(2, 5, 3), n(2, 5, 3)], lambda out: (out[0], list(out[1])), rng)
    zt = n(2, 3, 4)
    zh = zt + np.sign(n(2, 3, 4)) * rng.uniform(0.2, 1.0, (2, 3, 4))
    yield "l1_diffusion_loss", lambda: _loss(lambda a: diffusion.diffusion_loss(zt, a), [zh],
                                             lambda out: (out[0], [out[1]]), rng)
    yield "stage1_objective", lambda: _stage1(rng)


def _loss(fn, inputs, unpack, rng):
    loss0, grads = unpack(fn(*inputs))
    return check(lambda: unpack(fn(*inputs))[0], list(zip(inputs, grads)), 1e-6, rng)


def _small_net(rng):
    net = DehazeNet(NetworkConfig(base_channels=3, blocks_per_scale=(2, 1), dec_blocks=1), rng)
    _f64(net, rng, scale=0.2)
    net.conv_out.weight.value *= 0.005
    net.conv_out.bias.value *= 0.005
    return net


def _dehaze_net(rng):
    net = _small_net(rng)
    x = rng.uniform(0.3, 0.7, (2, 3, 8, 8))
    (_, f1), _ = net.encode(x)
    z = 0.05 * rng.standard_normal(f1.shape)
    out, cache = net.forward(x, z)
    if not np.all((out > 0) & (out < 1)):
        raise RuntimeError("clamp active in dehaze_net gradient check; shrink the output conv")
    r = rng.standard_normal(out.shape)
    net.zero_grad()
    gx, gz = net.backward(r, cache)
    targets = [(x, gx), (z, gz)] + _param_targets(net)
    return check(lambda: float(np.sum(r * net.forward(x, z)[0])), targets, 1e-5, rng)


def _stage1(rng):
    net = _small_net(rng)
    disc = _f64(objectives.Discriminator(2, rng), rng)
    nce = _f64(objectives.PatchNCE([3, 3], objectives.NceConfig(0.5, 6, 4), rng), rng)
    hazy = rng.uniform(0.3, 0.7, (2, 3, 8, 8))
    feats, _ = net.encode(hazy)
    i_out = rng.uniform(0.2, 0.8, (2, 3, 8, 8))

    def run():
        return objectives.stage1_loss(i_out, feats, net, disc, nce, 0.7, 1.3, np.random.default_rng(5))

    net.zero_grad()
    losses, g_out = run()
    return check(lambda: run()[0].total, [(i_out, g_out)], 1e-6, rng)


def stage2_chain_check(rng, T=2):
    """Unrolled reverse chain feeding the dehazing net, with an L1 residual term."""
    net = _small_net(rng)
    den = _f64(diffusion.DenoiserNet(3, hidden=4, n_blocks=1, T=T, emb_dim=4, rng=rng), rng, scale=0.2)
    sched = diffusion.build_schedule(T, 0.1, 0.3)
    x = rng.uniform(0.3, 0.7, (1, 3, 8, 8))
    enc = net.encode(x)
    (_, f1), _ = enc
    cond = np.log1p(np.abs(np.fft.fft2(f1)) / 8)
    z_T = 0.3 * rng.standard_normal(f1.shape)
    steps = [None] + [0.3 * rng.standard_normal(f1.shape) for _ in range(1, T)]
    z_ref = rng.standard_normal(f1.shape)
    r = rng.standard_normal(x.shape)
    scale = 0.05

    def forward():
        z_hat, caches = diffusion.reverse_chain(z_T, cond, sched, den, steps)
        out, cache = net.forward(x, scale * z_hat, encoded=enc)
        l1, g_l1 = diffusion.diffusion_loss(z_ref, z_hat)
        return float(np.sum(r * out)) + l1, (caches, cache, g_l1)

    den.zero_grad()
    net.zero_grad()
    _, (caches, cache, g_l1) = forward()
    _, g_z = net.backward(r, cache)
    g_zT = diffusion.reverse_chain_backward(g_l1 + scale * g_z, caches, sched, den)
    targets = [(z_T, g_zT)] + _param_targets(den)
    return check(lambda: forward()[0], targets, 1e-6, rng)


def run_suite(seed=0, log=None):
    """Run every check; returns a list of :class:`GradResult`."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in _cases(rng):
        t = time.perf_counter()
        results.append(GradResult(name, fn(), LAYER_TOL))
        if log:
            log(results[-1], time.perf_counter() - t)
    t = time.perf_counter()
    results.append(GradResult("stage2_chain_T2", stage2_chain_check(rng), CHAIN_TOL))
    if log:
        log(results[-1], time.perf_counter() - t)
    return results
