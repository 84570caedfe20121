"""Unpaired training losses: least-squares GAN and patch-wise InfoNCE."""

from dataclasses import dataclass

import numpy as np

from .tensorcore import Conv2d, Linear, Module, leaky_relu, leaky_relu_backward


# ---------------------------------------------------------------- adversarial

def lsgan_d_loss(real_logits, fake_logits):
    """``mean((real - 1)^2) + mean(fake^2)`` and its gradients."""
    real = np.asarray(real_logits)
    fake = np.asarray(fake_logits)
    loss = float(np.mean((real - 1) ** 2) + np.mean(fake ** 2))
    return loss, 2 * (real - 1) / real.size, 2 * fake / fake.size


def lsgan_g_loss(fake_logits):
    fake = np.asarray(fake_logits)
    return float(np.mean((fake - 1) ** 2)), 2 * (fake - 1) / fake.size


class Discriminator(Module):
    """Four-layer conv patch discriminator producing a single-channel logit map."""

    def __init__(self, channels=32, rng=None):
        c = channels
        self.convs = [
            Conv2d(3, c, 3, stride=2, pad=1, rng=rng),
            Conv2d(c, 2 * c, 3, stride=2, pad=1, rng=rng),
            Conv2d(2 * c, 4 * c, 3, pad=1, rng=rng),
            Conv2d(4 * c, 1, 3, pad=1, rng=rng),
        ]

    def forward(self, x):
        caches = []
        h = x
        for i, conv in enumerate(self.convs):
            h, cc = conv.forward(h)
            mask = None
            if i < len(self.convs) - 1:
                h, mask = leaky_relu(h)
            caches.append((cc, mask))
        return h, caches

    def backward(self, g, caches):
        for conv, (cc, mask) in zip(reversed(self.convs), reversed(caches)):
            if mask is not None:
                g = leaky_relu_backward(g, mask)
            g = conv.backward(g, cc)
        return g


# ---------------------------------------------------------------- contrastive

def l2_normalize(x, eps=1e-8):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, eps), norm


def l2_normalize_backward(g, y, norm, eps=1e-8):
    n = np.maximum(norm, eps)
    return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / n


def _log_softmax_ce0(logits):
    """Cross-entropy with target index 0 along the last axis, plus d/dlogits."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    loss = -(logits[..., 0] - m[..., 0] - np.log(s[..., 0]))
    g = p.copy()
    g[..., 0] -= 1.0
    return loss, g


def patch_nce_loss(query, positive, negatives, tau=0.07):
    """InfoNCE with cosine similarity.

    ``query`` and ``positive`` are (M, D); ``negatives`` is (M, K, D).
    Returns ``(loss, (g_query, g_positive, g_negatives))`` for the mean loss.
    """
    query, positive, negatives = (np.asarray(a, np.float64) for a in (query, positive, negatives))
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ValueError("need at least one negative per query")
    qn, q_norm = l2_normalize(query)
    pn, p_norm = l2_normalize(positive)
    nn, n_norm = l2_normalize(negatives)
    s_pos = np.sum(qn * pn, axis=-1)
    s_neg = np.einsum("md,mkd->mk", qn, nn)
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1) / tau
    losses, gl = _log_softmax_ce0(logits)
    m = query.shape[0]
    gl = gl / (tau * m)
    g_qn = gl[:, :1] * pn + np.einsum("mk,mkd->md", gl[:, 1:], nn)
    g_pn = gl[:, :1] * qn
    g_nn = gl[:, 1:, None] * qn[:, None, :]
    grads = (l2_normalize_backward(g_qn, qn, q_norm),
             l2_normalize_backward(g_pn, pn, p_norm),
             l2_normalize_backward(g_nn, nn, n_norm))
    return float(np.mean(losses)), grads


def patch_nce_matrix(query, keys, tau=0.07):
    """InfoNCE where key ``i`` is query ``i``'s positive and all other keys are negatives.

    ``query`` and ``keys`` are (N, P, D).  Equivalent to :func:`patch_nce_loss`
    with the negatives gathered from the other locations, without
    materialising the (P, P-1, D) negative tensor.
    """
    qn, q_norm = l2_normalize(query)
    kn, k_norm = l2_normalize(keys)
    sim = np.einsum("npd,nqd->npq", qn, kn) / tau
    n, p, _ = sim.shape
    idx = np.arange(p)
    # move the positive (diagonal) to column 0
    order = np.concatenate([idx[:, None], np.array([np.delete(idx, i) for i in idx])], axis=1)
    logits = np.take_along_axis(sim, np.broadcast_to(order, (n, p, p)), axis=-1)
    losses, gl = _log_softmax_ce0(logits)
    gsim = np.zeros_like(sim)
    np.put_along_axis(gsim, np.broadcast_to(order, (n, p, p)), gl / (tau * n * p), axis=-1)
    g_qn = np.einsum("npq,nqd->npd", gsim, kn)
    g_kn = np.einsum("npq,npd->nqd", gsim, qn)
    return float(np.mean(losses)), (l2_normalize_backward(g_qn, qn, q_norm),
                                    l2_normalize_backward(g_kn, kn, k_norm))


class ProjectionHead(Module):
    def __init__(self, din, dout, rng):
        self.fc1 = Linear(din, dout, rng)
        self.fc2 = Linear(dout, dout, rng)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a, mask = leaky_relu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, mask, c2)

    def backward(self, g, cache):
        c1, mask, c2 = cache
        return self.fc1.backward(leaky_relu_backward(self.fc2.backward(g, c2), mask), c1)


@dataclass
class NceConfig:
    temperature: float = 0.07
    patches_per_image: int = 256
    proj_dim: int = 256

    def validate(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.patches_per_image < 2:
            raise ValueError("need at least two patches per image (one positive, one negative)")


class PatchNCE(Module):
    """Projection heads plus the multi-layer patch contrastive loss.

    Queries come from features of the dehazed output, keys from the same
    layers evaluated on the hazy input at the same locations.  Keys are
    treated as constants for the encoder; the heads receive gradients
    through both branches.
    """

    def __init__(self, layer_channels, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        self.heads = [ProjectionHead(c, cfg.proj_dim, rng) for c in layer_channels]

    def loss(self, q_feats, k_feats, rng, weight=1.0):
        """Mean loss over layers and gradients of ``weight * loss`` for each query feature map."""
        total = 0.0
        grads = []
        for head, q, k in zip(self.heads, q_feats, k_feats):
            n, c, h, w = q.shape
            p = min(self.cfg.patches_per_image, h * w)
            ids = np.stack([rng.choice(h * w, p, replace=False) for _ in range(n)])
            qv = np.take_along_axis(q.reshape(n, c, -1), ids[:, None, :], axis=2).transpose(0, 2, 1)
            kv = np.take_along_axis(k.reshape(n, c, -1), ids[:, None, :], axis=2).transpose(0, 2, 1)
            qe, qc = head.forward(qv)
            ke, kc = head.forward(kv)
            l, (gq, gk) = patch_nce_matrix(qe, ke, self.cfg.temperature)
            total += l / len(self.heads)
            scale = weight / len(self.heads)
            gqv = head.backward((gq * scale).astype(q.dtype), qc)
            head.backward((gk * scale).astype(q.dtype), kc)
            g = np.zeros((n, c, h * w), q.dtype)
            np.put_along_axis(g, ids[:, None, :], gqv.transpose(0, 2, 1), axis=2)
            grads.append(g.reshape(q.shape))
        return total, grads


# ---------------------------------------------------------------- stage objectives

@dataclass
class StageLosses:
    l_gan: float
    l_nce: float
    l_diff: float
    total: float


def stage1_loss(i_out, hazy_feats, net, disc, nce, lam_gan, lam_nce, rng):
    """Generator-side ``lam_gan * L_GAN + lam_nce * L_PatchNCE``.

    Returns the loss breakdown and the gradient with respect to ``i_out``.
    Encoder and projection-head gradients accumulate in place.  The
    discriminator's parameter gradients are also touched and must be zeroed
    before its own update.
    """
    fake, dcache = disc.forward(i_out)
    l_gan, g_fake = lsgan_g_loss(fake)
    g_out = disc.backward((lam_gan * g_fake).astype(i_out.dtype), dcache)
    (q0, q1), qcache = net.encode(i_out)
    l_nce, (g0, g1) = nce.loss([q0, q1], list(hazy_feats), rng, weight=lam_nce)
    g_out = g_out + net.encode_backward(g0, g1, qcache)
    total = lam_gan * l_gan + lam_nce * l_nce
    return StageLosses(l_gan, l_nce, 0.0, total), g_out


def stage2_loss(s1, z, z_hat, lam_diff):
    """Adds ``lam_diff * L1(z, z_hat)``; returns losses and the gradient on ``z_hat``."""
    d = np.asarray(z_hat) - np.asarray(z)
    l_diff = float(np.mean(np.abs(d)))
    g = (lam_diff * np.sign(d) / d.size).astype(np.asarray(z_hat).dtype)
    return StageLosses(s1.l_gan, s1.l_nce, l_diff, s1.total + lam_diff * l_diff), g
