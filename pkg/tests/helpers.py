"""Independent oracles shared by the module tests and the acceptance suite."""
import math

import numpy as np
import torch

from mmasr.model import DecoderLM, ModelConfig, normalized_loss, pad_batch

TINY = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_seq_len=16, vocab_size=32)


def randomized(cfg, seed=0, scale=0.5):
    """A model with every parameter drawn at a visible scale (LayerNorm gains near 1)."""
    m = DecoderLM(cfg, seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in m.named_parameters():
            noise = torch.randn(p.shape, generator=g) * scale
            p.copy_(1.0 + 0.1 * noise if name.endswith("ln1.weight") or name.endswith("ln2.weight")
                    or name.endswith("ln_f.weight") else noise)
    return m


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    from math import erf
    return 0.5 * x * (1 + np.vectorize(erf)(x / math.sqrt(2)))


def reference_forward(sd, ids, n_heads):
    """Position-by-position numpy forward pass of a one-block model."""
    T = len(ids)
    d = sd["tok_emb.weight"].shape[1]
    hd = d // n_heads
    x = np.stack([sd["tok_emb.weight"][i] + sd["pos_emb.weight"][t] for t, i in enumerate(ids)])
    p = "blocks.0."
    h = _layer_norm(x, sd[p + "ln1.weight"], sd[p + "ln1.bias"])
    qkv = h @ sd[p + "attn.qkv.weight"].T + sd[p + "attn.qkv.bias"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    att = np.zeros((T, d))
    for t in range(T):
        for j in range(n_heads):
            sl = slice(j * hd, (j + 1) * hd)
            scores = np.array([q[t, sl] @ k[s, sl] / math.sqrt(hd) for s in range(t + 1)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            att[t, sl] = sum(w[s] * v[s, sl] for s in range(t + 1))
    x = x + att @ sd[p + "attn.proj.weight"].T + sd[p + "attn.proj.bias"]
    h = _layer_norm(x, sd[p + "ln2.weight"], sd[p + "ln2.bias"])
    h = _gelu(h @ sd[p + "fc1.weight"].T + sd[p + "fc1.bias"])
    x = x + h @ sd[p + "fc2.weight"].T + sd[p + "fc2.bias"]
    x = _layer_norm(x, sd["ln_f.weight"], sd["ln_f.bias"])
    return x @ sd["tok_emb.weight"].T + sd["head_bias"]


def gradient_check(model, seqs, segments, h=1e-4):
    """Per-tensor relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)."""
    ids, valid = pad_batch(seqs, 0)

    def loss():
        return normalized_loss(model(ids, valid), ids, segments)

    model.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.clone()
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric.view(-1)[i] = (up - down) / (2 * h)
            scale = max(analytic.norm().item(), numeric.norm().item())
            errors[name] = (analytic - numeric).norm().item() / scale if scale > 0 else 0.0
    return errors


def exhaustive_distance(r, h):
    """Naive recursion over the three edit choices."""
    if not r:
        return len(h)
    if not h:
        return len(r)
    return min(exhaustive_distance(r[1:], h) + 1,
               exhaustive_distance(r, h[1:]) + 1,
               exhaustive_distance(r[1:], h[1:]) + (r[0] != h[0]))
