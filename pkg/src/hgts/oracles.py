"""Slow reference implementations written as explicit loops.

These share no code with the vectorized layers; they exist so the fast path
can be checked against something obviously correct.
"""

from __future__ import annotations

import math

import numpy as np


def loop_linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """x: (n, d_in); weight: (d_out, d_in)."""
    n, d_in = x.shape
    d_out = weight.shape[0]
    out = np.zeros((n, d_out))
    for i in range(n):
        for o in range(d_out):
            acc = 0.0 if bias is None else float(bias[o])
            for j in range(d_in):
                acc += float(x[i, j]) * float(weight[o, j])
            out[i, o] = acc
    return out


def loop_gelu(v: float) -> float:
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def loop_layer_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros(x.shape)
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for j, v in enumerate(row):
            out[i, j] = (v - mu) / math.sqrt(var + eps) * float(gain[j]) + float(offset[j])
    return out


def loop_ffn(x: np.ndarray, ffn) -> np.ndarray:
    h = loop_linear(x, ffn.fc1.weight.data, ffn.fc1.bias.data)
    h = np.vectorize(loop_gelu)(h)
    return loop_linear(h, ffn.fc2.weight.data, ffn.fc2.bias.data)


def loop_rope(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate each consecutive pair (2i, 2i+1) of row t by pos_t * base**(-2i/d)."""
    n, d = x.shape
    out = np.zeros((n, d))
    for t in range(n):
        for i in range(d // 2):
            theta = positions[t] * base ** (-2.0 * i / d)
            c, s = math.cos(theta), math.sin(theta)
            a, b = float(x[t, 2 * i]), float(x[t, 2 * i + 1])
            out[t, 2 * i] = a * c - b * s
            out[t, 2 * i + 1] = a * s + b * c
    return out


def loop_confidence(queries: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    e, n = queries.shape[0], nodes.shape[0]
    conf = np.zeros((e, n))
    for i in range(e):
        for j in range(n):
            z = sum(float(a) * float(b) for a, b in zip(queries[i], nodes[j]))
            conf[i, j] = 1.0 / (1.0 + math.exp(-z))
    return conf


def loop_topk_columns(conf: np.ndarray, k: int) -> np.ndarray:
    """Per column, mark the k largest rows (ties to the lower row index)."""
    e, n = conf.shape
    adj = np.zeros((e, n))
    for j in range(n):
        ranked = sorted(range(e), key=lambda i: (-conf[i, j], i))
        for i in ranked[:k]:
            adj[i, j] = 1.0
    return adj


def loop_hga(queries: np.ndarray, nodes: np.ndarray, incidence: np.ndarray, block) -> np.ndarray:
    """Hyperedge e attends only to nodes with incidence[e, n] = 1.

    Single head.
    """
    q = loop_linear(queries, block.w_q.weight.data, block.w_q.bias.data)
    k = loop_linear(nodes, block.w_k.weight.data, block.w_k.bias.data)
    v = loop_linear(nodes, block.w_v.weight.data, block.w_v.bias.data)
    e, d = q.shape
    n = k.shape[0]
    scale = 1.0 / math.sqrt(d)
    att = np.zeros((e, d))
    for i in range(e):
        # a hyperedge with no member sees every node shifted by the same
        # constant, which softmax ignores
        members = [j for j in range(n) if incidence[i, j] > 0.5] or list(range(n))
        scores = [sum(q[i, t] * k[j, t] for t in range(d)) * scale for j in members]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        total = sum(w)
        for j, wj in zip(members, w):
            att[i] += (wj / total) * v[j]
    h = loop_layer_norm(att, block.ln1.gain.data, block.ln1.offset.data, block.ln1.eps)
    h = loop_ffn(h, block.ffn)
    h = loop_layer_norm(h, block.ln2.gain.data, block.ln2.offset.data, block.ln2.eps)
    return h + att


def loop_causal_attention(x: np.ndarray, layer, positions=None) -> np.ndarray:
    """Single-sequence MHSA with RoPE, causal mask, output projection and residual."""
    n, d = x.shape
    h = layer.n_heads
    dh = d // h
    q = loop_linear(x, layer.w_q.weight.data, layer.w_q.bias.data)
    k = loop_linear(x, layer.w_k.weight.data, layer.w_k.bias.data)
    v = loop_linear(x, layer.w_v.weight.data, layer.w_v.bias.data)
    pos = list(range(n)) if positions is None else positions
    merged = np.zeros((n, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        qh, kh = loop_rope(q[:, sl], pos), loop_rope(k[:, sl], pos)
        for t in range(n):
            visible = range(t + 1) if layer.causal else range(n)
            scores = [float(qh[t] @ kh[s]) / math.sqrt(dh) for s in visible]
            top = max(scores)
            w = [math.exp(sc - top) for sc in scores]
            total = sum(w)
            for s, ws in zip(visible, w):
                merged[t, sl] += (ws / total) * v[s, sl]
    return loop_linear(merged, layer.w_p.weight.data, layer.w_p.bias.data) + x


def loop_adam(param: list[float], grads: list[list[float]], lr: float, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    """Scalar Adam with bias correction applied to one flat parameter vector."""
    p = list(param)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            p[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return p
