"""Shared oracles and small builders for the test suite."""

import math

import numpy as np

from vodp.nn import Module, MultiHeadAttention


def attention_modules(module):
    """Every MultiHeadAttention reachable from ``module``."""
    found, stack, seen = [], [module], set()
    while stack:
        m = stack.pop()
        if id(m) in seen:
            continue
        seen.add(id(m))
        if isinstance(m, MultiHeadAttention):
            found.append(m)
        for v in vars(m).values():
            if isinstance(v, Module):
                stack.append(v)
            elif isinstance(v, (list, tuple)):
                stack.extend(x for x in v if isinstance(x, Module))
    return found


def attention_loop_oracle(attn, query, context, key_mask=None):
    """Per-query, per-head explicit loops over scores, softmax and weighted sum (float64)."""
    wq, wk, wv = attn.w_q.weight.data, attn.w_k.weight.data, attn.w_v.weight.data
    wo, bo = attn.w_o.weight.data, attn.w_o.bias.data
    b, lq, c = query.shape
    lk = context.shape[1]
    hd = c // attn.heads
    out = np.zeros((b, lq, c))
    for n in range(b):
        q = query[n] @ wq
        k = context[n] @ wk
        v = context[n] @ wv
        for i in range(lq):
            heads = []
            for h in range(attn.heads):
                sl = slice(h * hd, (h + 1) * hd)
                scores = []
                for j in range(lk):
                    if key_mask is not None and not key_mask[n, j]:
                        scores.append(None)
                        continue
                    scores.append(float(np.dot(q[i, sl], k[j, sl])) * attn.scale)
                m = max(s for s in scores if s is not None)
                ex = [0.0 if s is None else math.exp(s - m) for s in scores]
                z = sum(ex)
                acc = np.zeros(hd)
                for j in range(lk):
                    acc += (ex[j] / z) * v[j, sl]
                heads.append(acc)
            out[n, i] = np.concatenate(heads) @ wo + bo
    return out


def zero_module(module):
    for p in module.parameters():
        p.data[...] = 0
