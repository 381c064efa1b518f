"""Vectorized safe-error probing of one input over many (parameter, bit) pairs.

A single-weight fault perturbs exactly one accumulator column of its layer, so
instead of re-running the whole network per probe we update the faulted
layer's output incrementally and re-run only the downstream layers, batched
over all probes whose layer output actually changed. Results are bit-exact
with per-probe faulted inference because all integer arithmetic is exact and
the downstream layers are evaluated by the same engine code.
"""

from __future__ import annotations

import numpy as np

from .engine import (
    Conv2d,
    Linear,
    QuantModel,
    ReLU,
    forward_from,
    forward_trace,
    relu_q,
    shift_amount,
)
from .faults import Polarity, fault_array
from .qtensor import requantize_shift

_DOWNSTREAM_CHUNK = 256


def sweep_input(model: QuantModel, x: np.ndarray, probe_masks, polarity: Polarity):
    """Probe masked (param, bit) pairs of every weighted layer with one input.

    probe_masks: per weighted layer, an (n_params, 8) bool array selecting the
    probes to run. Returns same-shaped bool arrays, True where the faulted
    prediction scores differ from the nominal ones.
    """
    trace = forward_trace(model, x)
    results = []
    for wl, li in enumerate(model.weighted_indices):
        mask = probe_masks[wl]
        layer = model.layers[li]
        out = np.zeros_like(mask)
        if mask.any():
            xin = x if li == 0 else trace.boundaries[li - 1]
            relu_next = li + 1 < len(model.layers) and isinstance(model.layers[li + 1], ReLU)
            eff = trace.boundaries[li + 1] if relu_next else trace.boundaries[li]
            resume = li + 2 if relu_next else li + 1
            s = shift_amount(layer.in_dec, layer.weight.dec, layer.out_dec)
            if isinstance(layer, Linear):
                out = _sweep_linear(model, layer, xin.reshape(-1), trace.accs[li], eff,
                                    relu_next, resume, s, mask, polarity, trace.scores)
            else:
                out = _sweep_conv(model, layer, xin, trace.accs[li], eff, relu_next,
                                  resume, s, mask, polarity, trace.scores)
        results.append(out)
    return results


def _score_mismatch(model, resume, batch, nominal_scores):
    """Downstream scores for a batch of boundary activations, chunked."""
    neq = np.empty(batch.shape[0], dtype=bool)
    for lo in range(0, batch.shape[0], _DOWNSTREAM_CHUNK):
        part = batch[lo : lo + _DOWNSTREAM_CHUNK]
        scores = forward_from(model, resume, part)
        neq[lo : lo + part.shape[0]] = (scores != nominal_scores[None, :]).any(axis=1)
    return neq


def _sweep_linear(model, layer, xin, acc, eff, relu_next, resume, s, mask,
                  polarity, nominal_scores):
    w = layer.weight.values
    n_out, n_in = w.shape
    x64 = xin.astype(np.int64)
    mism = np.zeros_like(mask)
    for b in range(8):
        pm = mask[:, b].reshape(n_out, n_in)
        if not pm.any():
            continue
        wf = fault_array(w, b, polarity)
        delta = (wf.astype(np.int64) - w.astype(np.int64)) * x64[None, :]
        cand = pm & (delta != 0)
        if not cand.any():
            continue
        new_out = requantize_shift(acc[:, None] + delta, s)
        if relu_next:
            new_out = relu_q(new_out)
        changed = cand & (new_out != eff[:, None])
        js, iis = np.nonzero(changed)
        if js.size == 0:
            continue
        vals = new_out[js, iis]
        # many probes map to the same (unit, new value); evaluate each once
        key = js.astype(np.int64) * 256 + (vals.astype(np.int64) + 128)
        uniq, inv = np.unique(key, return_inverse=True)
        uj = (uniq // 256).astype(np.intp)
        uv = (uniq % 256 - 128).astype(np.int8)
        batch = np.repeat(eff[None, :], uniq.size, axis=0)
        batch[np.arange(uniq.size), uj] = uv
        neq = _score_mismatch(model, resume, batch, nominal_scores)
        mism[js * n_in + iis, b] = neq[inv]
    return mism


def _sweep_conv(model, layer, xin, acc, eff, relu_next, resume, s, mask,
                polarity, nominal_scores):
    w = layer.weight.values
    c_out, c_in = w.shape[0], w.shape[1]
    h, wd = xin.shape[1], xin.shape[2]
    xpad = np.zeros((c_in, h + 4, wd + 4), dtype=np.int64)
    xpad[:, 2 : h + 2, 2 : wd + 2] = xin
    # shifted[ci, ky*5+kx] is the input patch a weight at (ky, kx) multiplies
    shifted = np.empty((c_in, 25, h, wd), dtype=np.int64)
    for ky in range(5):
        for kx in range(5):
            shifted[:, ky * 5 + kx] = xpad[:, ky : ky + h, kx : kx + wd]

    mism = np.zeros_like(mask)
    for b in range(8):
        pm = mask[:, b].reshape(c_out, c_in, 25)
        if not pm.any():
            continue
        wf = fault_array(w, b, polarity)
        delta = (wf.astype(np.int64) - w.astype(np.int64)).reshape(c_out, c_in, 25)
        co_i, ci_i, k_i = np.nonzero(pm & (delta != 0))
        if co_i.size == 0:
            continue
        for lo in range(0, co_i.size, _DOWNSTREAM_CHUNK):
            co, ci, kk = co_i[lo : lo + _DOWNSTREAM_CHUNK], ci_i[lo : lo + _DOWNSTREAM_CHUNK], k_i[lo : lo + _DOWNSTREAM_CHUNK]
            dv = delta[co, ci, kk]
            new_map = acc[co] + dv[:, None, None] * shifted[ci, kk]
            new_out = requantize_shift(new_map, s)
            if relu_next:
                new_out = relu_q(new_out)
            changed = (new_out != eff[co]).any(axis=(1, 2))
            if not changed.any():
                continue
            sel = np.nonzero(changed)[0]
            batch = np.repeat(eff[None], sel.size, axis=0)
            batch[np.arange(sel.size), co[sel]] = new_out[sel]
            neq = _score_mismatch(model, resume, batch, nominal_scores)
            flat = (co[sel] * c_in + ci[sel]) * 25 + kk[sel]
            mism[flat[neq], b] = True
    return mism
