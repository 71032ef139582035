"""Reference implementations used as test oracles.

Nothing here imports the package under test. Everything is written as
plain loops over Python floats so that it shares no code path with the
vectorized implementation.
"""

from __future__ import annotations

import math


def conv1d_naive(x, w, b=None, stride=1, dilation=1, padding="none", depthwise=False):
    """x: [B][Cin][T], w: [Cout][Cin or 1][K] nested lists."""
    k = len(w[0][0])
    span = dilation * (k - 1) + 1
    if padding == "none":
        left = right = 0
    elif padding == "causal":
        left, right = span - 1, 0
    else:
        left = (span - 1) // 2
        right = span - 1 - left
    out = []
    for xb in x:
        t_in = len(xb[0])
        padded = [[0.0] * left + list(row) + [0.0] * right for row in xb]
        t_out = (t_in + left + right - span) // stride + 1
        rows = []
        for o in range(len(w)):
            row = []
            for t in range(t_out):
                acc = 0.0 if b is None else b[o]
                ins = [o] if depthwise else range(len(xb))
                for ci, c in enumerate(ins):
                    kernel = w[o][0] if depthwise else w[o][ci]
                    for j in range(k):
                        acc += kernel[j] * padded[c][t * stride + j * dilation]
                row.append(acc)
            rows.append(row)
        out.append(rows)
    return out


def transposed_conv1d_naive(s, v, stride):
    """s: [B][N][K] frame coefficients, v: [N][L] basis; overlap-add to [B][1][(K-1)S+L]."""
    n_basis, length = len(v), len(v[0])
    out = []
    for sb in s:
        k = len(sb[0])
        y = [0.0] * ((k - 1) * stride + length)
        for n in range(n_basis):
            for f in range(k):
                for j in range(length):
                    y[f * stride + j] += sb[n][f] * v[n][j]
        out.append([y])
    return out


def mae_naive(pred, target):
    per = []
    for p, t in zip(pred, target):
        per.append(sum(abs(a - b) for a, b in zip(p, t)) / len(p))
    return per, sum(per) / len(per)


def est_acc_naive(pred, target):
    err = 0.0
    energy = 0.0
    for p, t in zip(pred, target):
        for a, b in zip(p, t):
            err += abs(a - b)
            energy += b
    return 1.0 - err / (2.0 * energy)


def sae_naive(pred, target):
    per = []
    for p, t in zip(pred, target):
        per.append(abs(sum(p) - sum(t)) / sum(t))
    return per, sum(per) / len(per)


def wmse_naive(pred, target):
    """pred/target: [B][C][T]; squared error summed over appliances and time, / T, averaged over windows."""
    total = 0.0
    for pb, tb in zip(pred, target):
        acc = 0.0
        for p, t in zip(pb, tb):
            for a, b in zip(p, t):
                acc += (a - b) ** 2
        total += acc / len(pb[0])
    return total / len(pred)


def interp_naive(times, values, grid):
    """Piecewise-linear interpolation; points outside the sample span get 0."""
    out = []
    for g in grid:
        if g < times[0] or g > times[-1]:
            out.append(0.0)
            continue
        for i in range(len(times) - 1):
            if times[i] <= g <= times[i + 1]:
                frac = (g - times[i]) / (times[i + 1] - times[i])
                out.append(values[i] + frac * (values[i + 1] - values[i]))
                break
        else:
            out.append(values[-1])
    return out


def dilated_stack_reach(kernel, blocks, repeats):
    """Frames a causal dilated stack can see, found by walking the dependency set."""
    reach = {0}
    for _ in range(repeats):
        for x in range(blocks):
            d = 2 ** x
            reach = {r + j * d for r in reach for j in range(kernel)}
    return max(reach) + 1


def param_table(n, l, b, h, p, x, r, c, glu=False):
    """Learnable values per layer, enumerated one tensor at a time."""
    rows = {
        "encoder": n * l + n,
        "decoder": n * l,
        "separator.norm": 2 * n,
        "separator.bottleneck": n * b + b,
    }
    per_block = 0
    per_block += b * h + h                 # 1x1 in
    if glu:
        per_block += b * h + h             # gate for the 1x1
    per_block += 2 * h                     # first norm
    per_block += h * p                     # depthwise, no bias
    if glu:
        per_block += h * p
    per_block += 2 * h                     # second norm
    per_block += h * b + b                 # residual
    per_block += h * b + b                 # skip
    rows["separator.blocks"] = per_block * x * r
    rows["separator.mask"] = b * c * n + c * n
    return rows


def frames_for(t, l, s):
    return math.floor((t - l) / s) + 1
