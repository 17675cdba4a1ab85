"""Numba tile rasterization kernels (forward and backward).

Pixel centers sit at ``(ix + 0.5, iy + 0.5)``. Per-pixel features are
``(r, g, b, z)``; accumulated opacity is returned separately. All work is done
in float64. Tiles are processed in parallel, but every tile writes only its own
pixels and its own slice of the pair arrays, so results do not depend on the
number of worker threads.
"""

import os

# the pool size is fixed when numba loads, so honour the thread override first
THREADS_ENV = "GSAVATAR_THREADS"
if os.environ.get(THREADS_ENV, "").isdigit() and "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = str(max(int(os.environ[THREADS_ENV]), 1))

import numba  # noqa: E402
import numpy as np  # noqa: E402

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


def set_threads(n: int) -> int:
    """Use ``n`` worker threads (clamped to the pool size); returns the value applied."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


if os.environ.get(THREADS_ENV, "").isdigit():
    set_threads(int(os.environ[THREADS_ENV]))

NFEAT = 4
# pair-gradient columns: mean2d (2), conic (3), opacity, color (3), depth
NPG = 10


@numba.njit(parallel=True, cache=True)
def raster_forward(mean2d, conic, opac, feat, ranges, pairs, width, height,
                   tile, tiles_x, qmax, tau, out_feat, out_alpha, out_last):
    n_tiles = ranges.shape[0]
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t, 0]
        end = ranges[t, 1]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            y = py + 0.5
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                x = px + 0.5
                T = 1.0
                A = 0.0
                r = 0.0
                gr = 0.0
                b = 0.0
                z = 0.0
                last = start - 1
                for k in range(start, end):
                    g = pairs[k]
                    dx = x - mean2d[g, 0]
                    dy = y - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q > qmax:
                        continue
                    s = opac[g] * np.exp(-0.5 * q)
                    w = s * T
                    r += feat[g, 0] * w
                    gr += feat[g, 1] * w
                    b += feat[g, 2] * w
                    z += feat[g, 3] * w
                    A += w
                    T *= 1.0 - s
                    last = k
                    if T < tau:
                        break
                out_feat[py, px, 0] = r
                out_feat[py, px, 1] = gr
                out_feat[py, px, 2] = b
                out_feat[py, px, 3] = z
                out_alpha[py, px] = A
                out_last[py, px] = last


@numba.njit(parallel=True, cache=True)
def raster_backward(mean2d, conic, opac, feat, ranges, pairs, width, height,
                    tile, tiles_x, qmax, last, g_feat, g_alpha, pair_grad):
    n_tiles = ranges.shape[0]
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t, 0]
        end = ranges[t, 1]
        if end <= start:
            continue
        sig = np.empty(end - start)
        gval = np.empty(end - start)
        trans = np.empty(end - start)
        behind = np.zeros(NFEAT + 1)
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            y = py + 0.5
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                x = px + 0.5
                stop = last[py, px]
                if stop < start:
                    continue
                T = 1.0
                for k in range(start, stop + 1):
                    g = pairs[k]
                    dx = x - mean2d[g, 0]
                    dy = y - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q > qmax:
                        gv = -1.0
                        s = 0.0
                    else:
                        gv = np.exp(-0.5 * q)
                        s = opac[g] * gv
                    sig[k - start] = s
                    gval[k - start] = gv
                    trans[k - start] = T
                    T *= 1.0 - s
                for f in range(NFEAT + 1):
                    behind[f] = 0.0
                ga = g_alpha[py, px]
                for k in range(stop, start - 1, -1):
                    gauss = gval[k - start]
                    if gauss < 0.0:
                        continue
                    s = sig[k - start]
                    g = pairs[k]
                    Tk = trans[k - start]
                    # d(out)/d(sigma_k) = T_k * (f_k - behind_k) for features (rgb, z, 1)
                    dot = ga * (1.0 - behind[NFEAT])
                    for f in range(NFEAT):
                        dot += g_feat[py, px, f] * (feat[g, f] - behind[f])
                    dsig = Tk * dot
                    w = s * Tk
                    for f in range(NFEAT):
                        behind[f] = s * feat[g, f] + (1.0 - s) * behind[f]
                    behind[NFEAT] = s + (1.0 - s) * behind[NFEAT]

                    dx = x - mean2d[g, 0]
                    dy = y - mean2d[g, 1]
                    dq = -0.5 * s * dsig
                    a = conic[g, 0]
                    b = conic[g, 1]
                    c = conic[g, 2]
                    pair_grad[k, 0] += -2.0 * dq * (a * dx + b * dy)
                    pair_grad[k, 1] += -2.0 * dq * (b * dx + c * dy)
                    pair_grad[k, 2] += dq * dx * dx
                    pair_grad[k, 3] += dq * dx * dy
                    pair_grad[k, 4] += dq * dy * dy
                    pair_grad[k, 5] += dsig * gauss
                    pair_grad[k, 6] += g_feat[py, px, 0] * w
                    pair_grad[k, 7] += g_feat[py, px, 1] * w
                    pair_grad[k, 8] += g_feat[py, px, 2] * w
                    pair_grad[k, 9] += g_feat[py, px, 3] * w


@numba.njit(cache=True)
def reduce_pairs(pairs, pair_grad, n):
    """Serial, fixed-order reduction of per-pair gradients onto Gaussians."""
    out = np.zeros((n, NPG))
    for k in range(pairs.shape[0]):
        g = pairs[k]
        for j in range(NPG):
            out[g, j] += pair_grad[k, j]
    return out


@numba.njit(cache=True, inline="always")
def _rotmat(q, R):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w, x, y, z = q[0] / n, q[1] / n, q[2] / n, q[3] / n
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return n


@numba.njit(parallel=True, cache=True)
def project_geometry(cam, log_scales, quats, W, f, low_pass, jac, cov_view, cov2d, conic):
    """EWA splat geometry per point: Jacobian, view covariance, 2D covariance, conic."""
    for i in numba.prange(cam.shape[0]):
        R = np.empty((3, 3))
        M = np.empty((3, 3))
        _rotmat(quats[i], R)
        # M = W R diag(s), so V = M M^T
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += W[r, k] * R[k, c]
                M[r, c] = acc * np.exp(log_scales[i, c])
        for r in range(3):
            for c in range(3):
                cov_view[i, r, c] = M[r, 0] * M[c, 0] + M[r, 1] * M[c, 1] + M[r, 2] * M[c, 2]
        x, y, z = cam[i, 0], cam[i, 1], cam[i, 2]
        jac[i, 0, 0] = f / z
        jac[i, 0, 1] = 0.0
        jac[i, 0, 2] = -f * x / (z * z)
        jac[i, 1, 0] = 0.0
        jac[i, 1, 1] = f / z
        jac[i, 1, 2] = -f * y / (z * z)
        for r in range(2):
            for c in range(2):
                acc = 0.0
                for k in range(3):
                    for l in range(3):
                        acc += jac[i, r, k] * cov_view[i, k, l] * jac[i, c, l]
                cov2d[i, r, c] = acc
        cov2d[i, 0, 0] += low_pass
        cov2d[i, 1, 1] += low_pass
        det = cov2d[i, 0, 0] * cov2d[i, 1, 1] - cov2d[i, 0, 1] * cov2d[i, 0, 1]
        conic[i, 0] = cov2d[i, 1, 1] / det
        conic[i, 1] = -cov2d[i, 0, 1] / det
        conic[i, 2] = cov2d[i, 0, 0] / det


@numba.njit(parallel=True, cache=True)
def geometry_backward(pg, conic, jac, cov_view, cam, f, W, quats, log_scales,
                      g_center, g_logscale, g_quat):
    """Chain per-point 2D gradients (mean, conic, depth) back to center, log-scale, quaternion."""
    for i in numba.prange(pg.shape[0]):
        Q = np.empty((2, 2))
        gQ = np.empty((2, 2))
        T = np.empty((2, 2))
        gM = np.empty((2, 2))
        JV = np.empty((2, 3))
        gJ = np.empty((2, 3))
        gV = np.empty((3, 3))
        gS = np.empty((3, 3))
        R = np.empty((3, 3))
        A = np.empty((3, 3))
        gR = np.empty((3, 3))
        Q[0, 0] = conic[i, 0]
        Q[0, 1] = conic[i, 1]
        Q[1, 0] = conic[i, 1]
        Q[1, 1] = conic[i, 2]
        gQ[0, 0] = pg[i, 2]
        gQ[0, 1] = pg[i, 3]
        gQ[1, 0] = pg[i, 3]
        gQ[1, 1] = pg[i, 4]
        # inverse: dL/dM = -Q gQ Q
        for r in range(2):
            for c in range(2):
                T[r, c] = gQ[r, 0] * Q[0, c] + gQ[r, 1] * Q[1, c]
        for r in range(2):
            for c in range(2):
                gM[r, c] = -(Q[r, 0] * T[0, c] + Q[r, 1] * T[1, c])
        # gV = J^T gM J, gJ = 2 gM J V
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for a in range(2):
                    for b in range(2):
                        acc += jac[i, a, r] * gM[a, b] * jac[i, b, c]
                gV[r, c] = acc
        for r in range(2):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += jac[i, r, k] * cov_view[i, k, c]
                JV[r, c] = acc
        for r in range(2):
            for c in range(3):
                gJ[r, c] = 2.0 * (gM[r, 0] * JV[0, c] + gM[r, 1] * JV[1, c])

        x, y, z = cam[i, 0], cam[i, 1], cam[i, 2]
        gmx, gmy = pg[i, 0], pg[i, 1]
        z2 = z * z
        z3 = z2 * z
        gc0 = gmx * f / z - gJ[0, 2] * f / z2
        gc1 = gmy * f / z - gJ[1, 2] * f / z2
        gc2 = (pg[i, 9] - gmx * f * x / z2 - gmy * f * y / z2 - gJ[0, 0] * f / z2
               + gJ[0, 2] * 2 * f * x / z3 - gJ[1, 1] * f / z2 + gJ[1, 2] * 2 * f * y / z3)
        for c in range(3):
            g_center[i, c] = gc0 * W[0, c] + gc1 * W[1, c] + gc2 * W[2, c]

        # world covariance gradient, symmetrized: gS = sym(W^T gV W)
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += gV[r, k] * W[k, c]
                A[r, c] = acc
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += W[k, r] * A[k, c]
                gS[r, c] = acc
        for r in range(3):
            for c in range(r + 1, 3):
                m = 0.5 * (gS[r, c] + gS[c, r])
                gS[r, c] = m
                gS[c, r] = m

        norm = _rotmat(quats[i], R)
        # A = gS R
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += gS[r, k] * R[k, c]
                A[r, c] = acc
        for c in range(3):
            s2 = np.exp(2.0 * log_scales[i, c])
            d = R[0, c] * A[0, c] + R[1, c] * A[1, c] + R[2, c] * A[2, c]
            g_logscale[i, c] = 2.0 * s2 * d
            for r in range(3):
                gR[r, c] = 2.0 * A[r, c] * s2

        w, qx, qy, qz = quats[i, 0] / norm, quats[i, 1] / norm, quats[i, 2] / norm, quats[i, 3] / norm
        g = gR
        gw = 2 * (-qz * g[0, 1] + qy * g[0, 2] + qz * g[1, 0] - qx * g[1, 2]
                  - qy * g[2, 0] + qx * g[2, 1])
        gx = 2 * (qy * g[0, 1] + qz * g[0, 2] + qy * g[1, 0] - 2 * qx * g[1, 1]
                  - w * g[1, 2] + qz * g[2, 0] + w * g[2, 1] - 2 * qx * g[2, 2])
        gy = 2 * (-2 * qy * g[0, 0] + qx * g[0, 1] + w * g[0, 2] + qx * g[1, 0]
                  + qz * g[1, 2] - w * g[2, 0] + qz * g[2, 1] - 2 * qy * g[2, 2])
        gz = 2 * (-2 * qz * g[0, 0] - w * g[0, 1] + qx * g[0, 2] + w * g[1, 0]
                  - 2 * qz * g[1, 1] + qy * g[1, 2] + qx * g[2, 0] + qy * g[2, 1])
        dot = w * gw + qx * gx + qy * gy + qz * gz
        g_quat[i, 0] = (gw - w * dot) / norm
        g_quat[i, 1] = (gx - qx * dot) / norm
        g_quat[i, 2] = (gy - qy * dot) / norm
        g_quat[i, 3] = (gz - qz * dot) / norm
