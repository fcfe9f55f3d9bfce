"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``CONTOURREG_DISABLE_NUMBA=1``
to force the numpy implementations (they are also used when numba is not
installed). Both sets stay importable as :data:`numpy_impl` and
:data:`numba_impl` so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.

Kernels
-------
project(X, R, t, f, cx, cy) -> (uv, min_depth)
nearest_2d(queries, refs) -> (index, distance)
silhouette_mask(eye, midpoints, normals, edge_faces) -> bool mask
pnp_search(...) -> best hypothesis of the blind PnP enumeration
"""
from __future__ import annotations

import math
import os
import types

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_DISABLED = os.environ.get("CONTOURREG_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")
HAVE_NUMBA = numba is not None

# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

_NN_CHUNK = 2048
POLISH_MAX_REL_STEP = 1e-3  # P3P depth polish: larger Newton steps are refused


def _project_np(X, R, t, f, cx, cy):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    zmin = float(z.min()) if len(z) else math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.empty((len(X), 2))
        uv[:, 0] = f * Xc[:, 0] / z + cx
        uv[:, 1] = f * Xc[:, 1] / z + cy
    return uv, zmin


def _nearest_2d_np(queries, refs):
    m = len(queries)
    idx = np.empty(m, dtype=np.int64)
    dist = np.empty(m)
    for s in range(0, m, _NN_CHUNK):
        q = queries[s:s + _NN_CHUNK]
        dx = q[:, 0, None] - refs[None, :, 0]
        dy = q[:, 1, None] - refs[None, :, 1]
        d2 = dx * dx + dy * dy
        k = np.argmin(d2, axis=1)
        idx[s:s + _NN_CHUNK] = k
        dist[s:s + _NN_CHUNK] = np.sqrt(d2[np.arange(len(q)), k])
    return idx, dist


def _silhouette_mask_np(eye, midpoints, normals, edge_faces):
    v = eye[None, :] - midpoints
    f0 = np.einsum("ij,ij->i", normals[edge_faces[:, 0]], v) > 0.0
    f1 = np.einsum("ij,ij->i", normals[edge_faces[:, 1]], v) > 0.0
    return f0 != f1


def _quartic_roots_np(coeffs):
    """Real roots of a batch of quartics (H, 5), highest power first.

    Returns (H, 4) roots with NaN where a root is complex.
    """
    c = coeffs / coeffs[:, :1]
    H = len(c)
    comp = np.zeros((H, 4, 4))
    comp[:, 0, :] = -c[:, 1:]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    ok = np.all(np.isfinite(comp), axis=(1, 2))
    comp[~ok] = 0.0
    z = np.linalg.eigvals(comp)
    real = np.abs(z.imag) <= 1e-4 * (1.0 + np.abs(z.real))
    x = np.where(real & ok[:, None], z.real, np.nan)
    for _ in range(3):
        p = (((x + c[:, 1:2]) * x + c[:, 2:3]) * x + c[:, 3:4]) * x + c[:, 4:5]
        dp = ((4.0 * x + 3.0 * c[:, 1:2]) * x + 2.0 * c[:, 2:3]) * x + c[:, 3:4]
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dp != 0.0, p / dp, 0.0)
        # clustered roots have a vanishing derivative; Newton would fly off
        x = x - np.where(np.abs(step) <= POLISH_MAX_REL_STEP * (1.0 + np.abs(x)), step, 0.0)
    return x


def _frame_np(p0, p1, p2):
    e1 = p1 - p0
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e3 = np.cross(e1, p2 - p0)
    e3 /= np.linalg.norm(e3, axis=-1, keepdims=True)
    e2 = np.cross(e3, e1)
    return np.stack([e1, e2, e3], axis=-1)


def _pick_s2_np(s2_formula, s1, s3, a2, c2, ca, cg):
    """Second depth: Grunert's closed form or a root of the (s1, s2) equation.

    The closed form is 0/0 when the bearings are nearly symmetric, so both
    roots of ``s1^2 + s2^2 - 2 s1 s2 cg = c2`` are tried as well and the
    candidate that best satisfies the (s2, s3) equation wins.
    """
    disc = np.sqrt(np.maximum(s1 * s1 * cg * cg - s1 * s1 + c2, 0.0))
    cands = np.stack([s2_formula, s1 * cg + disc, s1 * cg - disc], axis=-1)
    err = np.abs(cands * cands + (s3 * s3)[..., None] - 2.0 * cands * s3[..., None] * ca[..., None] - a2[..., None])
    err = np.where(np.isfinite(err) & (cands > 0), err, np.inf)
    return np.take_along_axis(cands, np.argmin(err, axis=-1)[..., None], axis=-1)[..., 0]


def _p3p_batch_np(j, Xw):
    """Grunert P3P for a batch.

    j: (H, 3, 3) unit bearings, Xw: (H, 3, 3) world points.
    Returns R (H, 4, 3, 3), t (H, 4, 3), valid (H, 4).
    """
    a2 = np.sum((Xw[:, 1] - Xw[:, 2]) ** 2, axis=1)
    b2 = np.sum((Xw[:, 0] - Xw[:, 2]) ** 2, axis=1)
    c2 = np.sum((Xw[:, 0] - Xw[:, 1]) ** 2, axis=1)
    ca = np.sum(j[:, 1] * j[:, 2], axis=1)
    cb = np.sum(j[:, 0] * j[:, 2], axis=1)
    cg = np.sum(j[:, 0] * j[:, 1], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        coeffs = _grunert_coeffs(a2, b2, c2, ca, cb, cg)
        v = _quartic_roots_np(np.stack(coeffs, axis=1))
        amc = ((a2 - c2) / b2)[:, None]
        u = ((-1.0 + amc) * v * v - 2.0 * amc * cb[:, None] * v + 1.0 + amc) / (
            2.0 * (cg[:, None] - v * ca[:, None])
        )
        s1 = np.sqrt(b2[:, None] / (1.0 + v * v - 2.0 * v * cb[:, None]))
        s2 = _pick_s2_np(u * s1, s1, v * s1, a2[:, None], c2[:, None], ca[:, None], cg[:, None])
    valid = np.isfinite(v) & np.isfinite(s2) & np.isfinite(s1) & (s2 > 0) & (v > 0) & (s1 > 0)
    s = np.stack([s1, s2, v * s1], axis=-1)  # (H, 4, 3)
    s = np.where(valid[..., None], s, 1.0)
    s = _polish_depths_np(s, a2, b2, c2, ca, cb, cg)
    valid &= np.all(np.isfinite(s), axis=-1) & np.all(s > 0, axis=-1)
    s = np.where(valid[..., None], s, 1.0)
    Pc = s[..., None] * j[:, None, :, :]  # (H, 4, 3, 3)
    Fc = _frame_np(Pc[..., 0, :], Pc[..., 1, :], Pc[..., 2, :])
    Fw = _frame_np(Xw[:, 0], Xw[:, 1], Xw[:, 2])[:, None]
    R = Fc @ np.swapaxes(Fw, -1, -2)
    t = Pc[..., 0, :] - np.einsum("hkij,hj->hki", R, Xw[:, 0])
    valid &= np.all(np.isfinite(R), axis=(-1, -2)) & np.all(np.isfinite(t), axis=-1)
    return R, t, valid


def _polish_depths_np(s, a2, b2, c2, ca, cb, cg, iters=3):
    """Newton steps on the three law-of-cosines equations for the depths."""
    a2, b2, c2, ca, cb, cg = (x[:, None] for x in (a2, b2, c2, ca, cb, cg))
    for _ in range(iters):
        s1, s2, s3 = s[..., 0], s[..., 1], s[..., 2]
        F = np.stack([
            s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2,
        ], axis=-1)
        z = np.zeros_like(s1)
        J = np.stack([
            np.stack([z, 2.0 * s2 - 2.0 * s3 * ca, 2.0 * s3 - 2.0 * s2 * ca], axis=-1),
            np.stack([2.0 * s1 - 2.0 * s3 * cb, z, 2.0 * s3 - 2.0 * s1 * cb], axis=-1),
            np.stack([2.0 * s1 - 2.0 * s2 * cg, 2.0 * s2 - 2.0 * s1 * cg, z], axis=-1),
        ], axis=-2)
        det = np.linalg.det(J)
        ok = np.abs(det) > 1e-12 * (1.0 + np.max(np.abs(J), axis=(-1, -2))) ** 3
        J = np.where(ok[..., None, None], J, np.eye(3))
        step = np.linalg.solve(J, F[..., None])[..., 0]
        # a large step means a near-singular system; it would jump to another solution
        ok &= np.max(np.abs(step) / np.abs(s), axis=-1) <= POLISH_MAX_REL_STEP
        s = s - np.where(ok[..., None], step, 0.0)
    return s


def _score_np(R, t, beads, det, f, cx, cy, thresh):
    """Mutual-nearest inlier count and mean error for a batch of poses."""
    Xc = np.einsum("pij,mj->pmi", R, beads) + t[:, None, :]
    z = Xc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = f * Xc[..., 0] / zs + cx
    v = f * Xc[..., 1] / zs + cy
    d = np.sqrt((u[..., None] - det[None, None, :, 0]) ** 2 + (v[..., None] - det[None, None, :, 1]) ** 2)
    d = np.where(front[..., None], d, np.inf)
    bead_nn = np.argmin(d, axis=2)  # (P, m)
    det_nn = np.argmin(d, axis=1)  # (P, n)
    P, m = bead_nn.shape
    rows = np.arange(P)[:, None]
    back = det_nn[rows, bead_nn]
    dmin = d[rows, np.arange(m)[None, :], bead_nn]
    inl = (back == np.arange(m)[None, :]) & (dmin <= thresh)
    count = inl.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, np.where(inl, dmin, 0.0).sum(axis=1) / np.maximum(count, 1), np.inf)
    return count, mean


def _pnp_search_np(bearings, det, beads, hyps, f, cx, cy, thresh, stop_count, chunk=4096):
    best = (-1, math.inf, -1)
    best_R = np.eye(3)
    best_t = np.zeros(3)
    for s in range(0, len(hyps), chunk):
        h = hyps[s:s + chunk]
        j = bearings[h[:, :3]]
        Xw = beads[h[:, 3:]]
        R, t, valid = _p3p_batch_np(j, Xw)
        R = R.reshape(-1, 3, 3)
        t = t.reshape(-1, 3)
        valid = valid.reshape(-1)
        count = np.full(len(valid), -1)
        mean = np.full(len(valid), np.inf)
        if valid.any():
            c, mm = _score_np(R[valid], t[valid], beads, det, f, cx, cy, thresh)
            count[valid] = c
            mean[valid] = mm
        order = np.lexsort((np.arange(len(count)), mean, -count))
        k = order[0]
        if count[k] > best[0] or (count[k] == best[0] and mean[k] < best[1]):
            best = (int(count[k]), float(mean[k]), s * 4 + int(k))
            best_R = R[k].copy()
            best_t = t[k].copy()
        if best[0] >= stop_count:
            break
    return best[0], best[1], best[2] // 4 if best[2] >= 0 else -1, best_R, best_t


# ---------------------------------------------------------------------------
# shared scalar helpers (plain python; compiled by numba when available)
# ---------------------------------------------------------------------------

def _grunert_coeffs(a2, b2, c2, ca, cb, cg):
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    bmc = (b2 - c2) / b2
    bma = (b2 - a2) / b2
    A4 = (amc - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (
        amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca
        - 4.0 * apc * ca * cb * cg + 2.0 * bma * cg * cg
    )
    A1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg)
    A0 = (1.0 + amc) ** 2 - 4.0 * a2 / b2 * cg * cg
    return A4, A3, A2, A1, A0


numpy_impl = types.SimpleNamespace(
    name="numpy",
    project=_project_np,
    nearest_2d=_nearest_2d_np,
    silhouette_mask=_silhouette_mask_np,
    pnp_search=_pnp_search_np,
)

# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

numba_impl = None

if HAVE_NUMBA:
    import cmath

    njit = numba.njit(cache=True, nogil=True, error_model="numpy")

    @njit
    def _project_nb(X, R, t, f, cx, cy):
        n = X.shape[0]
        uv = np.empty((n, 2))
        zmin = np.inf
        for i in range(n):
            x = R[0, 0] * X[i, 0] + R[0, 1] * X[i, 1] + R[0, 2] * X[i, 2] + t[0]
            y = R[1, 0] * X[i, 0] + R[1, 1] * X[i, 1] + R[1, 2] * X[i, 2] + t[1]
            z = R[2, 0] * X[i, 0] + R[2, 1] * X[i, 1] + R[2, 2] * X[i, 2] + t[2]
            if z < zmin:
                zmin = z
            uv[i, 0] = f * x / z + cx
            uv[i, 1] = f * y / z + cy
        return uv, zmin

    @njit
    def _nearest_2d_nb(queries, refs):
        m = queries.shape[0]
        n = refs.shape[0]
        idx = np.empty(m, dtype=np.int64)
        dist = np.empty(m)
        for i in range(m):
            qx = queries[i, 0]
            qy = queries[i, 1]
            best = np.inf
            bk = 0
            for k in range(n):
                dx = qx - refs[k, 0]
                dy = qy - refs[k, 1]
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
                    bk = k
            idx[i] = bk
            dist[i] = math.sqrt(best)
        return idx, dist

    @njit
    def _silhouette_mask_nb(eye, midpoints, normals, edge_faces):
        ne = midpoints.shape[0]
        out = np.empty(ne, dtype=np.bool_)
        for e in range(ne):
            vx = eye[0] - midpoints[e, 0]
            vy = eye[1] - midpoints[e, 1]
            vz = eye[2] - midpoints[e, 2]
            a = edge_faces[e, 0]
            b = edge_faces[e, 1]
            da = normals[a, 0] * vx + normals[a, 1] * vy + normals[a, 2] * vz
            db = normals[b, 0] * vx + normals[b, 1] * vy + normals[b, 2] * vz
            out[e] = (da > 0.0) != (db > 0.0)
        return out

    _grunert_coeffs_nb = njit(_grunert_coeffs)

    @njit
    def _cubic_root_max(b, c, d):
        # complex root of largest modulus of m^3 + b m^2 + c m + d
        P = c - b * b / 3.0
        Q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d
        D = complex(Q * Q / 4.0 + P * P * P / 27.0)
        sq = cmath.sqrt(D)
        w = -Q / 2.0 + sq
        if abs(w) < abs(-Q / 2.0 - sq):
            w = -Q / 2.0 - sq
        best = complex(0.0)
        if abs(w) == 0.0:
            return complex(-b / 3.0)
        u = w ** (1.0 / 3.0)
        om = complex(-0.5, math.sqrt(3.0) / 2.0)
        for k in range(3):
            uk = u * om ** k
            m = uk - P / (3.0 * uk) - b / 3.0
            if abs(m) > abs(best):
                best = m
        return best

    @njit
    def _quartic_real_roots(A4, A3, A2, A1, A0, out):
        # Ferrari on the monic quartic, Newton-polished; returns number of roots
        if A4 == 0.0 or not np.isfinite(A4):
            return 0
        a = A3 / A4
        b = A2 / A4
        c = A1 / A4
        d = A0 / A4
        if not (np.isfinite(a) and np.isfinite(b) and np.isfinite(c) and np.isfinite(d)):
            return 0
        p = b - 3.0 * a * a / 8.0
        q = c - a * b / 2.0 + a * a * a / 8.0
        r = d - a * c / 4.0 + a * a * b / 16.0 - 3.0 * a * a * a * a / 256.0
        m = _cubic_root_max(p, p * p / 4.0 - r, -q * q / 8.0)
        ys = np.empty(4, dtype=np.complex128)
        s = cmath.sqrt(2.0 * m)
        if abs(s) < 1e-14:
            # biquadratic: y^4 + p y^2 + r = 0
            disc = cmath.sqrt(complex(p * p - 4.0 * r))
            z1 = (-p + disc) / 2.0
            z2 = (-p - disc) / 2.0
            ys[0] = cmath.sqrt(z1)
            ys[1] = -ys[0]
            ys[2] = cmath.sqrt(z2)
            ys[3] = -ys[2]
        else:
            t1 = cmath.sqrt(-2.0 * m - 2.0 * p - 2.0 * q / s)
            t2 = cmath.sqrt(-2.0 * m - 2.0 * p + 2.0 * q / s)
            ys[0] = (s + t1) / 2.0
            ys[1] = (s - t1) / 2.0
            ys[2] = (-s + t2) / 2.0
            ys[3] = (-s - t2) / 2.0
        n = 0
        for k in range(4):
            z = ys[k] - a / 4.0
            if abs(z.imag) > 1e-4 * (1.0 + abs(z.real)):
                continue
            x = z.real
            for _ in range(3):
                pv = (((x + a) * x + b) * x + c) * x + d
                dp = ((4.0 * x + 3.0 * a) * x + 2.0 * b) * x + c
                if dp == 0.0:
                    break
                step = pv / dp
                if abs(step) > POLISH_MAX_REL_STEP * (1.0 + abs(x)):
                    break
                x -= step
            out[n] = x
            n += 1
        return n

    @njit
    def _frame_nb(p0, p1, p2, F):
        # orthonormal frame (columns e1, e2, e3) spanned by three points
        e1x, e1y, e1z = p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]
        n1 = math.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
        e1x, e1y, e1z = e1x / n1, e1y / n1, e1z / n1
        wx, wy, wz = p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]
        e3x = e1y * wz - e1z * wy
        e3y = e1z * wx - e1x * wz
        e3z = e1x * wy - e1y * wx
        n3 = math.sqrt(e3x * e3x + e3y * e3y + e3z * e3z)
        e3x, e3y, e3z = e3x / n3, e3y / n3, e3z / n3
        F[0, 0], F[1, 0], F[2, 0] = e1x, e1y, e1z
        F[0, 1] = e3y * e1z - e3z * e1y
        F[1, 1] = e3z * e1x - e3x * e1z
        F[2, 1] = e3x * e1y - e3y * e1x
        F[0, 2], F[1, 2], F[2, 2] = e3x, e3y, e3z

    @njit
    def _p3p_nb(j0, j1, j2, X0, X1, X2, Rs, ts):
        a2 = (X1[0] - X2[0]) ** 2 + (X1[1] - X2[1]) ** 2 + (X1[2] - X2[2]) ** 2
        b2 = (X0[0] - X2[0]) ** 2 + (X0[1] - X2[1]) ** 2 + (X0[2] - X2[2]) ** 2
        c2 = (X0[0] - X1[0]) ** 2 + (X0[1] - X1[1]) ** 2 + (X0[2] - X1[2]) ** 2
        ca = j1[0] * j2[0] + j1[1] * j2[1] + j1[2] * j2[2]
        cb = j0[0] * j2[0] + j0[1] * j2[1] + j0[2] * j2[2]
        cg = j0[0] * j1[0] + j0[1] * j1[1] + j0[2] * j1[2]
        if b2 == 0.0:
            return 0
        A4, A3, A2, A1, A0 = _grunert_coeffs_nb(a2, b2, c2, ca, cb, cg)
        roots = np.empty(4)
        nr = _quartic_real_roots(A4, A3, A2, A1, A0, roots)
        amc = (a2 - c2) / b2
        Fw = np.empty((3, 3))
        Fc = np.empty((3, 3))
        P = np.empty((3, 3))
        _frame_nb(X0, X1, X2, Fw)
        ns = 0
        for k in range(nr):
            v = roots[k]
            q = 1.0 + v * v - 2.0 * v * cb
            if not (v > 0.0 and q > 0.0):
                continue
            s1 = math.sqrt(b2 / q)
            s3 = v * s1
            # closed-form s2 is 0/0 for near-symmetric bearings: also try both
            # roots of the (s1, s2) equation, keep the best fit of the (s2, s3) one
            den = 2.0 * (cg - v * ca)
            disc = math.sqrt(max(s1 * s1 * cg * cg - s1 * s1 + c2, 0.0))
            s2 = -1.0
            best = np.inf
            for c in range(3):
                if c == 0:
                    if den == 0.0:
                        continue
                    cand = s1 * ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den
                elif c == 1:
                    cand = s1 * cg + disc
                else:
                    cand = s1 * cg - disc
                e = abs(cand * cand + s3 * s3 - 2.0 * cand * s3 * ca - a2)
                if cand > 0.0 and e < best:
                    best = e
                    s2 = cand
            if not s2 > 0.0:
                continue
            for _ in range(3):
                # Newton on the law-of-cosines system, 3x3 solve by Cramer's rule
                F0 = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2
                F1 = s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2
                F2 = s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2
                j01 = 2.0 * s2 - 2.0 * s3 * ca
                j02 = 2.0 * s3 - 2.0 * s2 * ca
                j10 = 2.0 * s1 - 2.0 * s3 * cb
                j12 = 2.0 * s3 - 2.0 * s1 * cb
                j20 = 2.0 * s1 - 2.0 * s2 * cg
                j21 = 2.0 * s2 - 2.0 * s1 * cg
                # J = [[0, j01, j02], [j10, 0, j12], [j20, j21, 0]]
                dj = j01 * j12 * j20 + j02 * j10 * j21
                jmax = max(abs(j01), abs(j02), abs(j10), abs(j12), abs(j20), abs(j21))
                if abs(dj) <= 1e-12 * (1.0 + jmax) ** 3:
                    break
                d0 = -F0 * j12 * j21 + j01 * j12 * F2 + j02 * F1 * j21
                d1 = F0 * j12 * j20 + j02 * (j10 * F2 - F1 * j20)
                d2 = F0 * j10 * j21 - j01 * (j10 * F2 - F1 * j20)
                d0 /= dj
                d1 /= dj
                d2 /= dj
                if max(abs(d0) / s1, abs(d1) / s2, abs(d2) / s3) > POLISH_MAX_REL_STEP:
                    break
                s1 -= d0
                s2 -= d1
                s3 -= d2
            if not (s1 > 0.0 and s2 > 0.0 and s3 > 0.0):
                continue
            for i in range(3):
                P[0, i] = s1 * j0[i]
                P[1, i] = s2 * j1[i]
                P[2, i] = s3 * j2[i]
            _frame_nb(P[0], P[1], P[2], Fc)
            ok = True
            for r in range(3):
                for c in range(3):
                    val = Fc[r, 0] * Fw[c, 0] + Fc[r, 1] * Fw[c, 1] + Fc[r, 2] * Fw[c, 2]
                    ok = ok and np.isfinite(val)
                    Rs[ns, r, c] = val
            for r in range(3):
                val = P[0, r] - (Rs[ns, r, 0] * X0[0] + Rs[ns, r, 1] * X0[1] + Rs[ns, r, 2] * X0[2])
                ok = ok and np.isfinite(val)
                ts[ns, r] = val
            if ok:
                ns += 1
        return ns

    @njit
    def _score_nb(R, t, beads, det, f, cx, cy, thresh, uv, need=0):
        # stops early (returning -1) once ``need`` inliers are out of reach
        m = beads.shape[0]
        n = det.shape[0]
        th2 = thresh * thresh
        for b in range(m):
            x = R[0, 0] * beads[b, 0] + R[0, 1] * beads[b, 1] + R[0, 2] * beads[b, 2] + t[0]
            y = R[1, 0] * beads[b, 0] + R[1, 1] * beads[b, 1] + R[1, 2] * beads[b, 2] + t[1]
            z = R[2, 0] * beads[b, 0] + R[2, 1] * beads[b, 1] + R[2, 2] * beads[b, 2] + t[2]
            if z > 1e-9:
                uv[b, 0] = f * x / z + cx
                uv[b, 1] = f * y / z + cy
            else:
                uv[b, 0] = np.inf
                uv[b, 1] = np.inf
        count = 0
        total = 0.0
        for b in range(m):
            if count + (m - b) < need:
                return -1, np.inf
            kb = -1
            best = np.inf
            for k in range(n):
                dx = uv[b, 0] - det[k, 0]
                dy = uv[b, 1] - det[k, 1]
                dd = dx * dx + dy * dy
                if dd < best:
                    best = dd
                    kb = k
            if kb < 0 or best > th2:
                continue
            # mutual check: is b the nearest bead of detection kb?
            mutual = True
            for b2 in range(m):
                if b2 == b:
                    continue
                dx = uv[b2, 0] - det[kb, 0]
                dy = uv[b2, 1] - det[kb, 1]
                dd = dx * dx + dy * dy
                if dd < best or (dd == best and b2 < b):
                    mutual = False
                    break
            if mutual:
                count += 1
                total += math.sqrt(best)
        mean = total / count if count > 0 else np.inf
        return count, mean

    @njit
    def _pnp_search_nb(bearings, det, beads, hyps, f, cx, cy, thresh, stop_count):
        best_count = -1
        best_mean = np.inf
        best_h = -1
        best_R = np.eye(3)
        best_t = np.zeros(3)
        Rs = np.empty((4, 3, 3))
        ts = np.empty((4, 3))
        uv = np.empty((beads.shape[0], 2))
        for h in range(hyps.shape[0]):
            ns = _p3p_nb(
                bearings[hyps[h, 0]], bearings[hyps[h, 1]], bearings[hyps[h, 2]],
                beads[hyps[h, 3]], beads[hyps[h, 4]], beads[hyps[h, 5]], Rs, ts,
            )
            for k in range(ns):
                c, mean = _score_nb(Rs[k], ts[k], beads, det, f, cx, cy, thresh, uv, best_count)
                if c > best_count or (c == best_count and mean < best_mean):
                    best_count = c
                    best_mean = mean
                    best_h = h
                    best_R[:, :] = Rs[k]
                    best_t[:] = ts[k]
            if best_count >= stop_count:
                break
        return best_count, best_mean, best_h, best_R, best_t

    def _p3p_single_nb(j, Xw):
        Rs = np.empty((4, 3, 3))
        ts = np.empty((4, 3))
        n = _p3p_nb(j[0], j[1], j[2], Xw[0], Xw[1], Xw[2], Rs, ts)
        return Rs[:n], ts[:n]

    numba_impl = types.SimpleNamespace(
        name="numba",
        project=_project_nb,
        nearest_2d=_nearest_2d_nb,
        silhouette_mask=_silhouette_mask_nb,
        pnp_search=_pnp_search_nb,
        p3p_single=_p3p_single_nb,
    )


def _p3p_single_np(j, Xw):
    R, t, valid = _p3p_batch_np(j[None], Xw[None])
    return R[0][valid[0]], t[0][valid[0]]


numpy_impl.p3p_single = _p3p_single_np

active = numba_impl if (HAVE_NUMBA and not _DISABLED) else numpy_impl
BACKEND = active.name


def project(X, R, t, f, cx, cy):
    return active.project(X, R, t, float(f), float(cx), float(cy))


def nearest_2d(queries, refs):
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 2)
    r = np.ascontiguousarray(refs, dtype=np.float64).reshape(-1, 2)
    if len(r) == 0:
        raise ValueError("nearest_2d needs at least one reference point")
    return active.nearest_2d(q, r)


def silhouette_mask(eye, midpoints, normals, edge_faces):
    return active.silhouette_mask(np.ascontiguousarray(eye, dtype=np.float64), midpoints, normals, edge_faces)


def p3p(j, Xw):
    return active.p3p_single(np.ascontiguousarray(j, dtype=np.float64), np.ascontiguousarray(Xw, dtype=np.float64))


def pnp_search(bearings, det, beads, hyps, f, cx, cy, thresh, stop_count):
    return active.pnp_search(
        np.ascontiguousarray(bearings, dtype=np.float64),
        np.ascontiguousarray(det, dtype=np.float64),
        np.ascontiguousarray(beads, dtype=np.float64),
        np.ascontiguousarray(hyps, dtype=np.int64),
        float(f), float(cx), float(cy), float(thresh), int(stop_count),
    )
