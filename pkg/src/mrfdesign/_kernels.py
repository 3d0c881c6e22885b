"""Compiled inner loops for IR-FISP isochromat simulation.

All kernels take the RF rotation matrices precomputed per TR (shape ``(N, 3, 3)``)
and the dephasing angles as cosine/sine arrays. Isochromat sums use an in-place
pairwise reduction so results do not depend on the ensemble ordering beyond
a few ulps.

State layout for the sensitivity kernels (second axis of ``hist``)::

    0..2   M      (x, y, z)
    3..5   dM/dT1
    6..8   dM/dT2
    9..11  dM/dM0
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, error_model="numpy")
def pairwise_sum(buf, n):
    """Pairwise (tree) reduction of ``buf[:n]``; clobbers ``buf``."""
    m = n
    while m > 1:
        half = m // 2
        for i in range(half):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        if m % 2:
            buf[half] = buf[m - 1]
            m = half + 1
        else:
            m = half
    return buf[0]


@njit(cache=True, error_model="numpy")
def simulate_batch(q, te, tr, t1, t2, m0, cb, sb, out):
    """Transverse signal for K tissues sharing one schedule and ensemble.

    ``out`` has shape ``(K, N, 2)`` and is filled in place.
    """
    ntis = t1.shape[0]
    nsteps = tr.shape[0]
    nv = cb.shape[0]
    x = np.empty(nv)
    y = np.empty(nv)
    z = np.empty(nv)
    bx = np.empty(nv)
    by = np.empty(nv)
    for k in range(ntis):
        c = m0[k] / nv
        for r in range(nv):
            x[r] = 0.0
            y[r] = 0.0
            z[r] = c
        for n in range(nsteps):
            e2te = math.exp(-te[n] / t2[k])
            e2 = math.exp(-tr[n] / t2[k])
            e1 = math.exp(-tr[n] / t1[k])
            rec = c * -math.expm1(-tr[n] / t1[k])
            q00 = q[n, 0, 0]
            q01 = q[n, 0, 1]
            q02 = q[n, 0, 2]
            q10 = q[n, 1, 0]
            q11 = q[n, 1, 1]
            q12 = q[n, 1, 2]
            q20 = q[n, 2, 0]
            q21 = q[n, 2, 1]
            q22 = q[n, 2, 2]
            for r in range(nv):
                xr = x[r]
                yr = y[r]
                zr = z[r]
                qx = q00 * xr + q01 * yr + q02 * zr
                qy = q10 * xr + q11 * yr + q12 * zr
                qz = q20 * xr + q21 * yr + q22 * zr
                bx[r] = qx
                by[r] = qy
                rx = e2 * qx
                ry = e2 * qy
                x[r] = cb[r] * rx + sb[r] * ry
                y[r] = -sb[r] * rx + cb[r] * ry
                z[r] = e1 * qz + rec
            out[k, n, 0] = e2te * pairwise_sum(bx, nv)
            out[k, n, 1] = e2te * pairwise_sum(by, nv)


@njit(cache=True, error_model="numpy")
def sensitivity(q, te, tr, t1, t2, m0, cb, sb, sig, jac, hist, store):
    """Fused state + three-parameter sensitivity propagation for one tissue.

    Fills ``sig`` (N, 2) and ``jac`` (N, 2, 3). When ``store`` is true the
    pre-pulse states used at every step are written to ``hist`` (N, 12, Nv)
    for the adjoint sweep.
    """
    nsteps = tr.shape[0]
    nv = cb.shape[0]
    c = m0 / nv
    st = np.zeros((12, nv))
    for r in range(nv):
        st[2, r] = c
        st[11, r] = 1.0 / nv
    buf = np.empty((8, nv))
    inv_t1sq = 1.0 / (t1 * t1)
    inv_t2sq = 1.0 / (t2 * t2)
    for n in range(nsteps):
        if store:
            for i in range(12):
                for r in range(nv):
                    hist[n, i, r] = st[i, r]
        e2te = math.exp(-te[n] / t2)
        de2te = te[n] * inv_t2sq * e2te
        e2 = math.exp(-tr[n] / t2)
        e1 = math.exp(-tr[n] / t1)
        one_m_e1 = -math.expm1(-tr[n] / t1)
        d1 = tr[n] * inv_t1sq * e1
        d2 = tr[n] * inv_t2sq * e2
        q00 = q[n, 0, 0]
        q01 = q[n, 0, 1]
        q02 = q[n, 0, 2]
        q10 = q[n, 1, 0]
        q11 = q[n, 1, 1]
        q12 = q[n, 1, 2]
        q20 = q[n, 2, 0]
        q21 = q[n, 2, 1]
        q22 = q[n, 2, 2]
        for r in range(nv):
            cr = cb[r]
            sr = sb[r]
            # rotated state and sensitivities
            vx = st[0, r]
            vy = st[1, r]
            vz = st[2, r]
            qx = q00 * vx + q01 * vy + q02 * vz
            qy = q10 * vx + q11 * vy + q12 * vz
            qz = q20 * vx + q21 * vy + q22 * vz
            vx = st[3, r]
            vy = st[4, r]
            vz = st[5, r]
            a1x = q00 * vx + q01 * vy + q02 * vz
            a1y = q10 * vx + q11 * vy + q12 * vz
            a1z = q20 * vx + q21 * vy + q22 * vz
            vx = st[6, r]
            vy = st[7, r]
            vz = st[8, r]
            a2x = q00 * vx + q01 * vy + q02 * vz
            a2y = q10 * vx + q11 * vy + q12 * vz
            a2z = q20 * vx + q21 * vy + q22 * vz
            vx = st[9, r]
            vy = st[10, r]
            vz = st[11, r]
            a3x = q00 * vx + q01 * vy + q02 * vz
            a3y = q10 * vx + q11 * vy + q12 * vz
            a3z = q20 * vx + q21 * vy + q22 * vz

            buf[0, r] = qx
            buf[1, r] = qy
            buf[2, r] = a1x
            buf[3, r] = a1y
            buf[4, r] = a2x
            buf[5, r] = a2y
            buf[6, r] = a3x
            buf[7, r] = a3y

            # M[n] = G R q + c b
            rx = e2 * qx
            ry = e2 * qy
            st[0, r] = cr * rx + sr * ry
            st[1, r] = -sr * rx + cr * ry
            st[2, r] = e1 * qz + c * one_m_e1
            # dM/dT1 = G (dR/dT1 q + R a1) + c db/dT1
            rx = e2 * a1x
            ry = e2 * a1y
            st[3, r] = cr * rx + sr * ry
            st[4, r] = -sr * rx + cr * ry
            st[5, r] = d1 * qz + e1 * a1z - c * d1
            # dM/dT2 = G (dR/dT2 q + R a2)
            rx = d2 * qx + e2 * a2x
            ry = d2 * qy + e2 * a2y
            st[6, r] = cr * rx + sr * ry
            st[7, r] = -sr * rx + cr * ry
            st[8, r] = e1 * a2z
            # dM/dM0 = G R a3 + b / Nv
            rx = e2 * a3x
            ry = e2 * a3y
            st[9, r] = cr * rx + sr * ry
            st[10, r] = -sr * rx + cr * ry
            st[11, r] = e1 * a3z + one_m_e1 / nv

        sx = pairwise_sum(buf[0], nv)
        sy = pairwise_sum(buf[1], nv)
        sig[n, 0] = e2te * sx
        sig[n, 1] = e2te * sy
        # P dR(TE)/dT1 = 0, so the T1 column only carries the propagated term
        jac[n, 0, 0] = e2te * pairwise_sum(buf[2], nv)
        jac[n, 1, 0] = e2te * pairwise_sum(buf[3], nv)
        jac[n, 0, 1] = de2te * sx + e2te * pairwise_sum(buf[4], nv)
        jac[n, 1, 1] = de2te * sy + e2te * pairwise_sum(buf[5], nv)
        jac[n, 0, 2] = e2te * pairwise_sum(buf[6], nv)
        jac[n, 1, 2] = e2te * pairwise_sum(buf[7], nv)


@njit(cache=True, error_model="numpy")
def adjoint(q, dq, te, tr, t1, t2, m0, cb, sb, hist, gbar, g_alpha, g_tr):
    """Reverse sweep: accumulate d(cost)/d(alpha_n) and d(cost)/d(TR_n).

    ``gbar`` (N, 2, 3) is the cost gradient with respect to each Jacobian
    block J_n; ``hist`` comes from :func:`sensitivity` with ``store=True``.
    Results are added into ``g_alpha`` and ``g_tr``.
    """
    nsteps = tr.shape[0]
    nv = cb.shape[0]
    c = m0 / nv
    lam = np.zeros((12, nv))
    inv_t1 = 1.0 / t1
    inv_t2 = 1.0 / t2
    inv_t1sq = inv_t1 * inv_t1
    inv_t2sq = inv_t2 * inv_t2
    for n in range(nsteps - 1, -1, -1):
        e2te = math.exp(-te[n] / t2)
        de2te = te[n] * inv_t2sq * e2te
        e2 = math.exp(-tr[n] / t2)
        e1 = math.exp(-tr[n] / t1)
        d1 = tr[n] * inv_t1sq * e1
        d2 = tr[n] * inv_t2sq * e2
        de2 = -e2 * inv_t2
        de1 = -e1 * inv_t1
        dd1 = inv_t1sq * e1 * (1.0 - tr[n] * inv_t1)
        dd2 = inv_t2sq * e2 * (1.0 - tr[n] * inv_t2)
        db = e1 * inv_t1
        g1x = gbar[n, 0, 0]
        g1y = gbar[n, 1, 0]
        g2x = gbar[n, 0, 1]
        g2y = gbar[n, 1, 1]
        g3x = gbar[n, 0, 2]
        g3y = gbar[n, 1, 2]
        ga = 0.0
        gt = 0.0
        for r in range(nv):
            cr = cb[r]
            sr = sb[r]
            # G^T applied to the incoming adjoints
            lx = cr * lam[0, r] - sr * lam[1, r]
            ly = sr * lam[0, r] + cr * lam[1, r]
            lz = lam[2, r]
            l1x = cr * lam[3, r] - sr * lam[4, r]
            l1y = sr * lam[3, r] + cr * lam[4, r]
            l1z = lam[5, r]
            l2x = cr * lam[6, r] - sr * lam[7, r]
            l2y = sr * lam[6, r] + cr * lam[7, r]
            l2z = lam[8, r]
            l3x = cr * lam[9, r] - sr * lam[10, r]
            l3y = sr * lam[9, r] + cr * lam[10, r]
            l3z = lam[11, r]

            # adjoints of the rotated vectors
            bqx = e2 * lx + d2 * l2x + de2te * g2x
            bqy = e2 * ly + d2 * l2y + de2te * g2y
            bqz = e1 * lz + d1 * l1z
            b1x = e2 * l1x + e2te * g1x
            b1y = e2 * l1y + e2te * g1y
            b1z = e1 * l1z
            b2x = e2 * l2x + e2te * g2x
            b2y = e2 * l2y + e2te * g2y
            b2z = e1 * l2z
            b3x = e2 * l3x + e2te * g3x
            b3y = e2 * l3y + e2te * g3y
            b3z = e1 * l3z

            for blk in range(4):
                vx = hist[n, 3 * blk, r]
                vy = hist[n, 3 * blk + 1, r]
                vz = hist[n, 3 * blk + 2, r]
                if blk == 0:
                    ax, ay, az = bqx, bqy, bqz
                elif blk == 1:
                    ax, ay, az = b1x, b1y, b1z
                elif blk == 2:
                    ax, ay, az = b2x, b2y, b2z
                else:
                    ax, ay, az = b3x, b3y, b3z
                # d/dalpha through Q
                ga += ax * (dq[n, 0, 0] * vx + dq[n, 0, 1] * vy + dq[n, 0, 2] * vz)
                ga += ay * (dq[n, 1, 0] * vx + dq[n, 1, 1] * vy + dq[n, 1, 2] * vz)
                ga += az * (dq[n, 2, 0] * vx + dq[n, 2, 1] * vy + dq[n, 2, 2] * vz)
                # propagate to the previous step: Q^T a
                lam[3 * blk, r] = q[n, 0, 0] * ax + q[n, 1, 0] * ay + q[n, 2, 0] * az
                lam[3 * blk + 1, r] = q[n, 0, 1] * ax + q[n, 1, 1] * ay + q[n, 2, 1] * az
                lam[3 * blk + 2, r] = q[n, 0, 2] * ax + q[n, 1, 2] * ay + q[n, 2, 2] * az

            # d/dTR: needs the forward rotated vectors
            vx = hist[n, 0, r]
            vy = hist[n, 1, r]
            vz = hist[n, 2, r]
            qx = q[n, 0, 0] * vx + q[n, 0, 1] * vy + q[n, 0, 2] * vz
            qy = q[n, 1, 0] * vx + q[n, 1, 1] * vy + q[n, 1, 2] * vz
            qz = q[n, 2, 0] * vx + q[n, 2, 1] * vy + q[n, 2, 2] * vz
            vx = hist[n, 3, r]
            vy = hist[n, 4, r]
            vz = hist[n, 5, r]
            a1x = q[n, 0, 0] * vx + q[n, 0, 1] * vy + q[n, 0, 2] * vz
            a1y = q[n, 1, 0] * vx + q[n, 1, 1] * vy + q[n, 1, 2] * vz
            a1z = q[n, 2, 0] * vx + q[n, 2, 1] * vy + q[n, 2, 2] * vz
            vx = hist[n, 6, r]
            vy = hist[n, 7, r]
            vz = hist[n, 8, r]
            a2x = q[n, 0, 0] * vx + q[n, 0, 1] * vy + q[n, 0, 2] * vz
            a2y = q[n, 1, 0] * vx + q[n, 1, 1] * vy + q[n, 1, 2] * vz
            a2z = q[n, 2, 0] * vx + q[n, 2, 1] * vy + q[n, 2, 2] * vz
            vx = hist[n, 9, r]
            vy = hist[n, 10, r]
            vz = hist[n, 11, r]
            a3x = q[n, 0, 0] * vx + q[n, 0, 1] * vy + q[n, 0, 2] * vz
            a3y = q[n, 1, 0] * vx + q[n, 1, 1] * vy + q[n, 1, 2] * vz
            a3z = q[n, 2, 0] * vx + q[n, 2, 1] * vy + q[n, 2, 2] * vz

            gt += de2 * (lx * qx + ly * qy) + de1 * lz * qz + c * lz * db
            gt += de2 * (l1x * a1x + l1y * a1y) + l1z * (dd1 * qz + de1 * a1z - c * dd1)
            gt += l2x * (dd2 * qx + de2 * a2x) + l2y * (dd2 * qy + de2 * a2y) + de1 * l2z * a2z
            gt += de2 * (l3x * a3x + l3y * a3y) + l3z * (de1 * a3z + db / nv)
        g_alpha[n] += ga
        g_tr[n] += gt
