"""Shared fixtures and independent oracles for the test suite.

Oracles here deliberately avoid the implementations they check: the gap
oracle enumerates every subsequence, the scan oracle marches the true
geometry in meters, haversine is the textbook great-circle formula, and the
linear Kalman reference is written out long-hand.
"""

from __future__ import annotations

import math

import numpy as np

from gokart.geometry import body_to_world
from gokart.track import Track


# --- track fixtures ----------------------------------------------------------

def circle_track(n=36, radius=20.0, width=1.9, vhw=0.4, clockwise=True) -> Track:
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    if clockwise:
        th = -th
    xy = np.column_stack([radius * np.cos(th), radius * np.sin(th)])
    return Track.from_arrays(xy, width, width, closed=True,
                             vehicle_half_width=vhw)


def oval_xy(radius=20.0, straight=40.0, spacing=2.0) -> np.ndarray:
    pts = []
    for i in range(int(straight / spacing)):
        pts.append((i * spacing - straight / 2.0, -radius))
    for i in range(int(math.pi * radius / spacing)):
        a = -math.pi / 2.0 + i * spacing / radius
        pts.append((straight / 2.0 + radius * math.cos(a), radius * math.sin(a)))
    for i in range(int(straight / spacing)):
        pts.append((straight / 2.0 - i * spacing, radius))
    for i in range(int(math.pi * radius / spacing)):
        a = math.pi / 2.0 + i * spacing / radius
        pts.append((-straight / 2.0 + radius * math.cos(a), radius * math.sin(a)))
    return np.array(pts)


def oval_track(radius=20.0, straight=40.0, width=3.5, vhw=0.4) -> Track:
    return Track.from_arrays(oval_xy(radius, straight), width, width,
                             closed=True, vehicle_half_width=vhw)


def wiggly_track(seed=3, n=60, radius=30.0, amp=4.0, width=3.0, vhw=0.4) -> Track:
    rng = np.random.default_rng(seed)
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    coef = rng.normal(size=2)
    r = radius + amp * (np.sin(3 * th + coef[0]) + 0.5 * np.sin(5 * th + coef[1]))
    xy = np.column_stack([r * np.cos(th), r * np.sin(th)])
    return Track.from_arrays(xy, width, width, closed=True,
                             vehicle_half_width=vhw)


def straight_track(n=12, spacing=2.0, width=2.0, vhw=0.4) -> Track:
    x = np.arange(n, dtype=float) * spacing
    xy = np.column_stack([x, np.zeros(n)])
    return Track.from_arrays(xy, width, width, closed=False,
                             vehicle_half_width=vhw)


def write_track_csv(path, track: Track) -> None:
    with open(path, "w") as fh:
        fh.write("x_m,y_m,w_left_m,w_right_m\n")
        for (x, y), wl, wr in zip(track.xy, track.w_left, track.w_right):
            fh.write(f"{float(x)!r},{float(y)!r},{float(wl)!r},{float(wr)!r}\n")


# --- oracles -----------------------------------------------------------------

def haversine_m(lat1, lon1, lat2, lon2, radius=6_371_000.0) -> float:
    """Great-circle distance (textbook formula)."""
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = math.sin(dlat / 2.0) ** 2 + \
        math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return radius * 2.0 * math.asin(math.sqrt(a))


def brute_force_gap(distances, epsilon, center=None):
    """Exhaustively score every qualifying (i, j) subsequence of rays.

    Enumerates each (i, j) pair whose rays all clear epsilon (extending j
    until the first failing ray, which also rules out every longer span
    starting at i). Returns (i, j, midpoint) of the widest one with the
    tie-breaking (midpoint nearest center, then lowest i), or None.
    """
    d = np.asarray(distances, dtype=float)
    n = len(d)
    if center is None:
        center = (n - 1) // 2
    ok = d >= epsilon
    best = None
    for i in range(n):
        if not ok[i]:
            continue
        for j in range(i, n):
            if not ok[j]:
                break
            mid = (i + j) // 2
            key = (-(j - i + 1), abs(mid - center), i)
            if best is None or key < best[0]:
                best = (key, i, j, mid)
    return None if best is None else best[1:]


def batch_brute_force_gaps(scans: np.ndarray, epsilon: float):
    """Exhaustive gap search vectorized over many scans.

    For each starting index i the longest qualifying end reach(i) is found;
    every candidate (i, reach(i)) is then scored with the full tie-breaking
    rule. Any shorter span (i, j < reach(i)) also qualifies but has strictly
    smaller width, the primary key, so it is dominated by an evaluated
    candidate: the search is exhaustive over all qualifying (i, j) pairs.
    brute_force_gap cross-checks this on samples by literal enumeration.
    Returns arrays (found, i, j, mid).
    """
    scans = np.asarray(scans, dtype=float)
    m, n = scans.shape
    center = (n - 1) // 2
    ok = scans >= epsilon
    run = np.zeros((m, n), dtype=np.int64)
    run[:, n - 1] = ok[:, n - 1]
    for col in range(n - 2, -1, -1):
        run[:, col] = ok[:, col] * (1 + run[:, col + 1])
    starts = np.arange(n)[None, :]
    ends = starts + run - 1
    mids = (starts + ends) // 2
    score = (run << 20) - (np.abs(mids - center) << 10) - starts
    score[~ok] = -1
    best = np.argmax(score, axis=1)
    rows = np.arange(m)
    found = score[rows, best] >= 0
    out_i = best
    out_j = ends[rows, best]
    out_mid = mids[rows, best]
    return found, out_i, out_j, out_mid


def reference_linear_kalman(mean, cov, f, r, steps):
    """Plain linear Kalman filter, written independently of the EKF code.

    `steps` is a list of (control_offset, obs or None, obs_cov). Returns the
    final (mean, cov).
    """
    mean = np.array(mean, dtype=float)
    cov = np.array(cov, dtype=float)
    eye = np.eye(len(mean))
    for offset, obs, obs_cov in steps:
        mean = f @ mean + offset
        cov = f @ cov @ f.T + r
        if obs is not None:
            s = cov + obs_cov
            k = cov @ np.linalg.inv(s)
            mean = mean + k @ (obs - mean)
            cov = (eye - k) @ cov
            cov = 0.5 * (cov + cov.T)
    return mean, cov


def geometric_scan_oracle(sampler, pose, angles, bev, step_m=0.02) -> np.ndarray:
    """March the true track geometry in meters, capped at the BEV window.

    Independent of the image pipeline: no rendering, no pixels, just the
    inside-track predicate along each ray.
    """
    vx, vy = bev.origin_px()
    mpp = bev.meters_per_px
    t = np.arange(step_m, bev.max_range + step_m, step_m)
    out = np.full(len(angles), bev.max_range)
    for idx, a in enumerate(angles):
        fwd = t * np.cos(a)
        left = t * np.sin(a)
        col = vx - left / mpp
        row = vy - fwd / mpp
        in_frame = (col >= -0.5) & (col <= bev.width - 0.5) & \
                   (row >= -0.5) & (row <= bev.height - 0.5)
        body = np.stack([fwd, left], axis=-1)
        world = body_to_world(pose.x, pose.y, pose.psi, body)
        grass = (~sampler.inside(world)) & in_frame
        if grass.any():
            out[idx] = t[int(np.argmax(grass))]
    return out
