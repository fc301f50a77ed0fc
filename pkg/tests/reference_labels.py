"""Naive per-timestep labelers used as an oracle for the vectorized ones.

Plain Python loops over explicit windows; circles are fitted with a generic
least-squares solve instead of the closed-form normal equations.
"""

import math

import numpy as np


def wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def bin_of(value, lo, hi, k):
    idx = math.floor((value - lo) / (hi - lo) * k + 1e-9)  # round-off at exact edges
    return min(max(idx, 0), k - 1)


def window(t, length, w):
    return range(max(t - w + 1, 0), min(t + w, length))


def majority(values, num_labels):
    counts = [0] * num_labels
    for v in values:
        counts[v] += 1
    best = 0
    for z in range(num_labels):
        if counts[z] > counts[best]:
            best = z
    return best


def circle_lstsq(points):
    a = np.array([[x, y, 1.0] for x, y in points])
    b = np.array([x * x + y * y for x, y in points])
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3:
        return None
    cx, cy = sol[0] / 2, sol[1] / 2
    return math.sqrt(sol[2] + cx * cx + cy * cy)


def reference_labels(positions, headings, criterion):
    pos = [(float(x), float(y)) for x, y in positions]
    th = [float(h) for h in headings]
    T = len(pos) - 1
    p = criterion.params
    w = criterion.window_radius
    dth = [wrap(th[i + 1] - th[i]) for i in range(T)]
    out = []
    for t in range(T):
        if criterion.id == "position":
            lo, hi = p["x_range"]
            pts = [bin_of(pos[i][0], lo, hi, p["x_bins"]) + p["x_bins"] * (pos[i][1] >= p["y_split"])
                   for i in window(t, T, w)]
            out.append(majority(pts, criterion.num_labels))
        elif criterion.id == "movement_direction":
            labs = []
            for i in window(t, T, w):
                dx, dy = pos[i + 1][0] - pos[i][0], pos[i + 1][1] - pos[i][1]
                if math.sqrt(dx * dx + dy * dy) < p["min_displacement"]:
                    labs.append(p["bins"])
                else:
                    b = math.floor((math.atan2(dy, dx) + math.pi) / (2 * math.pi) * p["bins"])
                    labs.append(b % p["bins"])
            out.append(majority(labs, criterion.num_labels))
        elif criterion.id == "turn_direction":
            vals = [dth[i] for i in window(t, T, w)]
            omega = sum(vals) / len(vals)
            out.append(2 if abs(omega) < p["threshold"] else (1 if omega > 0 else 0))
        elif criterion.id == "speed_category":
            lo, hi = p["range"]
            labs = []
            for i in window(t, T, w):
                dx, dy = pos[i + 1][0] - pos[i][0], pos[i + 1][1] - pos[i][1]
                labs.append(bin_of(math.sqrt(dx * dx + dy * dy), lo, hi, p["bins"]))
            out.append(majority(labs, criterion.num_labels))
        elif criterion.id == "radius_category":
            vals = [abs(dth[i]) for i in window(t, T, p["straight_window_radius"])]
            straight = p["bins"]
            if sum(vals) / len(vals) < p["straight_threshold"]:
                out.append(straight)
                continue
            pts = [pos[i] for i in window(t, T + 1, w)]
            r = circle_lstsq(pts) if len(pts) >= 3 else None
            out.append(straight if r is None else bin_of(r, *p["range"], p["bins"]))
        elif criterion.id == "curvature_noise":
            d2 = [dth[i + 1] - dth[i] for i in range(T - 1)]
            vals = [d2[i] for i in window(t, T - 1, w)]
            if vals:
                m = sum(vals) / len(vals)
                sigma = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
            else:
                sigma = 0.0
            out.append(bin_of(sigma, *p["range"], p["bins"]))
        else:
            raise ValueError(criterion.id)
    return np.array(out, dtype=np.int64)
