"""Carlini-Wagner, boundary, DeepFool, FGSM and universal perturbation attacks.

Every per-sample attack has a batched implementation (``*_batch``) that
processes several images at once for speed. Samples never interact inside a
batch: models are evaluated in inference mode, optimiser state is
elementwise, and every sample draws from its own random stream.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BIG = 1e10


@dataclass
class AttackResult:
    index: int
    x: np.ndarray
    delta: np.ndarray
    norm: float
    success: bool
    original_label: int
    predicted_label: int
    target: int | None = None
    iterations: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def adversarial(self) -> np.ndarray:
        return self.x + self.delta

    def record(self) -> dict:
        """The line-delimited record (wall time is excluded so reruns compare byte-for-byte)."""
        return {
            "index": int(self.index),
            "original_label": int(self.original_label),
            "predicted_label": int(self.predicted_label),
            "target": None if self.target is None else int(self.target),
            "norm": float(self.norm),
            "success": bool(self.success),
            "iterations": int(self.iterations),
        }


def _result(index, x, adv, model_pred, original, target, iterations, t0, success_fn, extra=None):
    delta = adv - x
    pred = int(model_pred)
    return AttackResult(
        index=int(index), x=x, delta=delta, norm=float(np.linalg.norm(delta)),
        success=bool(success_fn(pred)), original_label=int(original), predicted_label=pred,
        target=None if target is None else int(target), iterations=int(iterations),
        wall_time=time.perf_counter() - t0, extra=extra or {})


def sample_rng(root_seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream, so worker layout never changes results."""
    return np.random.default_rng([int(root_seed), int(index)])


# Carlini-Wagner ---------------------------------------------------------------

@dataclass
class CwConfig:
    kappa: float = 1.0
    binary_steps: int = 9
    initial_c: float = 1e-2
    max_doublings: int = 12
    steps: int = 1000
    lr: float = 5e-3
    abort_early: bool = True

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.steps < 1 or self.binary_steps < 0:
            raise ValueError("steps must be >= 1")


def _to_w(x):
    # start at delta ~ 0 while keeping arctanh finite
    return np.arctanh(np.clip(2.0 * x - 1.0, -1.0, 1.0) * (1.0 - 1e-6))


def _cw_inner(model, x, w0, targets, c, cfg: CwConfig, n_classes: int):
    """Adam on w for fixed c. Returns best successful (norm, adv) per sample and last adv."""
    n = len(x)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), targets] = 1.0
    best_norm = np.full(n, np.inf)
    best_adv = np.zeros_like(x)
    best_margin = np.full(n, -np.inf)
    last_adv = 0.5 * (np.tanh(w0) + 1.0)
    w = w0.copy()
    state = T.AdamState(lr=cfg.lr)
    active = np.arange(n)
    prev_loss = np.full(n, np.inf)
    check_every = max(cfg.steps // 10, 1)
    for step in range(cfg.steps):
        wt = Tensor(w[active], requires_grad=True)
        adv = 0.5 * (T.tanh(wt) + 1.0)
        delta = adv - x[active]
        z = model.forward(adv)
        oh = onehot[active]
        real = T.tsum(z * oh, axis=1)
        other = T.tmax(z - BIG * oh, axis=1)
        hinge = T.maximum(other - real, -cfg.kappa)
        l2 = T.norm(delta, axis=(1, 2))
        per = l2 + c[active] * hinge
        T.tsum(per).backward()

        margin = real.data - other.data
        norms = l2.data
        ok = (margin >= cfg.kappa) & (norms < best_norm[active])
        if ok.any():
            sel = active[ok]
            best_norm[sel] = norms[ok]
            best_adv[sel] = adv.data[ok]
            best_margin[sel] = margin[ok]
        last_adv[active] = adv.data

        sub = {"w": w[active]}
        T.adam_step(sub, {"w": wt.grad}, state)
        w[active] = sub["w"]

        if cfg.abort_early and (step + 1) % check_every == 0:
            # sign-safe: the loss goes negative once the hinge saturates
            prev = prev_loss[active]
            stalled = np.isfinite(prev) & (per.data > prev - 1e-4 * np.abs(np.where(np.isfinite(prev), prev, 0.0)))
            prev_loss[active] = per.data
            if stalled.any():
                keep = ~stalled
                active = active[keep]
                state.m["w"] = state.m["w"][keep]
                state.v["w"] = state.v["w"][keep]
                if len(active) == 0:
                    break
    return best_norm, best_adv, best_margin, last_adv


def cw_attack_batch(model, xs, targets, cfg: CwConfig | None = None, indices=None, labels=None):
    """Targeted L2 Carlini-Wagner attack with tanh box reparametrisation.

    ``c`` doubles from ``initial_c`` until the first success, then is bisected
    ``binary_steps`` times. The smallest-norm success across all ``c`` wins.
    """
    cfg = cfg or CwConfig()
    t0 = time.perf_counter()
    xs = np.asarray(xs, dtype=np.float64)
    targets = np.asarray(targets)
    n = len(xs)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    originals = model.predict(xs) if labels is None else np.asarray(labels)
    n_classes = int(model.logits(xs[:1]).shape[-1])
    w0 = _to_w(xs)
    c = np.full(n, float(cfg.initial_c))
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    bisections = np.zeros(n, dtype=int)
    doublings = np.zeros(n, dtype=int)
    best_norm = np.full(n, np.inf)
    best_adv = np.zeros_like(xs)
    best_margin = np.full(n, -np.inf)
    fallback = 0.5 * (np.tanh(w0) + 1.0)
    rounds = np.zeros(n, dtype=int)
    pending = np.arange(n)
    while len(pending):
        bn, ba, bm, last = _cw_inner(model, xs[pending], w0[pending], targets[pending], c[pending], cfg, n_classes)
        rounds[pending] += 1
        fallback[pending] = last
        done = []
        for k, i in enumerate(pending):
            succeeded = np.isfinite(bn[k])
            if succeeded and bn[k] < best_norm[i]:
                best_norm[i], best_adv[i], best_margin[i] = bn[k], ba[k], bm[k]
            if succeeded:
                hi[i] = min(hi[i], c[i])
            else:
                lo[i] = max(lo[i], c[i])
            if np.isfinite(hi[i]):
                if bisections[i] >= cfg.binary_steps:
                    done.append(i)
                    continue
                bisections[i] += 1
                c[i] = 0.5 * (lo[i] + hi[i])
            else:
                if doublings[i] >= cfg.max_doublings:
                    done.append(i)
                    continue
                doublings[i] += 1
                c[i] *= 2.0
        pending = np.array([i for i in pending if i not in set(done)], dtype=int)

    found = np.isfinite(best_norm)
    advs = np.where(found[:, None, None], best_adv, fallback)
    preds = model.predict(advs)
    out = []
    for i in range(n):
        out.append(_result(indices[i], xs[i], advs[i], preds[i], originals[i], targets[i], rounds[i], t0,
                           lambda p, i=i: found[i] and p == targets[i],
                           {"margin": float(best_margin[i]) if found[i] else None,
                            "c": float(hi[i]) if found[i] else None}))
    return out


def cw_attack(model, x, t, cfg: CwConfig | None = None, index: int = 0, label=None):
    return cw_attack_batch(model, np.asarray(x)[None], [t], cfg, [index],
                           None if label is None else [label])[0]


# boundary attack ---------------------------------------------------------------

@dataclass
class BoundaryConfig:
    gamma: float = 1e-2
    nu: float = 1e-2
    max_steps: int = 5000
    init_cap: int = 1000
    window: int = 30
    grow: float = 1.5
    shrink: float = 0.67
    high_rate: float = 0.5
    low_rate: float = 0.2
    init_search_steps: int = 25
    init_shrink_every: int = 100

    def __post_init__(self):
        if self.gamma <= 0 or self.nu <= 0:
            raise ValueError("gamma and nu must be positive")


def boundary_attack_batch(model, xs, labels, rngs, cfg: BoundaryConfig | None = None, indices=None):
    """Untargeted decision-based attack; only ``model.predict`` is used.

    Steps alternate between a move on the sphere of radius d(x, x_k) of size
    ``gamma * d`` and a move toward x that shrinks the distance by ``nu * d``.
    Candidates are clipped to [0, 1] and accepted only if still misclassified
    and not farther from x.
    """
    cfg = cfg or BoundaryConfig()
    t0 = time.perf_counter()
    xs = np.asarray(xs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(xs)
    shape = xs.shape[1:]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    adv = xs.copy()
    preds0 = model.predict(xs)
    done_trivially = preds0 != labels
    failed = np.zeros(n, dtype=bool)

    need = np.where(~done_trivially)[0]
    tries = np.zeros(n, dtype=int)
    while len(need):
        # U(0, 1) first; if the model keeps calling noise the true class,
        # halve the upper bound every init_shrink_every rejections
        cand = np.stack([rngs[i].uniform(0.0, 0.5 ** (tries[i] // cfg.init_shrink_every), shape)
                         for i in need])
        p = model.predict(cand)
        ok = p != labels[need]
        adv[need[ok]] = cand[ok]
        tries[need] += 1
        rest = need[~ok]
        failed[rest[tries[rest] >= cfg.init_cap]] = True
        need = rest[tries[rest] < cfg.init_cap]

    work = np.where(~done_trivially & ~failed)[0]
    # line search from the noise start toward x
    if len(work) and cfg.init_search_steps > 0:
        lo = np.zeros(len(work))
        hi = np.ones(len(work))
        for _ in range(cfg.init_search_steps):
            mid = 0.5 * (lo + hi)
            blend = (1 - mid)[:, None, None] * adv[work] + mid[:, None, None] * xs[work]
            ok = model.predict(blend) != labels[work]
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        adv[work] = (1 - lo)[:, None, None] * adv[work] + lo[:, None, None] * xs[work]

    gamma = np.full(n, cfg.gamma)
    nu = np.full(n, cfg.nu)
    hist = {"orth": [[] for _ in range(n)], "src": [[] for _ in range(n)]}
    dist = np.linalg.norm((adv - xs).reshape(n, -1), axis=1)
    traces = [[float(dist[i])] for i in range(n)]
    steps_done = np.zeros(n, dtype=int)

    for step in range(cfg.max_steps if len(work) else 0):
        kind = "orth" if step % 2 == 0 else "src"
        cands = np.empty((len(work),) + shape)
        for k, i in enumerate(work):
            diff = adv[i] - xs[i]
            d = dist[i]
            if kind == "orth":
                eta = rngs[i].standard_normal(shape)
                unit = diff / d
                eta -= np.sum(eta * unit) * unit
                eta *= gamma[i] * d / np.linalg.norm(eta)
                moved = diff + eta
                # land a hair inside the sphere so rounding never lengthens it
                cand = xs[i] + moved * (d * (1.0 - 1e-12) / np.linalg.norm(moved))
            else:
                cand = xs[i] + diff * (1.0 - nu[i])
            cands[k] = np.clip(cand, 0.0, 1.0)
        p = model.predict(cands)
        new_d = np.linalg.norm((cands - xs[work]).reshape(len(work), -1), axis=1)
        accept = (p != labels[work]) & (new_d <= dist[work])
        for k, i in enumerate(work):
            h = hist[kind][i]
            h.append(bool(accept[k]))
            if accept[k]:
                adv[i] = cands[k]
                dist[i] = new_d[k]
                traces[i].append(float(new_d[k]))
            if len(h) == cfg.window:
                rate = sum(h) / cfg.window
                param = gamma if kind == "orth" else nu
                if rate > cfg.high_rate:
                    param[i] *= cfg.grow
                elif rate < cfg.low_rate:
                    param[i] *= cfg.shrink
                if kind == "src":
                    nu[i] = min(nu[i], 0.5)
                h.clear()
        steps_done[work] += 1

    preds = model.predict(adv)
    out = []
    for i in range(n):
        ok = not failed[i]
        out.append(_result(indices[i], xs[i], adv[i], preds[i], labels[i], None, steps_done[i], t0,
                           lambda pr, i=i, ok=ok: ok and pr != labels[i],
                           {"distances": traces[i], "init_failed": bool(failed[i]),
                            "gamma": float(gamma[i]), "nu": float(nu[i])}))
    return out


def boundary_attack(model, x, label, rng, cfg: BoundaryConfig | None = None, index: int = 0):
    return boundary_attack_batch(model, np.asarray(x)[None], [label], [rng], cfg, [index])[0]


# DeepFool ----------------------------------------------------------------------

@dataclass
class DeepFoolConfig:
    max_iter: int = 100
    step_cap: float = 0.2
    overshoot: float = 1.02
    # linear steps aim this far past the boundary (logit units) so that the
    # final label does not hinge on last-bit rounding
    min_gap: float = 1e-9

    def __post_init__(self):
        if self.step_cap <= 0:
            raise ValueError("step_cap must be positive")


def deepfool_attack_batch(model, xs, labels, cfg: DeepFoolConfig | None = None, indices=None):
    """Untargeted DeepFool with a per-step L2 cap and multiplicative overshoot."""
    cfg = cfg or DeepFoolConfig()
    t0 = time.perf_counter()
    xs = np.asarray(xs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(xs)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    raw = np.zeros_like(xs)
    adv = xs.copy()
    iters = np.zeros(n, dtype=int)
    flat = np.zeros(n, dtype=bool)
    preds = model.predict(xs)
    active = np.where(preds == labels)[0]
    for _ in range(cfg.max_iter):
        if len(active) == 0:
            break
        z, jac = model.logit_jacobian(adv[active])
        K = z.shape[1]
        keep = []
        for k, i in enumerate(active):
            c = labels[i]
            f = z[k] - z[k, c]
            w = (jac[k] - jac[k, c]).reshape(K, -1)
            # pixels pinned at a box face cannot move further outward
            pos = (xs[i] + raw[i]).reshape(-1)
            blocked = ((pos <= 0.0) & (w < 0)) | ((pos >= 1.0) & (w > 0))
            w = np.where(blocked, 0.0, w)
            wn = np.linalg.norm(w, axis=1)
            cand = [j for j in range(K) if j != c and wn[j] > 0]
            if not cand:
                flat[i] = True
                continue
            l = min(cand, key=lambda j: (cfg.min_gap - f[j]) / wn[j])
            step = (max(cfg.min_gap - f[l], 0.0) / wn[l] ** 2) * w[l].reshape(xs.shape[1:])
            sn = np.linalg.norm(step)
            if sn > cfg.step_cap:
                step *= cfg.step_cap / sn
            raw[i] = np.clip(xs[i] + raw[i] + step, 0.0, 1.0) - xs[i]
            adv[i] = np.clip(xs[i] + cfg.overshoot * raw[i], 0.0, 1.0)
            iters[i] += 1
            keep.append(i)
        keep = np.array(keep, dtype=int)
        if len(keep) == 0:
            break
        zk = model.logits(adv[keep])
        own = zk[np.arange(len(keep)), labels[keep]]
        zk[np.arange(len(keep)), labels[keep]] = -np.inf
        still = zk.max(axis=1) - own < 0.5 * cfg.min_gap
        active = keep[still]
    final = model.predict(adv)
    out = []
    for i in range(n):
        out.append(_result(indices[i], xs[i], adv[i], final[i], labels[i], None, iters[i], t0,
                           lambda p, i=i: p != labels[i],
                           {"pre_overshoot_norm": float(np.linalg.norm(raw[i])), "flat": bool(flat[i])}))
    return out


def deepfool_attack(model, x, label, cfg: DeepFoolConfig | None = None, index: int = 0):
    return deepfool_attack_batch(model, np.asarray(x)[None], [label], cfg, [index])[0]


# FGSM and universal perturbations -----------------------------------------------

def fgsm_step(model, x, labels, eps: float) -> np.ndarray:
    """eps * sign of the input gradient of the model's classification loss."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    lb = np.atleast_1d(labels)
    xt = Tensor(xb, requires_grad=True)
    model.classification_loss(xt, lb).backward()
    delta = eps * np.sign(xt.grad)
    return delta[0] if single else delta


@dataclass
class UniversalConfig:
    threshold: float = 0.5
    eps: float = 0.02
    batch_size: int = 64
    max_iter: int = 500
    eval_every: int = 1

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class UniversalResult:
    delta: np.ndarray
    accuracy: float
    trace: list
    iterations: int
    success: bool

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))


def universal_perturbation(model, images, labels, cfg: UniversalConfig | None, rng) -> UniversalResult:
    """Grow one perturbation from averaged FGSM steps until fold accuracy drops below the threshold."""
    cfg = cfg or UniversalConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty fold")
    delta = np.zeros(images.shape[1:])
    trace = []
    correct = None
    it = 0
    while True:
        if correct is None or it % cfg.eval_every == 0:
            correct = model.predict(np.clip(images + delta, 0, 1)) == labels
            acc = float(correct.mean())
            trace.append(acc)
            if acc < cfg.threshold:
                return UniversalResult(delta, acc, trace, it, True)
        if it >= cfg.max_iter:
            break
        pool = np.where(correct)[0]
        if cfg.eval_every > 1:
            # the pool may be stale: confirm candidates under the current delta
            cand = rng.permutation(pool)[:2 * cfg.batch_size]
            still = model.predict(np.clip(images[cand] + delta, 0, 1)) == labels[cand]
            batch = cand[still][:cfg.batch_size]
        else:
            batch = rng.permutation(pool)[:cfg.batch_size]
        if len(batch) < cfg.batch_size:
            correct = model.predict(np.clip(images + delta, 0, 1)) == labels
            acc = float(correct.mean())
            trace.append(acc)
            return UniversalResult(delta, acc, trace, it, acc < cfg.threshold or len(batch) == 0)
        xb = np.clip(images[batch] + delta, 0, 1)
        delta = delta + fgsm_step(model, xb, labels[batch], cfg.eps).mean(axis=0)
        it += 1
    acc = float((model.predict(np.clip(images + delta, 0, 1)) == labels).mean())
    trace.append(acc)
    return UniversalResult(delta, acc, trace, it, acc < cfg.threshold)


# transferability -----------------------------------------------------------------

def transfer_evaluate(results, target_model) -> float:
    """Fraction of results that also fool ``target_model``.

    Targeted results count when the target label is hit, untargeted ones when
    the prediction differs from the original label.
    """
    if not results:
        return float("nan")
    shapes = {r.x.shape for r in results}
    advs = np.stack([np.clip(r.x + r.delta, 0.0, 1.0) for r in results])
    if len(shapes) != 1:
        raise ValueError(f"mixed image shapes {shapes}")
    preds = target_model.predict(advs)
    fooled = [(p == r.target) if r.target is not None else (p != r.original_label)
              for p, r in zip(preds, results)]
    return float(np.mean(fooled))


def universal_transfer_accuracy(deltas, target_model, images, labels) -> list[float]:
    """Whole-test-set accuracy of ``target_model`` under each universal perturbation."""
    images = np.asarray(images)
    out = []
    for d in deltas:
        if d.shape != images.shape[1:]:
            raise ValueError(f"perturbation shape {d.shape} does not match images {images.shape[1:]}")
        out.append(target_model.accuracy(np.clip(images + d, 0, 1), labels))
    return out


# record files --------------------------------------------------------------------

DELTA_MAGIC = b"CFDELTA1"


def write_records(results, path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_deltas(indices, arrays, path) -> None:
    """Sidecar: magic, u32 count, u8 ndim, u32 dims, then per entry i64 index + f64 data (little endian)."""
    arrays = [np.asarray(a, dtype="<f8") for a in arrays]
    shape = arrays[0].shape if arrays else ()
    with open(path, "wb") as fh:
        fh.write(DELTA_MAGIC)
        fh.write(struct.pack("<IB", len(arrays), len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for idx, a in zip(indices, arrays):
            if a.shape != shape:
                raise ValueError(f"delta shape {a.shape} differs from {shape}")
            fh.write(struct.pack("<q", int(idx)))
            fh.write(np.ascontiguousarray(a).tobytes())


def read_deltas(path):
    buf = open(path, "rb").read()
    if buf[:8] != DELTA_MAGIC:
        raise ValueError(f"{path}: bad delta sidecar magic")
    count, ndim = struct.unpack_from("<IB", buf, 8)
    pos = 13
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    size = int(np.prod(shape))
    indices, arrays = [], []
    for _ in range(count):
        if pos + 8 + 8 * size > len(buf):
            raise ValueError(f"{path}: truncated at byte {pos}")
        (idx,) = struct.unpack_from("<q", buf, pos)
        pos += 8
        arrays.append(np.frombuffer(buf, "<f8", size, pos).reshape(shape).astype(np.float64))
        pos += 8 * size
        indices.append(idx)
    return indices, arrays


def results_from_files(records, deltas, images) -> list[AttackResult]:
    """Rebuild AttackResults from a record file and its sidecar for transfer runs."""
    idx_to_delta = dict(zip(*deltas))
    out = []
    for rec in records:
        i = rec["index"]
        x = np.asarray(images[i], dtype=np.float64)
        d = idx_to_delta[i]
        out.append(AttackResult(i, x, d, rec["norm"], rec["success"], rec["original_label"],
                                rec["predicted_label"], rec["target"], rec["iterations"]))
    return out
