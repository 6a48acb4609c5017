"""Experiment orchestration: norm tables, transfer, universal folds, t-SNE and reports.

Results are independent of the worker count because work is cut into
fixed-size chunks and every sample owns its random stream.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import pickle
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np

from . import attacks as A
from . import datasets as D
from . import models as M

log = logging.getLogger(__name__)

ATTACKS = ("cw", "deepfool", "boundary")
MODEL_KINDS = ("convnet", "capsnet")


def to_plain(obj):
    """JSON-safe copy: dataclasses -> dicts, numpy scalars -> python, NaN -> None."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(to_plain(obj), sort_keys=True, indent=1) + "\n")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(to_plain(obj), sort_keys=True).encode()).hexdigest()[:16]


# worker pool ---------------------------------------------------------------------

def parallel_map(fn, jobs, workers: int = 1):
    """Ordered map over ``jobs``; a process pool when ``workers > 1``."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _attack_chunk(job):
    model, name, xs, labels, targets, indices, cfg, seed = job
    if name == "cw":
        return A.cw_attack_batch(model, xs, targets, cfg, indices, labels)
    if name == "deepfool":
        return A.deepfool_attack_batch(model, xs, labels, cfg, indices)
    if name == "boundary":
        rngs = [A.sample_rng(seed, i) for i in indices]
        return A.boundary_attack_batch(model, xs, labels, rngs, cfg, indices)
    raise ValueError(f"unknown attack {name!r}")


def run_attack(model, name, images, labels, indices, targets=None, cfg=None, seed: int = 0,
               workers: int = 1, chunk_size: int = 10) -> list[A.AttackResult]:
    """Attack ``images`` (already selected) in fixed chunks; returns results in input order."""
    model.require_trained()
    if name == "cw" and targets is None:
        raise ValueError("cw is targeted and needs target labels")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    indices = np.asarray(indices)
    jobs = []
    for s in range(0, len(images), chunk_size):
        sl = slice(s, s + chunk_size)
        jobs.append((model, name, images[sl], labels[sl], None if targets is None else np.asarray(targets)[sl],
                     indices[sl], cfg, seed))
    out = []
    for chunk in parallel_map(_attack_chunk, jobs, workers):
        out.extend(chunk)
    return out


def summarize(results) -> dict:
    """Mean norm over successful, non-trivial samples (trivial = already misclassified, delta 0)."""
    n = len(results)
    succ = [r for r in results if r.success]
    real = [r for r in succ if r.norm > 0]
    return {
        "count": n,
        "successes": len(succ),
        "success_rate": len(succ) / n if n else None,
        "trivial": len(succ) - len(real),
        "mean_norm": float(np.mean([r.norm for r in real])) if real else None,
        "norm_count": len(real),
    }


# norm experiment -------------------------------------------------------------------

@dataclass
class NormExperimentConfig:
    iterative_count: int = 100
    cw_count: int = 50
    attacks: tuple = ATTACKS
    cw: A.CwConfig = field(default_factory=A.CwConfig)
    deepfool: A.DeepFoolConfig = field(default_factory=A.DeepFoolConfig)
    boundary: A.BoundaryConfig = field(default_factory=A.BoundaryConfig)


def attack_samples(test: D.LabeledDataset, cfg: NormExperimentConfig, seed: int):
    """Indices for the iterative attacks, their random targets, and the CW subset (positions into them)."""
    idx, targets = D.sample_attack_set(test, cfg.iterative_count, seed)
    pick = np.random.default_rng([seed, 1]).choice(len(idx), size=min(cfg.cw_count, len(idx)), replace=False)
    return idx, targets, np.sort(pick)


def run_norm_experiment(models: dict, test: D.LabeledDataset, cfg: NormExperimentConfig, seed: int,
                        workers: int = 1, chunk_size: int = 10):
    """Run every configured attack on every model. Returns (section, results[attack][model])."""
    for m in models.values():
        m.require_trained()
    idx, targets, cw_pos = attack_samples(test, cfg, seed)
    section, results, timing = {}, {}, {}
    for name in cfg.attacks:
        section[name], results[name], timing[name] = {}, {}, {}
        sel = idx[cw_pos] if name == "cw" else idx
        tg = targets[cw_pos] if name == "cw" else None
        acfg = getattr(cfg, name)
        for kind, model in models.items():
            t0 = time.perf_counter()
            res = run_attack(model, name, test.images[sel], test.labels[sel], sel, tg, acfg, seed,
                             workers, chunk_size)
            timing[name][kind] = time.perf_counter() - t0
            log.info("%s on %s: %d samples in %.1fs", name, kind, len(res), timing[name][kind])
            results[name][kind] = res
            row = summarize(res)
            row["seed"] = seed
            section[name][kind] = row
    return section, results, timing


# transfer -----------------------------------------------------------------------

def run_transfer_experiment(results: dict, models: dict) -> dict:
    """Fooling rates of successful per-sample results moved to the other model."""
    out = {}
    for name, by_model in results.items():
        out[name] = {}
        for src, res in by_model.items():
            ok = [r for r in res if r.success]
            for dst, model in models.items():
                rate = A.transfer_evaluate(ok, model) if ok else None
                out[name][f"{src}->{dst}"] = {"fooling_rate": rate, "count": len(ok)}
    return out


def universal_transfer(deltas: dict, models: dict, test: D.LabeledDataset) -> dict:
    """Whole-test-set accuracy of every model under every model's fold perturbations."""
    out = {}
    for src, ds in deltas.items():
        for dst, model in models.items():
            accs = A.universal_transfer_accuracy(ds, model, test.images, test.labels)
            out[f"{src}->{dst}"] = {"test_accuracy": accs, "mean_test_accuracy": float(np.mean(accs)),
                                    "fooling_rate": 1.0 - float(np.mean(accs))}
    return out


# universal perturbations --------------------------------------------------------------

def _universal_job(job):
    model, images, labels, cfg, seed, model_id, fold = job
    rng = np.random.default_rng([seed, 7, model_id, fold])
    return A.universal_perturbation(model, images, labels, cfg, rng)


def run_universal_experiment(models: dict, test: D.LabeledDataset, cfg: A.UniversalConfig, seed: int,
                             workers: int = 1):
    """One perturbation per (model, fold). Returns (section, deltas[model] list)."""
    folds = D.ten_fold_split(test)
    section, deltas = {}, {}
    for kind, model in models.items():
        model.require_trained()
        model_id = zlib.crc32(kind.encode())
        jobs = [(model, test.images[f], test.labels[f], cfg, seed, model_id, k) for k, f in enumerate(folds)]
        res = parallel_map(_universal_job, jobs, workers)
        deltas[kind] = [r.delta for r in res]
        section[kind] = {
            "fold_accuracy": [r.accuracy for r in res],
            "success": [r.success for r in res],
            "iterations": [r.iterations for r in res],
            "norms": [r.norm for r in res],
            "mean_norm": float(np.mean([r.norm for r in res])),
            "seed": seed,
        }
    return section, deltas


# t-SNE -----------------------------------------------------------------------------

@dataclass
class TsneConfig:
    perplexity: float = 5.0
    iterations: int = 1000
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    learning_rate: float = 50.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    tol: float = 1e-5


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    labels: list
    kl: float
    trace: list
    perplexities: np.ndarray
    exaggeration_iters: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point", "x", "y", "source_model", "fold"])
            for i, ((x, y), (src, fold)) in enumerate(zip(self.coords, self.labels)):
                w.writerow([i, repr(float(x)), repr(float(y)), src, fold])


def _row_entropy(d, beta):
    """Shannon entropy (nats) and probabilities of exp(-beta * d), d already shifted to min 0."""
    p = np.exp(-beta * d)
    s = p.sum()
    p /= s
    h = np.log(s) + beta * np.sum(d * p)
    return h, p


def conditional_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-stochastic P_{j|i} with each row's bandwidth bisected to the target perplexity."""
    n = len(d2)
    P = np.zeros((n, n))
    achieved = np.zeros(n)
    target = np.log(perplexity)
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0 / max(np.mean(d), 1e-300), 0.0, np.inf
        for _ in range(max_iter):
            h, p = _row_entropy(d, beta)
            if abs(np.exp(h) - perplexity) < tol:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        achieved[i] = np.exp(h)
        P[i, np.arange(n) != i] = p
    return P, achieved


def _kl(P, Y):
    d2 = np.sum((Y[:, None] - Y[None]) ** 2, axis=-1)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask]))), num, Q


def tsne_embed(points, cfg: TsneConfig | None = None, seed: int = 0, labels=None) -> EmbeddingResult:
    """Exact t-SNE to 2-D with momentum, gains and early exaggeration.

    After the exaggeration phase a step that would raise the KL divergence
    is rejected and the step size halved, so the recorded trace never rises.
    """
    cfg = cfg or TsneConfig()
    X = np.asarray([np.ravel(p) for p in points], dtype=np.float64)
    n = len(X)
    if n < 3:
        raise ValueError("t-SNE needs at least 3 points")
    if not cfg.perplexity < (n - 1) / 3:
        raise ValueError(f"perplexity {cfg.perplexity} must be < (n-1)/3 = {(n - 1) / 3:.3f}")
    rng = np.random.default_rng(seed)
    d2 = np.sum((X[:, None] - X[None]) ** 2, axis=-1)
    off = d2[~np.eye(n, dtype=bool)]
    if np.any(off == 0):
        scale = np.sqrt(off.max()) if off.max() > 0 else 1.0
        warnings.warn("duplicate points in t-SNE input; adding seeded jitter", RuntimeWarning)
        X = X + rng.normal(0.0, 1e-4 * scale, X.shape)
        d2 = np.sum((X[:, None] - X[None]) ** 2, axis=-1)
    Pc, achieved = conditional_affinities(d2, cfg.perplexity, cfg.tol)
    P = (Pc + Pc.T) / (2 * n)
    P = np.maximum(P, 1e-300)
    np.fill_diagonal(P, 0.0)

    Y = rng.normal(0.0, 1e-4, (n, 2))
    vel = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []
    kl, num, Q = _kl(P, Y)
    scale = 1.0
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(1)) - W) @ Y
        g = gains.copy()
        g = np.where(np.sign(grad) != np.sign(vel), g + 0.2, g * 0.8)
        g = np.maximum(g, 0.01)
        new_vel = mom * vel - scale * cfg.learning_rate * g * grad
        cand = Y + new_vel
        cand = cand - cand.mean(0)
        new_kl, new_num, new_Q = _kl(P, cand)
        if it >= cfg.exaggeration_iters and new_kl > kl:
            scale *= 0.5
            vel[:] = 0.0
        else:
            Y, vel, gains = cand, new_vel, g
            kl, num, Q = new_kl, new_num, new_Q
            if it >= cfg.exaggeration_iters:
                scale = min(1.0, scale * 1.1)
        trace.append(kl)
    labels = list(labels) if labels is not None else [("", i) for i in range(n)]
    return EmbeddingResult(Y, labels, kl, trace, achieved, cfg.exaggeration_iters)


def cluster_separation(coords, groups) -> dict:
    """Mean embedded distance within and between groups (reported, never asserted)."""
    coords = np.asarray(coords)
    groups = np.asarray(groups)
    d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    same = groups[:, None] == groups[None]
    off = ~np.eye(len(coords), dtype=bool)
    intra = float(d[same & off].mean())
    inter = float(d[~same].mean()) if (~same).any() else float("nan")
    return {"intra": intra, "inter": inter, "ratio": inter / intra if intra > 0 else None}


# images -------------------------------------------------------------------------------

def quantize(img) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up (0.5 -> 128)."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img) -> None:
    q = quantize(img)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def export_images(result: A.AttackResult, directory, stem: str | None = None) -> list[Path]:
    """Original, adversarial and min-max rescaled perturbation as PGM files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"output directory {directory} does not exist")
    stem = stem or f"sample{result.index:05d}"
    adv = np.clip(result.x + result.delta, 0.0, 1.0)
    d = result.delta
    span = d.max() - d.min()
    vis = (d - d.min()) / span if span > 0 else np.full(d.shape, 0.5)
    paths = [directory / f"{stem}_original.pgm", directory / f"{stem}_adversarial.pgm",
             directory / f"{stem}_perturbation.pgm"]
    for p, img in zip(paths, (result.x, adv, vis)):
        write_pgm(p, img)
    return paths


# report -------------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    """Everything behind the norm, fooling-rate and accuracy tables. Wall-times live in ``timing``
    and are written to a separate file so reports compare byte-for-byte across reruns."""
    config: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    universal: dict = field(default_factory=dict)
    universal_transfer: dict = field(default_factory=dict)
    embedding: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = to_plain(self)
        d.pop("timing")
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=1) + "\n"

    def table(self) -> str:
        kinds = sorted({k for row in self.norms.values() for k in row} | set(self.universal))
        lines = ["Average perturbation norms (successful samples)", "attack      " +
                 "".join(f"{k:>22}" for k in kinds)]

        def cell(row):
            if row is None or row.get("mean_norm") is None:
                return f"{'skipped':>22}"
            return f"{row['mean_norm']:>8.3f} ({row['successes']}/{row['count']})".rjust(22)

        for name, row in self.norms.items():
            lines.append(f"{name:<12}" + "".join(cell(row.get(k)) for k in kinds))
        if self.universal:
            lines.append(f"{'universal':<12}" + "".join(
                f"{self.universal[k]['mean_norm']:>22.3f}" if k in self.universal else f"{'skipped':>22}"
                for k in kinds))
        if self.transfer or self.universal_transfer:
            lines += ["", "Fooling rates (universal: 1 - whole-test-set accuracy)"]
            for name, row in self.transfer.items():
                for direction, v in sorted(row.items()):
                    r = v["fooling_rate"]
                    lines.append(f"{name:<12}{direction:<22}" + ("skipped" if r is None else f"{r:.3f} (n={v['count']})"))
            for direction, v in sorted(self.universal_transfer.items()):
                lines.append(f"{'universal':<12}{direction:<22}{v['fooling_rate']:.3f} "
                             f"(test accuracy {v['mean_test_accuracy']:.4f})")
        if self.accuracy:
            lines += ["", "Test accuracy"]
            lines += [f"{k:<12}{v:.4f}" for k, v in sorted(self.accuracy.items())]
        if self.embedding:
            lines += ["", f"t-SNE final KL {self.embedding['kl']:.5f}, separation {self.embedding['separation']}"]
        return "\n".join(lines) + "\n"

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json())
        (directory / "report.txt").write_text(self.table())
        dump_json(self.timing, directory / "timing.json")


# full desk-scale pipeline ---------------------------------------------------------------

@dataclass
class PipelineConfig:
    dataset: str = "mnist"
    preset: str = "desk"
    seed: int = 0
    train_images: int = 10000
    models: tuple = MODEL_KINDS
    train: M.TrainConfig = field(default_factory=M.TrainConfig)
    norm: NormExperimentConfig = field(default_factory=NormExperimentConfig)
    universal: A.UniversalConfig = field(default_factory=A.UniversalConfig)
    tsne: TsneConfig = field(default_factory=TsneConfig)
    export_count: int = 3
    workers: int = 1
    chunk_size: int = 10


class _StageCache:
    """Pickled stage outputs keyed by the stage's config, so an interrupted run can resume."""

    def __init__(self, directory, enabled: bool):
        self.dir = Path(directory) / "cache"
        self.enabled = enabled

    def get(self, stage, key, compute):
        path = self.dir / f"{stage}-{config_hash(key)}.pkl"
        if self.enabled and path.exists():
            log.info("stage %s: reusing %s", stage, path.name)
            with open(path, "rb") as fh:
                return pickle.load(fh)
        value = compute()
        if self.enabled:
            self.dir.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as fh:
                pickle.dump(value, fh)
        return value


def run_pipeline(cfg: PipelineConfig, out_dir, data_root=None, resume: bool = False):
    """Train both models, attack, transfer, build universal perturbations, embed them, and report.

    Returns (report, artifacts) where artifacts holds models, attack results,
    universal deltas and the embedding for further inspection.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg, out / "config.json")
    cache = _StageCache(out, resume)
    train_set = D.load_dataset(cfg.dataset, "train", data_root).head(cfg.train_images)
    test = D.load_dataset(cfg.dataset, "test", data_root)
    report = ExperimentReport(config=to_plain(cfg))

    models, histories = {}, {}
    for kind in cfg.models:
        def fit(kind=kind):
            m = M.build_model(kind, cfg.dataset, cfg.preset, seed=cfg.seed)
            t0 = time.perf_counter()
            h = M.train(m, train_set, cfg.train, test_set=None)
            return m, h, time.perf_counter() - t0
        m, h, secs = cache.get(f"train-{kind}", [cfg.dataset, cfg.preset, cfg.seed, cfg.train_images, cfg.train, kind], fit)
        M.save_checkpoint(m, out / f"{kind}.bin")
        models[kind], histories[kind] = m, h
        report.timing[f"train/{kind}"] = secs
        report.accuracy[kind] = m.accuracy(test.images, test.labels)
    report.training = {k: {"train_loss": h.train_loss, "train_accuracy": h.train_accuracy}
                       for k, h in histories.items()}

    norm_key = [cfg.seed, cfg.norm, cfg.chunk_size, report.accuracy]
    section, results, timing = cache.get("norms", norm_key, lambda: run_norm_experiment(
        models, test, cfg.norm, cfg.seed, cfg.workers, cfg.chunk_size))
    report.norms = section
    report.timing.update({f"{a}/{k}": t for a, row in timing.items() for k, t in row.items()})
    attack_dir = out / "attacks"
    attack_dir.mkdir(exist_ok=True)
    for name, by_model in results.items():
        for kind, res in by_model.items():
            A.write_records(res, attack_dir / f"{name}-{kind}.jsonl")
            A.write_deltas([r.index for r in res], [r.delta for r in res], attack_dir / f"{name}-{kind}.delta")
            if name == "boundary":
                dump_json({r.index: r.extra["distances"] for r in res}, attack_dir / f"{name}-{kind}-distances.json")
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    for name, by_model in results.items():
        for kind, res in by_model.items():
            for r in [r for r in res if r.success][:cfg.export_count]:
                export_images(r, img_dir, f"{name}-{kind}-{r.index:05d}")

    report.transfer = run_transfer_experiment(results, models)

    t0 = time.perf_counter()
    usec, deltas = cache.get("universal", [cfg.seed, cfg.universal, report.accuracy],
                             lambda: run_universal_experiment(models, test, cfg.universal, cfg.seed, cfg.workers))
    report.timing["universal"] = time.perf_counter() - t0
    report.universal = usec
    for kind, ds in deltas.items():
        A.write_deltas(range(len(ds)), ds, out / f"universal-{kind}.delta")
    report.universal_transfer = universal_transfer(deltas, models, test)

    points = [d for kind in deltas for d in deltas[kind]]
    labels = [(kind, k) for kind in deltas for k in range(len(deltas[kind]))]
    emb = tsne_embed(points, cfg.tsne, cfg.seed, labels)
    emb.write_csv(out / "embedding.csv")
    report.embedding = {
        "kl": emb.kl,
        "trace": emb.trace,
        "perplexity_error": float(np.max(np.abs(emb.perplexities - cfg.tsne.perplexity))),
        "separation": cluster_separation(emb.coords, [lab[0] for lab in labels]),
    }
    report.save(out)
    artifacts = {"models": models, "histories": histories, "results": results, "deltas": deltas,
                 "embedding": emb, "test": test}
    return report, artifacts


def desk_pipeline_config(seed: int = 0, workers: int = 1) -> PipelineConfig:
    """The desk-scale protocol: 10k training images, 100/50 attack samples, single-core budgets.

    CW runs 300 Adam steps per constant at lr 5e-2 with 5 bisection rounds from
    c = 1, and fold accuracy is re-checked every 5 universal updates; both
    keep the whole pipeline within a couple of CPU hours.
    """
    return PipelineConfig(
        seed=seed,
        workers=workers,
        norm=NormExperimentConfig(
            cw=A.CwConfig(kappa=1.0, steps=300, lr=5e-2, binary_steps=5, initial_c=1.0),
            boundary=A.BoundaryConfig(max_steps=5000),
        ),
        universal=A.UniversalConfig(eval_every=5),
    )
