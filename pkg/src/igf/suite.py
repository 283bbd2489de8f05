"""Named experiments, their report directories and the verifier.

A workspace directory (``--out``) holds the shared artifacts::

    tokenizer.json  base.ckpt  ig_dataset.jsonl  learner.igfl  config.json
    reports/<experiment>/{report.json, config.json, *.csv}

Every number in a ``report.json`` summary is produced by a summarizer that
reads only the CSV files and ``config.json`` of the same directory, so
``verify`` can recompute it exactly and detect tampering.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections.abc import Callable
from dataclasses import replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import synthetic
from .config import ExperimentConfig, build_config
from .corpus import (
    Context,
    ContextSampler,
    Corpus,
    PoolSampler,
    build_mixed_corpus,
    sample_contexts,
    split_objective_set,
)
from .errors import IGFError, InvalidConfigError, MissingArtifactError
from .experiments import (
    PoolSetup,
    SeedPool,
    batches_to_match,
    best_of_k,
    corpus_separation_report,
    early_savings,
    run_seed_pool,
    select_tracked_sets,
    tracked_context_eval,
    unigram_ablation,
)
from .filtration import RunRecord, iigf_finetune, standard_finetune
from .infogain import IGDataset, build_ig_dataset, normalize_ig, split_dataset
from .learner import SecondaryLearner, lm_embeddings, train_learner
from .model import ParameterSnapshot, TinyCausalLM, load_checkpoint, pretrain, save_checkpoint, snapshot
from .stats import auc, correlation_test, permutation_test, sign_flip_test
from .tokenizer import Tokenizer, train_tokenizer

logger = logging.getLogger(__name__)

TOKENIZER_FILE = "tokenizer.json"
BASE_FILE = "base.ckpt"
IG_FILE = "ig_dataset.jsonl"
LEARNER_FILE = "learner.igfl"
REPORTS_DIR = "reports"
# the early/final correlation the reference study reports at full scale
REFERENCE_EARLY_FINAL_R = 0.28


class Workspace:
    """Lazily builds (or, with ``strict=True``, only loads) the shared artifacts."""

    def __init__(self, cfg: ExperimentConfig, root, strict: bool = False):
        self.cfg = cfg
        self.root = Path(root)
        self.strict = strict
        self.root.mkdir(parents=True, exist_ok=True)
        self._pools: dict[str, SeedPool] = {}
        self._check_stamp()

    # -- bookkeeping -------------------------------------------------------

    def _stamp_doc(self) -> dict:
        doc = self.cfg.to_document()
        for volatile in ("experiments", "max_parallel_runs", "finetune", "schedules"):
            doc.pop(volatile, None)
        doc["ig"].pop("n_workers", None)
        return doc

    def _check_stamp(self) -> None:
        path = self.root / "config.json"
        if path.exists():
            old = json.loads(path.read_text())
            old_doc = build_config(old).to_document() if "corpora" in old else {}
            for volatile in ("experiments", "max_parallel_runs", "finetune", "schedules"):
                old_doc.pop(volatile, None)
            if old_doc.get("ig"):
                old_doc["ig"].pop("n_workers", None)
            if old_doc and old_doc != self._stamp_doc():
                raise InvalidConfigError(
                    f"{self.root} holds artifacts built from a different configuration; use a fresh --out",
                    field_path="--out",
                )
        path.write_text(json.dumps(self.cfg.to_document(), indent=1, sort_keys=True) + "\n")

    def _need(self, name: str) -> Path:
        path = self.root / name
        if self.strict and not path.exists():
            raise MissingArtifactError(f"missing artifact {path} (run the step that produces {name} first)", name)
        return path

    # -- corpora -----------------------------------------------------------

    def raw_text(self, which: str) -> bytes:
        spec = getattr(self.cfg.corpora, which)
        if spec.synthetic is not None:
            s = spec.synthetic
            return synthetic.generate(s.grammar, s.n_bytes, s.seed).encode("utf-8")
        path = self.cfg.resolve_path(spec.path)
        if not path.exists():
            raise MissingArtifactError(f"corpus file {path} does not exist", str(path))
        return path.read_bytes()

    @cached_property
    def tokenizer(self) -> Tokenizer:
        path = self._need(TOKENIZER_FILE)
        if path.exists():
            return Tokenizer.load(path)
        tok = train_tokenizer(self.raw_text("general"), self.cfg.tokenizer.vocab_size)
        tok.save(path)
        return tok

    def corpus(self, which: str) -> Corpus:
        spec = getattr(self.cfg.corpora, which)
        return Corpus(self.tokenizer.encode(self.raw_text(which)), spec.label, which, self.tokenizer.vocab_size)

    @cached_property
    def splits(self) -> dict[str, Corpus]:
        keep = 1.0 - self.cfg.data.heldout_fraction
        a_train, a_held = self.corpus("a").split(keep)
        b_train, b_held = self.corpus("b").split(keep)
        return {"a_train": a_train, "a_heldout": a_held, "b_train": b_train, "b_heldout": b_held}

    @cached_property
    def _eval_sets(self) -> tuple[list[Context], list[Context]]:
        d = self.cfg.data
        L = self.cfg.model.context_length
        want = d.objective_size + d.test_size
        candidates = sample_contexts(self.splits["a_heldout"], 4 * want, L, rng_seed=[self.cfg.seed, 1])
        objective, rest = split_objective_set(candidates, d.objective_size, rng_seed=[self.cfg.seed, 2])
        test = list({c.key: c for c in rest}.values())[: d.test_size]
        if len(test) < d.test_size:
            raise InvalidConfigError("held-out part of corpus A is too small for the test set",
                                     field_path="data.test_size")
        return objective, test

    @property
    def objective(self) -> list[Context]:
        return self._eval_sets[0]

    @property
    def test_set(self) -> list[Context]:
        return self._eval_sets[1]

    @cached_property
    def pool(self) -> list[Context]:
        """The mixed fine-tuning set F."""
        d = self.cfg.data
        return build_mixed_corpus(self.splits["a_train"], self.splits["b_train"], d.mix_fraction_a, d.pool_size,
                                  self.cfg.model.context_length, rng_seed=[self.cfg.seed, 3])

    @property
    def stream(self) -> PoolSampler:
        return PoolSampler(self.pool)

    @property
    def books_stream(self) -> ContextSampler:
        return ContextSampler([self.splits["a_train"]], context_length=self.cfg.model.context_length)

    # -- models and datasets ----------------------------------------------

    @cached_property
    def base(self) -> ParameterSnapshot:
        path = self._need(BASE_FILE)
        if path.exists():
            return load_checkpoint(path)
        p = self.cfg.pretrain
        mcfg = self.cfg.model_config_for(self.tokenizer.vocab_size)
        opt = replace(self.cfg.optimizer_config, learning_rate=p.learning_rate)
        params = pretrain(mcfg, self.corpus("general"), p.steps, opt, rng_seed=self.cfg.seed,
                          batch_size=p.batch_size)
        snap = snapshot(TinyCausalLM(mcfg, params))
        save_checkpoint(snap, path)
        return snap

    @cached_property
    def ig_dataset(self) -> IGDataset:
        """The normalized IG dataset over the mixed pool."""
        path = self._need(IG_FILE)
        if path.exists():
            return IGDataset.load(path)
        g = self.cfg.ig
        raw = build_ig_dataset(self.base, self.pool, self.objective, g.dataset_size, self.cfg.optimizer_config,
                               rng_seed=[self.cfg.seed, 4], n_workers=g.n_workers)
        d = normalize_ig(raw)
        d.save(path)
        return d

    @cached_property
    def ig_split(self) -> tuple[IGDataset, IGDataset]:
        return split_dataset(self.ig_dataset, self.cfg.ig.heldout_size, rng_seed=[self.cfg.seed, 5])

    @cached_property
    def embeddings(self) -> np.ndarray:
        return lm_embeddings(self.base)

    def train_learner(self, kind: str | None = None, kernel_width: int | None = None) -> SecondaryLearner:
        return train_learner(self.cfg.learner_config(kind, kernel_width), self.ig_split[0], self.cfg.seed,
                             self.embeddings, self.tokenizer.vocab_size)

    @cached_property
    def learner(self) -> SecondaryLearner:
        path = self._need(LEARNER_FILE)
        if path.exists():
            return SecondaryLearner.load(path)
        learner = self.train_learner()
        learner.save(path)
        return learner

    # -- seed pools ----------------------------------------------------------

    def seed_pool(self, name: str) -> SeedPool:
        if name in self._pools:
            return self._pools[name]
        cfg = self.cfg
        common = dict(base=self.base, test_set=tuple(self.test_set), finetune=cfg.finetune_config())
        if name == "standard":
            setup = PoolSetup("standard", stream=self.stream, **common)
        elif name == "standard_books":
            setup = PoolSetup("standard", stream=self.books_stream, **common)
        elif name == "igf_shifting":
            setup = PoolSetup("igf", stream=self.stream, learner=self.learner, schedule=cfg.shifting_schedule,
                              **common)
        elif name == "igf_constant":
            setup = PoolSetup("igf", stream=self.stream, learner=self.learner, schedule=cfg.constant_schedule,
                              **common)
        elif name.startswith("igf_shifting_k"):
            width = int(name.removeprefix("igf_shifting_k"))
            if width == cfg.learner.kernel_width:
                self._pools[name] = self.seed_pool("igf_shifting")
                return self._pools[name]
            setup = PoolSetup("igf", stream=self.stream, learner=self.train_learner(kernel_width=width),
                              schedule=cfg.shifting_schedule, **common)
        else:
            raise InvalidConfigError(f"unknown seed pool {name!r}")
        logger.info("running seed pool %s (%d seeds)", name, cfg.experiments.n_seeds)
        pool = run_seed_pool(setup, cfg.experiments.n_seeds, base_seed=cfg.seed * 1000,
                             max_parallel=cfg.max_parallel_runs)
        self._pools[name] = pool
        return pool


# -- CSV helpers --------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(s: str) -> float | None:
    return None if s == "" else float(s)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_clean(x):
    """Make a summary JSON-safe and canonical (NaN/inf become strings)."""
    if isinstance(x, dict):
        return {str(k): _json_clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


# -- pool tables ----------------------------------------------------------------


def _pool_rows(name: str, pool: SeedPool):
    finals, traj, failed = [], [], []
    for r in pool.records:
        early = r.perplexity_at(1) if any(b == 1 for b, _ in r.perplexity_trajectory) else None
        finals.append([name, r.seed, early, r.final_perplexity, r.candidates_seen, r.candidates_accepted,
                       len(r.starvation_batches)])
        steps = {b: (t, a, s) for b, t, a, s in r.batch_log}
        for b, p in r.perplexity_trajectory:
            t, a, s = steps.get(b, (None, 0, 0))
            traj.append([name, r.seed, b, p, t, a, s])
    for seed in pool.failed_seeds:
        failed.append([name, seed])
    return finals, traj, failed


FINALS_HEADER = ["pool", "seed", "early_perplexity", "final_perplexity", "candidates_seen", "candidates_accepted",
                 "starvation_events"]
TRAJ_HEADER = ["pool", "seed", "batch", "perplexity", "threshold", "accepted", "seen"]


def _write_pools(out: Path, pools: dict[str, SeedPool]) -> None:
    finals, traj, failed = [], [], []
    for name, pool in pools.items():
        f, t, x = _pool_rows(name, pool)
        finals += f
        traj += t
        failed += x
    write_csv(out / "finals.csv", FINALS_HEADER, finals)
    write_csv(out / "trajectories.csv", TRAJ_HEADER, traj)
    write_csv(out / "failures.csv", ["pool", "seed"], failed)


def _finals_by_pool(out: Path) -> dict[str, dict[str, np.ndarray]]:
    by: dict[str, dict[str, list]] = {}
    for row in read_csv(out / "finals.csv"):
        d = by.setdefault(row["pool"], {"early": [], "final": [], "seen": [], "accepted": [], "starved": []})
        d["early"].append(_f(row["early_perplexity"]))
        d["final"].append(float(row["final_perplexity"]))
        d["seen"].append(int(row["candidates_seen"]))
        d["accepted"].append(int(row["candidates_accepted"]))
        d["starved"].append(int(row["starvation_events"]))
    return {k: {kk: np.array(vv, dtype=float) for kk, vv in v.items()} for k, v in by.items()}


def _failures(out: Path) -> dict[str, int]:
    counts: dict[str, int] = {}
    for row in read_csv(out / "failures.csv"):
        counts[row["pool"]] = counts.get(row["pool"], 0) + 1
    return counts


def _pool_summary(finals: dict[str, np.ndarray]) -> dict:
    return {
        "n_runs": int(finals["final"].size),
        "median_final": float(np.median(finals["final"])),
        "mean_final": float(np.mean(finals["final"])),
        "std_final": float(np.std(finals["final"], ddof=1)) if finals["final"].size > 1 else 0.0,
        "acceptance_rate": float(finals["accepted"].sum() / finals["seen"].sum()),
        "starvation_events": int(finals["starved"].sum()),
    }


# -- experiments ----------------------------------------------------------------


def run_headline(ws: Workspace, out: Path) -> None:
    _write_pools(out, {n: ws.seed_pool(n) for n in ("standard", "igf_shifting", "igf_constant")})


def summarize_headline(out: Path, cfg: ExperimentConfig) -> dict:
    f = _finals_by_pool(out)
    n_perm = cfg.experiments.n_perm
    med = {k: float(np.median(v["final"])) for k, v in f.items()}
    p_shift = permutation_test(f["standard"]["final"], f["igf_shifting"]["final"], "median_diff", n_perm,
                               cfg.seed, "greater")
    p_const = permutation_test(f["standard"]["final"], f["igf_constant"]["final"], "median_diff", n_perm,
                               cfg.seed, "greater")
    return {
        "pools": {k: _pool_summary(v) for k, v in f.items()},
        "failed_runs": _failures(out),
        "p_shifting_below_standard": p_shift,
        "p_constant_below_standard": p_const,
        "ordering_shifting_lt_constant_lt_standard": med["igf_shifting"] < med["igf_constant"] < med["standard"],
    }


def run_early_final(ws: Workspace, out: Path) -> None:
    _write_pools(out, {n: ws.seed_pool(n) for n in ("standard", "standard_books")})


def summarize_early_final(out: Path, cfg: ExperimentConfig) -> dict:
    f = _finals_by_pool(out)
    res = {}
    for name, v in f.items():
        r, p, degenerate = correlation_test(v["early"], v["final"], cfg.experiments.n_perm, cfg.seed, "greater")
        res[name] = {"pearson_r": r, "p_value": p, "degenerate": degenerate, "n_runs": int(v["final"].size)}
    return {"correlation": res, "reference_r": REFERENCE_EARLY_FINAL_R, "failed_runs": _failures(out)}


def run_best_of_k(ws: Workspace, out: Path) -> None:
    pools = {n: ws.seed_pool(n) for n in ("standard", "igf_shifting")}
    _write_pools(out, pools)
    bk = cfg_bk = ws.cfg.experiments.best_of_k
    rows = []
    for name, pool in pools.items():
        ks = sorted({k for k in cfg_bk.ks if k <= len(pool.records)} | {len(pool.records)})
        dist = best_of_k(pool.finals, ks, bk.n_resamples, rng_seed=[ws.cfg.seed, 6])
        for k, values in dist.items():
            rows += [[name, k, i, float(v)] for i, v in enumerate(values)]
    write_csv(out / "best_of_k.csv", ["pool", "k", "resample", "best_final_perplexity"], rows)


def summarize_best_of_k(out: Path, cfg: ExperimentConfig) -> dict:
    by: dict[str, dict[int, list[float]]] = {}
    for row in read_csv(out / "best_of_k.csv"):
        by.setdefault(row["pool"], {}).setdefault(int(row["k"]), []).append(float(row["best_final_perplexity"]))
    medians = {p: {str(k): float(np.median(v)) for k, v in sorted(d.items())} for p, d in by.items()}
    n_std = max(by["standard"])
    return {
        "median_best_of_k": medians,
        "igf_best_of_1_median": medians["igf_shifting"]["1"],
        "standard_best_of_all_median": medians["standard"][str(n_std)],
        "igf_single_run_beats_best_standard": medians["igf_shifting"]["1"] < medians["standard"][str(n_std)],
    }


def run_efficiency(ws: Workspace, out: Path) -> None:
    pools = {n: ws.seed_pool(n) for n in ("standard", "igf_shifting")}
    rows = []
    for name, pool in pools.items():
        rows += [[name, b, m, s] for b, m, s in pool.mean_trajectory()]
    write_csv(out / "mean_curves.csv", ["pool", "batch", "mean_perplexity", "standard_error"], rows)


def summarize_efficiency(out: Path, cfg: ExperimentConfig) -> dict:
    curves: dict[str, list[tuple[int, float]]] = {}
    for row in read_csv(out / "mean_curves.csv"):
        curves.setdefault(row["pool"], []).append((int(row["batch"]), float(row["mean_perplexity"])))
    rows, floor_below = batches_to_match(curves["igf_shifting"], curves["standard"])
    n = cfg.finetune.n_batches
    return {
        "table": [[r.standard_batch, r.igf_batch] for r in rows],
        "unmatched_standard_batches": sum(r.igf_batch is None for r in rows),
        "igf_floor_below_standard": floor_below,
        "early_savings_fraction": early_savings(rows, max(1, n // 2)),
    }


def run_ablation(ws: Workspace, out: Path) -> None:
    res = unigram_ablation(ws.base, ws.splits["a_train"], ws.objective, ws.cfg.experiments.ablation.n,
                           ws.cfg.optimizer_config, rng_seed=[ws.cfg.seed, 7], n_workers=ws.cfg.ig.n_workers)
    rows = [[cond, i, float(v)] for cond, vals in res.values.items() for i, v in enumerate(vals)]
    write_csv(out / "ig_values.csv", ["condition", "index", "ig"], rows)


def summarize_ablation(out: Path, cfg: ExperimentConfig) -> dict:
    vals: dict[str, list[float]] = {}
    for row in read_csv(out / "ig_values.csv"):
        vals.setdefault(row["condition"], []).append(float(row["ig"]))
    v = {k: np.array(x) for k, x in vals.items()}
    n_perm = cfg.experiments.n_perm
    means = {k: float(x.mean()) for k, x in v.items()}
    pairs = [("real", "unigram_sampled"), ("unigram_sampled", "uniform_sampled"), ("real", "uniform_sampled")]
    pvals = {f"{a}>{b}": permutation_test(v[a], v[b], "mean_diff", n_perm, cfg.seed, "greater") for a, b in pairs}
    return {
        "mean_ig": means,
        "n": {k: int(x.size) for k, x in v.items()},
        "pairwise_p": pvals,
        "p_uniform_above_zero": sign_flip_test(v["uniform_sampled"], n_perm, cfg.seed, "greater"),
        "ratio_unigram_to_real": means["unigram_sampled"] / means["real"] if means["real"] else None,
    }


def run_separation(ws: Workspace, out: Path) -> None:
    n = ws.cfg.experiments.separation.n_contexts
    contexts = PoolSampler(ws.pool).draw(np.random.default_rng([ws.cfg.seed, 8]), n)
    rep = corpus_separation_report(ws.learner, contexts, ws.cfg.experiments.separation.thresholds,
                                   positive_label=ws.cfg.corpora.a.label)
    q = ws.learner.predict_many(contexts)
    write_csv(out / "scores.csv", ["index", "source_label", "score"],
              [[i, c.source_label, float(s)] for i, (c, s) in enumerate(zip(contexts, q))])
    hist_rows = []
    for label, counts in rep.histograms.items():
        for lo, hi, c in zip(rep.histogram_edges[:-1], rep.histogram_edges[1:], counts):
            hist_rows.append([label, float(lo), float(hi), int(c)])
    write_csv(out / "histogram.csv", ["source_label", "bin_low", "bin_high", "count"], hist_rows)


def summarize_separation(out: Path, cfg: ExperimentConfig) -> dict:
    scores: dict[str, list[float]] = {}
    for row in read_csv(out / "scores.csv"):
        scores.setdefault(row["source_label"], []).append(float(row["score"]))
    s = {k: np.array(v) for k, v in scores.items()}
    a_label, b_label = cfg.corpora.a.label, cfg.corpora.b.label
    thresholds = cfg.experiments.separation.thresholds
    frac = {lab: {repr(t): float(np.mean(v >= t)) for t in thresholds} for lab, v in s.items()}
    others = np.concatenate([v for k, v in s.items() if k != a_label])
    return {
        "auc": auc(s[a_label], others),
        "fraction_above": frac,
        "b_fraction_above_minus_one": float(np.mean(s[b_label] >= -1.0)),
        "b_below_a_at_every_threshold": all(frac[b_label][repr(t)] < frac[a_label][repr(t)] for t in thresholds),
        "n": {k: int(v.size) for k, v in s.items()},
    }


def run_learners(ws: Workspace, out: Path) -> None:
    cfg = ws.cfg
    exp = cfg.experiments.learners
    configs = [cfg.learner_config(kind) for kind in exp.kinds]
    train, heldout = ws.ig_split
    rng = np.random.default_rng([cfg.seed, 9])
    rows, params = [], []
    for size in exp.sizes:
        if size > len(train):
            raise InvalidConfigError(f"learner size {size} exceeds the {len(train)} training samples",
                                     field_path="experiments.learners.sizes")
        idx = np.sort(rng.permutation(len(train))[:size])
        sub = train.subset(idx.tolist())
        for lc in configs:
            learner = train_learner(lc, sub, cfg.seed, ws.embeddings, ws.tokenizer.vocab_size)
            excluded = learner.unseen_mask(heldout.contexts)
            pred = learner.predict_many(heldout.contexts)
            for i, (p, t, x) in enumerate(zip(pred, heldout.targets, excluded)):
                rows.append([lc.kind, size, i, float(p), float(t), int(x)])
            if size == max(exp.sizes):
                params.append([lc.kind, learner.n_params])
    write_csv(out / "heldout_predictions.csv", ["kind", "size", "index", "prediction", "target", "excluded"], rows)
    write_csv(out / "parameter_counts.csv", ["kind", "n_params"], params)


def summarize_learners(out: Path, cfg: ExperimentConfig) -> dict:
    groups: dict[tuple[str, int], list[tuple[float, float]]] = {}
    for row in read_csv(out / "heldout_predictions.csv"):
        if row["excluded"] == "1":
            continue
        groups.setdefault((row["kind"], int(row["size"])), []).append((float(row["prediction"]),
                                                                        float(row["target"])))
    table = {}
    for (kind, size), pairs in sorted(groups.items()):
        p = np.array(pairs)
        r, pv, degenerate = correlation_test(p[:, 0], p[:, 1], cfg.experiments.n_perm, cfg.seed, "greater")
        table.setdefault(kind, {})[str(size)] = {"pearson_r": r, "p_value": pv, "n_heldout": int(len(p)),
                                                  "mse": float(np.mean((p[:, 0] - p[:, 1]) ** 2))}
    sizes = sorted({s for _, s in groups})
    top = str(sizes[-1])
    conv_r = table["conv"][top]["pearson_r"] if "conv" in table else None
    out_doc = {"table": table, "largest_size": int(top),
               "parameter_counts": {r["kind"]: int(r["n_params"]) for r in read_csv(out / "parameter_counts.csv")}}
    if conv_r is not None:
        out_doc["conv_minus_best_baseline"] = conv_r - max(
            (v[top]["pearson_r"] for k, v in table.items() if k != "conv"), default=conv_r)
        if "2000" in table["conv"]:
            out_doc["conv_r_2000_vs_largest_gap"] = abs(table["conv"]["2000"]["pearson_r"] - conv_r)
    return out_doc


ARCHITECTURE_WIDTHS = (3, 10)


def run_architecture(ws: Workspace, out: Path) -> None:
    _write_pools(out, {f"igf_shifting_k{w}": ws.seed_pool(f"igf_shifting_k{w}") for w in ARCHITECTURE_WIDTHS})


def summarize_architecture(out: Path, cfg: ExperimentConfig) -> dict:
    f = _finals_by_pool(out)
    k3, k10 = f["igf_shifting_k3"]["final"], f["igf_shifting_k10"]["final"]
    gap = abs(float(np.median(k3)) - float(np.median(k10)))
    spread = float(np.std(k3, ddof=1))
    return {"median_k3": float(np.median(k3)), "median_k10": float(np.median(k10)), "median_gap": gap,
            "seed_std_k3": spread, "gap_below_seed_std": gap < spread}


def run_tracked(ws: Workspace, out: Path) -> None:
    cfg = ws.cfg
    tr = cfg.experiments.tracked
    train_keys = {c.key for c in ws.ig_dataset.contexts}
    candidates = [c for c in ws.pool if c.key not in train_keys]
    tracked = select_tracked_sets(ws.learner, candidates, tr.k, rng_seed=[cfg.seed, 10])
    setup = PoolSetup("standard", ws.base, ws.stream, tuple(ws.test_set), cfg.finetune_config())
    res = tracked_context_eval(setup, tracked, tr.n_seeds, base_seed=cfg.seed * 1000 + 500,
                               max_parallel=cfg.max_parallel_runs)
    rows = [[name, i, float(v)] for name, vals in res.reductions.items() for i, v in enumerate(vals)]
    write_csv(out / "reductions.csv", ["set", "index", "loss_reduction_bits"], rows)
    curves = []
    for r in res.pool.records:
        for name, traj in r.tracked.items():
            curves += [[r.seed, name, b, v] for b, v in traj]
    write_csv(out / "tracked_curves.csv", ["seed", "set", "batch", "mean_loss_bits"], curves)


def summarize_tracked(out: Path, cfg: ExperimentConfig) -> dict:
    v: dict[str, list[float]] = {}
    for row in read_csv(out / "reductions.csv"):
        v.setdefault(row["set"], []).append(float(row["loss_reduction_bits"]))
    hi, lo = np.array(v["high"]), np.array(v["low"])
    return {
        "mean_reduction": {"high": float(hi.mean()), "low": float(lo.mean())},
        "n": {"high": int(hi.size), "low": int(lo.size)},
        "p_high_greater": permutation_test(hi, lo, "mean_diff", cfg.experiments.n_perm, cfg.seed, "greater"),
    }


def run_iigf(ws: Workspace, out: Path) -> None:
    cfg = ws.cfg
    it = cfg.experiments.iigf
    conv_cfg = cfg.finetune_config(n_batches=it.converge_batches, rng_seed=cfg.seed)
    converged, conv_rec = standard_finetune(ws.base, ws.books_stream, ws.test_set, conv_cfg)
    write_csv(out / "converge_curve.csv", ["batch", "perplexity"], conv_rec.perplexity_trajectory)
    start = conv_rec.final_perplexity
    rows = []
    for i in range(it.n_seeds):
        seed = cfg.seed * 1000 + 700 + i
        fc = cfg.finetune_config(n_batches=it.n_batches, rng_seed=seed)
        _, rec = iigf_finetune(converged, ws.pool, ws.objective, ws.test_set, cfg.iterated_schedule,
                               cfg.learner_config(), fc, n_workers=cfg.ig.n_workers)
        _, ctrl = standard_finetune(converged, ws.books_stream, ws.test_set, fc)
        rows.append([seed, start, rec.final_perplexity, ctrl.final_perplexity, len(rec.rebuild_batches),
                     len(rec.starvation_batches)])
    write_csv(out / "iigf_runs.csv", ["seed", "start_perplexity", "iigf_final_perplexity",
                                      "standard_final_perplexity", "rebuilds", "starvation_events"], rows)


def summarize_iigf(out: Path, cfg: ExperimentConfig) -> dict:
    rows = read_csv(out / "iigf_runs.csv")
    start = np.array([float(r["start_perplexity"]) for r in rows])
    iigf = np.array([float(r["iigf_final_perplexity"]) for r in rows])
    std = np.array([float(r["standard_final_perplexity"]) for r in rows])
    return {
        "start_perplexity": float(start[0]),
        "median_improvement": float(np.median(start - iigf)),
        "median_standard_improvement": float(np.median(start - std)),
        "improvements": (start - iigf).tolist(),
        "n_seeds": len(rows),
    }


EXPERIMENTS: dict[str, tuple[Callable, Callable]] = {
    "headline": (run_headline, summarize_headline),
    "early_final": (run_early_final, summarize_early_final),
    "best_of_k": (run_best_of_k, summarize_best_of_k),
    "efficiency": (run_efficiency, summarize_efficiency),
    "ablation": (run_ablation, summarize_ablation),
    "separation": (run_separation, summarize_separation),
    "learners": (run_learners, summarize_learners),
    "architecture": (run_architecture, summarize_architecture),
    "tracked": (run_tracked, summarize_tracked),
    "iigf": (run_iigf, summarize_iigf),
}


def run_experiment(ws: Workspace, name: str) -> Path:
    if name not in EXPERIMENTS:
        raise InvalidConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)} or 'all'",
                                 field_path="experiment")
    run, summarize = EXPERIMENTS[name]
    out = ws.root / REPORTS_DIR / name
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.iterdir():
        stale.unlink()
    logger.info("experiment %s -> %s", name, out)
    run(ws, out)
    (out / "config.json").write_text(json.dumps(ws.cfg.to_document(), indent=1, sort_keys=True) + "\n")
    summary = _json_clean(summarize(out, ws.cfg))
    files = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.name != "report.json"}
    report = {"experiment": name, "summary": summary, "files": files}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return out


def run_all(ws: Workspace) -> list[Path]:
    return [run_experiment(ws, name) for name in EXPERIMENTS]


def verify_report(path) -> list[str]:
    """Problems found in one report directory (empty list = verified)."""
    path = Path(path)
    problems = []
    rep_path = path / "report.json"
    if not rep_path.exists():
        return [f"{path}: no report.json"]
    report = json.loads(rep_path.read_text())
    for name, digest in report.get("files", {}).items():
        f = path / name
        if not f.exists():
            problems.append(f"{f}: listed in report.json but missing")
        elif _sha256(f) != digest:
            problems.append(f"{f}: checksum mismatch")
    extra = {p.name for p in path.iterdir()} - set(report.get("files", {})) - {"report.json"}
    problems += [f"{path / n}: not listed in report.json" for n in sorted(extra)]
    if problems:
        return problems
    name = report.get("experiment")
    if name not in EXPERIMENTS:
        return [f"{path}: unknown experiment {name!r}"]
    cfg = build_config(json.loads((path / "config.json").read_text()))
    try:
        recomputed = _json_clean(EXPERIMENTS[name][1](path, cfg))
    except (IGFError, KeyError, ValueError) as err:
        return [f"{path}: summary could not be recomputed ({err})"]
    if json.dumps(recomputed, sort_keys=True) != json.dumps(report["summary"], sort_keys=True):
        problems.append(f"{path}: summary differs from recomputation")
    return problems


def find_reports(path) -> list[Path]:
    path = Path(path)
    if (path / "report.json").exists():
        return [path]
    return sorted(p.parent for p in path.rglob("report.json"))
