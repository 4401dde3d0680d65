"""Stage functions behind the command line.

Every stage reads only files written by earlier stages into the run
directory, so any of them can be re-run on its own. Random streams are
spawned from one SeedSequence so a (config, seed) pair fixes every output.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import estimators as est
from . import weighting as wt
from .config import ExperimentConfig
from .elliptic import CoarseMesh, DiscretizationConfig, EllipticProblem, kl_eigenpairs
from .flow import build_model, load_model, save_model
from .train import Objective, TrainConfig, TrainHistory, train

log = logging.getLogger(__name__)

STREAMS = ("rom", "init", "train", "is", "mc", "monitor")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunArtifacts:
    root: Path

    @property
    def samples(self) -> Path:
        return self.root / "samples.csv"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.csv"

    @property
    def weights(self) -> Path:
        return self.root / "weights.json"

    @property
    def fidelity(self) -> Path:
        return self.root / "fidelity.json"

    @property
    def model(self) -> Path:
        return self.root / "model.json"

    @property
    def history(self) -> Path:
        return self.root / "history.csv"

    @property
    def sigma_w_trace(self) -> Path:
        return self.root / "sigma_w.csv"

    @property
    def report(self) -> Path:
        return self.root / "report.json"


def rng_for(cfg: ExperimentConfig, stream: str) -> np.random.Generator:
    ss = np.random.SeedSequence(cfg.seed).spawn(len(STREAMS))[STREAMS.index(stream)]
    return np.random.default_rng(ss)


def int_seed(cfg: ExperimentConfig, stream: str) -> int:
    ss = np.random.SeedSequence([cfg.seed, cfg.train.seed, STREAMS.index(stream)])
    return int(ss.generate_state(1)[0])


def make_problem(cfg: ExperimentConfig) -> EllipticProblem:
    p = cfg.problem
    if p.kind != "elliptic":
        raise ValueError(f"problem kind {p.kind!r} has no reduced-order model")
    disc = DiscretizationConfig(coarse=CoarseMesh(p.coarse_elements))
    return EllipticProblem(kl_eigenpairs(p.l_c, p.M), p.C, disc, norm=p.norm)


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def stage_sample(cfg: ExperimentConfig, art: RunArtifacts) -> wt.RawSamples:
    problem = make_problem(cfg)
    raw = problem.sample_rom(cfg.estimate.N_train_rom, rng_for(cfg, "rom"), with_fine=True)
    wt.write_samples_csv(art.samples, raw)
    return raw


def stage_weights(cfg: ExperimentConfig, art: RunArtifacts) -> wt.WeightedDataset:
    raw, _ = wt.read_samples_csv(art.samples)
    eps = wt.eps_max_neg(raw) if cfg.weighting.eps_max is None else cfg.weighting.eps_max
    _json(art.fidelity, est.fidelity_report(raw.g_coarse, raw.g_fine, eps))
    accepted = wt.truncate_negative(wt.accept(raw, eps), cfg.weighting.q)
    ds = wt.fit_weights(accepted, cfg.weighting.theta, eps_max=eps)
    wt.save_dataset(ds, art.dataset, art.weights)
    return ds


def _target(cfg: ExperimentConfig):
    if cfg.problem.kind == "elliptic":
        return est.elliptic_target(make_problem(cfg))
    if cfg.problem.kind == "toy_ellipse":
        return est.EllipseToy().target()
    return est.TargetProblem(2, lambda y: np.ones(len(y), dtype=bool), "rotation")


def stage_train(cfg: ExperimentConfig, art: RunArtifacts):
    ds = wt.load_dataset(art.dataset, art.weights)
    f = cfg.flow
    model = build_model(ds.y.shape[1], f.L, f.H1, f.H2, f.partition,
                        init_data=ds.y if f.init_scale_bias else None,
                        rng=rng_for(cfg, "init"), s_max=f.s_max)
    t = cfg.train
    tc = TrainConfig(learning_rate=t.lr, epochs=t.epochs, n_batches=t.n_batches, K=t.K,
                     seed=int_seed(cfg, "train"))
    trace = []
    callback = None
    every = cfg.estimate.sigma_w_every
    if every > 0:
        target = _target(cfg)

        def callback(epoch, m):
            if epoch % every == 0:
                r = est.is_estimate(target, m, cfg.estimate.N_sigma_w_monitor, rng_for(cfg, "monitor"))
                trace.append((epoch, r.estimate, r.std, r.excluded))
                log.info("epoch %d  sigma_w %.5f", epoch, r.std)

    try:
        model, history = train(model, ds, Objective(t.beta), tc, callback=callback)
    finally:
        if trace:
            with open(art.sigma_w_trace, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "estimate", "sigma_w", "excluded"])
                w.writerows([[e, repr(a), repr(b), c] for e, a, b, c in trace])
    save_model(model, art.model)
    history.to_csv(art.history)
    return model, history


def stage_estimate(cfg: ExperimentConfig, art: RunArtifacts) -> dict:
    model = load_model(art.model)
    target = _target(cfg)
    mc = est.mc_estimate(target, cfg.estimate.N_mc, rng_for(cfg, "mc"))
    is_ = est.paired(est.is_estimate(target, model, cfg.estimate.N_sigma_w, rng_for(cfg, "is")), mc)
    report = {
        "config": cfg.to_dict(),
        "mc": mc.to_dict(),
        "is": is_.to_dict(),
        "l_mc": mc.estimate,
        "l_is": is_.estimate,
        "sigma_IB": mc.std,
        "sigma_w": is_.std,
        "ratio_is_mc": is_.ratio,
    }
    history = TrainHistory.from_csv(art.history) if art.history.exists() else None
    if history is not None and len(history):
        report["final_cross_entropy"] = float(history.cross_entropy[-1])
        report["final_penalty"] = float(history.penalty[-1])
    if art.fidelity.exists():
        report["fidelity"] = json.loads(art.fidelity.read_text())
    _json(art.report, report)
    return report


STAGES = {
    "sample-rom": stage_sample,
    "fit-weights": stage_weights,
    "train": stage_train,
    "estimate": stage_estimate,
}


def run_stage(name: str, cfg: ExperimentConfig, out) -> object:
    art = RunArtifacts(Path(out))
    art.root.mkdir(parents=True, exist_ok=True)
    try:
        return STAGES[name](cfg, art)
    except (FloatingPointError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: ExperimentConfig, out) -> dict:
    for name in STAGES:
        log.info("stage %s", name)
        result = run_stage(name, cfg, out)
    return result
