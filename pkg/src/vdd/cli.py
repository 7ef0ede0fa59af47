"""``vdd`` command line: data generation, teacher training and sampling,
distillation, the EM baseline, evaluation, timing and plots.

Every subcommand reads ``--config`` (TOML) plus ``--set section.key=value``
overrides and writes into the run directory ``--out``. Exit codes: 0 success,
2 configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import traceback
from pathlib import Path

COMMANDS = ("gen-data", "train-teacher", "sample-teacher", "distill", "train-em",
            "eval", "bench", "plot")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("vdd")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--threads", type=int, default=1,
                        help="numerical library threads; byte-level determinism holds for 1")
    return p


class _Run:
    """Run-directory bookkeeping for one subcommand."""

    def __init__(self, cfg, out: Path, command: str, force: bool):
        from .errors import ConfigError

        self.cfg, self.out, self.command, self.force = cfg, out, command, force
        self.files = []
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} exists and is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        self._ConfigError = ConfigError

    def path(self, name: str) -> Path:
        return self.out / name

    def claim(self, *names) -> None:
        """Refuse to overwrite outputs unless --force was given."""
        for n in names:
            if self.path(n).exists() and not self.force:
                raise self._ConfigError(
                    f"{self.path(n)} already exists; the run directory is append-only "
                    "(use a new --out or --force)")
        self.files.extend(names)


# --- builders -------------------------------------------------------------------

def build_task(cfg):
    from .errors import ConfigError
    from .tasks import make_task

    params = dict(cfg.task.params)
    if "obstacle_x" in params:
        params["obstacle_x"] = tuple(params["obstacle_x"])
    try:
        return make_task(cfg.task.kind, **params)
    except TypeError as exc:
        raise ConfigError(f"bad [task.params]: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_schedule(cfg):
    from .sde import NoiseSchedule

    s = cfg.schedule
    return NoiseSchedule(s.kind, s.sigma_min, s.sigma_max, s.beta_min, s.beta_max, s.n_steps)


def get_dataset(cfg, run: _Run, task):
    """The run's dataset file if present, else a fresh deterministic one."""
    from .io import load_dataset
    from .tasks import generate_dataset

    p = run.path(cfg.io.dataset)
    if p.exists():
        return load_dataset(p)
    noise = None if cfg.task.noise_std < 0 else cfg.task.noise_std
    return generate_dataset(task, cfg.task.trajectories_per_behavior, noise, cfg.seeds()["data"])


def build_teacher(cfg, run: _Run, task, schedule):
    from .errors import ConfigError
    from .io import load_checkpoint, load_schedule
    from .scorenet import ScoreNetScore
    from .sde import AnalyticScore

    if cfg.teacher.kind == "analytic":
        return AnalyticScore(task.target(), schedule)
    if cfg.teacher.kind == "scorenet":
        p = run.path(cfg.io.teacher)
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run train-teacher first")
        trained = load_schedule(p)
        if trained is not None and trained != schedule:
            raise ConfigError(f"{p} was trained under {trained}, but [schedule] gives {schedule}")
        return ScoreNetScore(load_checkpoint(p, "scorenet"), schedule)
    raise ConfigError(f"unknown teacher kind {cfg.teacher.kind!r}")


def build_features(cfg, states):
    from .moe import make_feature_map

    v = cfg.vdd
    return make_feature_map(v.features, states, n_freq=v.n_freq, bandwidth_scale=v.bandwidth_scale,
                            degree=v.degree, seed=cfg.seeds()["features"] % 2 ** 32)


def vdd_config(cfg):
    from .train import VDDConfig

    v = cfg.vdd
    return VDDConfig(
        n_experts=v.Z, iterations=v.iterations, batch_states=v.batch_states,
        mc_samples=v.mc_samples, lr=v.lr, lr_final=v.lr_final, gating_lr=v.gating_lr,
        beta1=v.beta1, beta2=v.beta2, adam_eps=v.adam_eps, timestep=v.timestep,
        t_lo=v.t_lo, t_hi=v.t_hi, seed=cfg.seeds()["vdd"],
        perturb_action_before_score=v.perturb_action_before_score, gating_batch=v.gating_batch,
        train_gating=v.train_gating, init_jitter=v.init_jitter, init_cov_scale=v.init_cov_scale,
        log_every=v.log_every, kl_states=v.kl_states, kl_samples=v.kl_samples,
        check_bound=v.check_bound, bound_triples=v.bound_triples)


def em_config(cfg):
    from .em import EMConfig

    e = cfg.em
    return EMConfig(n_experts=e.Z, iterations=e.iterations, ridge=e.ridge, cov_floor=e.cov_floor,
                    gating_tol=e.gating_tol, gating_max_steps=e.gating_max_steps,
                    dead_mass=e.dead_mass, seed=cfg.seeds()["em"], init_jitter=e.init_jitter,
                    init_cov_scale=e.init_cov_scale)


# --- subcommands ----------------------------------------------------------------

def cmd_gen_data(cfg, run):
    from .io import save_dataset, write_csv
    from .tasks import generate_dataset

    run.claim(cfg.io.dataset, "dataset_counts.csv")
    task = build_task(cfg)
    noise = None if cfg.task.noise_std < 0 else cfg.task.noise_std
    ds = generate_dataset(task, cfg.task.trajectories_per_behavior, noise, cfg.seeds()["data"])
    save_dataset(ds, run.path(cfg.io.dataset))
    write_csv(run.path("dataset_counts.csv"),
              [{"behavior": k, "trajectories": v} for k, v in sorted(ds.behavior_counts().items())])


def cmd_train_teacher(cfg, run):
    from .errors import ConfigError
    from .io import save_checkpoint, write_csv
    from .metrics import score_grid_mse
    from .scorenet import DSMConfig, ScoreNetScore, dsm_train
    from .sde import AnalyticScore

    if cfg.teacher.kind != "scorenet":
        raise ConfigError("train-teacher needs teacher.kind = \"scorenet\"")
    run.claim(cfg.io.teacher, "teacher_log.csv", "teacher_metrics.csv")
    task, schedule = build_task(cfg), build_schedule(cfg)
    ds = get_dataset(cfg, run, task)
    t = cfg.teacher
    dcfg = DSMConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, lr_final=t.lr_final,
                     seed=cfg.seeds()["teacher"], widths=tuple(t.widths))
    net, dlog = dsm_train(ds.states, ds.actions, schedule, config=dcfg)
    save_checkpoint(net, run.path(cfg.io.teacher), schedule=schedule)
    write_csv(run.path("teacher_log.csv"),
              [{"epoch": i, "dsm_loss": v} for i, v in enumerate(dlog.epoch_loss)])
    mse = score_grid_mse(ScoreNetScore(net, schedule), AnalyticScore(task.target(), schedule),
                         ds.states, schedule, seed=cfg.seeds()["eval"] % 2 ** 32)
    write_csv(run.path("teacher_metrics.csv"), [{"grid_mse": mse}])


def cmd_sample_teacher(cfg, run):
    import numpy as np

    from .io import write_csv
    from .sde import reverse_sde_sample

    run.claim("teacher_samples.csv", "teacher_sample_stats.csv")
    task, schedule = build_task(cfg), build_schedule(cfg)
    score = build_teacher(cfg, run, task, schedule)
    rng = np.random.default_rng(cfg.seeds()["eval"])
    s = np.repeat(task.sample_initial_states(1, rng), cfg.eval.teacher_samples, axis=0)
    a = reverse_sde_sample(score, schedule, s, cfg.eval.teacher_steps, rng, task.action_dim)
    write_csv(run.path("teacher_samples.csv"),
              [{"s0": r[0], "s1": r[1], "a0": r[2], "a1": r[3]} for r in np.hstack([s, a])])
    tgt = task.target()
    ref = tgt.sample(s, np.random.default_rng(cfg.seeds()["eval"] + 1))
    rows = []
    for name, x in (("teacher", a), ("target", ref)):
        mu, cov = x.mean(axis=0), np.cov(x.T)
        rows.append({"source": name, "mean0": mu[0], "mean1": mu[1], "cov00": cov[0, 0],
                     "cov01": cov[0, 1], "cov11": cov[1, 1]})
    write_csv(run.path("teacher_sample_stats.csv"), rows)


def cmd_distill(cfg, run):
    from .io import save_checkpoint, write_csv
    from .train import vdd_train

    run.claim(cfg.io.student, "distill_log.csv")
    task, schedule = build_task(cfg), build_schedule(cfg)
    ds = get_dataset(cfg, run, task)
    teacher = build_teacher(cfg, run, task, schedule)
    vcfg = vdd_config(cfg)
    m, tlog = vdd_train(vcfg, teacher, schedule, ds.states, ds.actions,
                        features=build_features(cfg, ds.states))
    save_checkpoint(m, run.path(cfg.io.student))
    write_csv(run.path("distill_log.csv"), tlog.rows, tlog.columns(m.n_experts))


def cmd_train_em(cfg, run):
    from .em import em_train
    from .io import save_checkpoint, write_csv

    run.claim(cfg.io.em, "em_log.csv")
    task = build_task(cfg)
    ds = get_dataset(cfg, run, task)
    m, elog = em_train(ds.states, ds.actions, em_config(cfg), features=build_features(cfg, ds.states))
    save_checkpoint(m, run.path(cfg.io.em))
    reseeds = {it for it, _ in elog.reseeds}
    write_csv(run.path("em_log.csv"),
              [{"iteration": i, "log_likelihood": v, "reseeded": int(i in reseeds)}
               for i, v in enumerate(elog.log_likelihood)])


def _models(cfg, run):
    from .io import load_checkpoint

    out = []
    for name, fname in (("vdd", cfg.io.student), ("em", cfg.io.em)):
        if run.path(fname).exists():
            out.append((name, load_checkpoint(run.path(fname), "moe")))
    if not out:
        raise FileNotFoundError("no student or EM checkpoint in the run directory")
    return out


def cmd_eval(cfg, run):
    import numpy as np

    from .io import write_csv
    from .metrics import evaluate_policy, mode_coverage, reverse_kl_mc
    from .tasks import MoEPolicy, StaticGMMTask

    run.claim("eval_metrics.csv")
    task = build_task(cfg)
    ds = get_dataset(cfg, run, task)
    e = cfg.eval
    rows = []
    for name, m in _models(cfg, run):
        rng = np.random.default_rng(cfg.seeds()["eval"])
        ev = evaluate_policy(MoEPolicy(m, e.selection), task, e.n_s0, e.rollouts_per_s0, rng)
        states = ds.states[rng.integers(0, len(ds), e.kl_states)]
        kl, kl_se = reverse_kl_mc(m, task.target(), states, e.kl_samples, rng)
        row = {"model": name, "Z": m.n_experts, **ev.as_row(), "reverse_kl": kl, "reverse_kl_se": kl_se}
        if isinstance(task, StaticGMMTask):
            row["modes_covered"] = mode_coverage(m, task.target(), np.zeros(2), e.coverage_samples,
                                                 rng, e.coverage_threshold)
        rows.append(row)
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    write_csv(run.path("eval_metrics.csv"), rows, cols)


def cmd_bench(cfg, run):
    import numpy as np

    from .io import write_csv
    from .metrics import inference_benchmark

    run.claim("bench.csv")
    task, schedule = build_task(cfg), build_schedule(cfg)
    teacher = build_teacher(cfg, run, task, schedule)
    name, m = _models(cfg, run)[0]
    state = task.sample_initial_states(1, np.random.default_rng(cfg.seeds()["eval"]))[0]
    rows = inference_benchmark(m, teacher, schedule, state, tuple(cfg.eval.bench_nfe),
                               cfg.eval.bench_repetitions, cfg.seeds()["eval"] % 2 ** 32)
    write_csv(run.path("bench.csv"), [vars(r) for r in rows])


def cmd_plot(cfg, run):
    import numpy as np

    from .plots import plot_samples, plot_trajectories
    from .tasks import StaticGMMTask

    task = build_task(cfg)
    models = _models(cfg, run)
    run.claim(*[f"{name}.svg" for name, _ in models])
    seed = cfg.seeds()["eval"] % 2 ** 32
    for name, m in models:
        if isinstance(task, StaticGMMTask):
            plot_samples(m, np.zeros(2), run.path(f"{name}.svg"), target=task.target(), seed=seed)
        else:
            plot_trajectories(m, task, run.path(f"{name}.svg"), seed=seed,
                              selection=cfg.eval.selection)


HANDLERS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher,
            "sample-teacher": cmd_sample_teacher, "distill": cmd_distill,
            "train-em": cmd_train_em, "eval": cmd_eval, "bench": cmd_bench, "plot": cmd_plot}


def _write_manifest(run: _Run, argv) -> None:
    import numpy as np

    from . import __version__

    man = {"tool": "vdd", "version": __version__, "command": run.command, "argv": list(argv),
           "seed": run.cfg.seed, "stage_seeds": run.cfg.seeds(), "files": run.files,
           "python": platform.python_version(), "numpy": np.__version__}
    with open(run.path(f"manifest-{run.command}.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in THREAD_VARS:
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    from .errors import ConfigError, NonFiniteError
    from .io import apply_overrides, dump_config, load_config

    out = Path(args.out)
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        run = _Run(cfg, out, args.command, args.force)
        run.claim(f"config-{args.command}.toml", f"manifest-{args.command}.json")
        resolved = dump_config(cfg)
        HANDLERS[args.command](cfg, run)
        with open(run.path(f"config-{args.command}.toml"), "w") as fh:
            fh.write(resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"diagnostics-{args.command}.json", "w") as fh:
            json.dump({"error": str(exc), "where": exc.where}, fh, indent=2, sort_keys=True)
        print(f"runtime error: {exc} (see diagnostics-{args.command}.json)", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(run, argv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
