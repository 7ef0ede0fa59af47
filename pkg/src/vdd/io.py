"""Run configuration (TOML), checkpoints (JSON), datasets (JSON lines) and
metrics tables (CSV)."""
from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import tomli
import tomli_w

from .errors import CheckpointVersionError, ConfigError

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
SCHEDULE_KEYS = ("kind", "sigma_min", "sigma_max", "beta_min", "beta_max", "n_steps")
SEED_STREAMS = ("data", "teacher", "features", "vdd", "em", "eval")


# --- configuration ------------------------------------------------------------

@dataclass
class TaskSection:
    kind: str = "static_gmm"
    trajectories_per_behavior: int = 200
    noise_std: float = -1.0      # negative: use the task's own noise level
    params: dict = field(default_factory=dict)


@dataclass
class TeacherSection:
    kind: str = "analytic"       # analytic | scorenet
    widths: list = field(default_factory=lambda: [64, 64])
    epochs: int = 400
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4


@dataclass
class ScheduleSection:
    kind: str = "ve"
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    beta_min: float = 1e-3
    beta_max: float = 0.2
    n_steps: int = 100


@dataclass
class VDDSection:
    Z: int = 8
    iterations: int = 2000
    batch_states: int = 64
    mc_samples: int = 1
    lr: float = 1e-3
    lr_final: float = 1e-3
    gating_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    timestep: str = "interval"
    t_lo: float = 0.2
    t_hi: float = 0.5
    perturb_action_before_score: bool = False
    gating_batch: int = 256
    train_gating: bool = True
    init_jitter: float = 0.1
    init_cov_scale: float = 0.25
    log_every: int = 50
    kl_states: int = 64
    kl_samples: int = 8
    check_bound: bool = True
    bound_triples: int = 100
    # feature map, shared with the EM baseline
    features: str = "fourier"
    n_freq: int = 64
    bandwidth_scale: float = 1.0
    degree: int = 2


@dataclass
class EMSection:
    Z: int = 8
    iterations: int = 100
    ridge: float = 1e-6
    cov_floor: float = 1e-8
    gating_tol: float = 1e-6
    gating_max_steps: int = 100
    dead_mass: float = 1e-8
    init_jitter: float = 0.1
    init_cov_scale: float = 0.25


@dataclass
class EvalSection:
    n_s0: int = 20
    rollouts_per_s0: int = 16
    selection: str = "sample-then-mean"
    kl_states: int = 64
    kl_samples: int = 64
    coverage_samples: int = 4000
    coverage_threshold: float = 0.2
    teacher_steps: int = 64
    teacher_samples: int = 1000
    bench_nfe: list = field(default_factory=lambda: [1, 4, 8, 16])
    bench_repetitions: int = 200


@dataclass
class IOSection:
    dataset: str = "dataset.jsonl"
    teacher: str = "teacher.json"
    student: str = "student.json"
    em: str = "em.json"


SECTION_TYPES = {"task": TaskSection, "teacher": TeacherSection, "schedule": ScheduleSection,
                 "vdd": VDDSection, "em": EMSection, "eval": EvalSection, "io": IOSection}


@dataclass
class RunConfig:
    seed: int = 0
    task: TaskSection = field(default_factory=TaskSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    vdd: VDDSection = field(default_factory=VDDSection)
    em: EMSection = field(default_factory=EMSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IOSection = field(default_factory=IOSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def seeds(self) -> dict:
        """Independent 64-bit seeds for each pipeline stage."""
        kids = np.random.SeedSequence(self.seed).spawn(len(SEED_STREAMS))
        return {name: int(k.generate_state(1, np.uint64)[0]) for name, k in zip(SEED_STREAMS, kids)}


def _coerce(value, default, where: str):
    """Check ``value`` against the type of the section default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a table, got {value!r}")
        return value
    return value


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = set(d) - {"seed", *SECTION_TYPES}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = d.pop("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    out = {}
    for name, cls in SECTION_TYPES.items():
        sec = d.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        bad = set(sec) - known
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        vals = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in sec.items()}
        out[name] = cls(**vals)
    return RunConfig(seed=seed, **out)


def parse_config(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    if d["seed"] >= 2 ** 63:
        # TOML integers are signed 64-bit
        raise ConfigError("seeds of 2**63 or more cannot be written as TOML")
    return tomli_w.dumps(d)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; values use TOML syntax, with bare
    words read as strings."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        parts = key.strip().split(".")
        if parts == ["seed"]:
            d["seed"] = value
            continue
        if len(parts) < 2 or parts[0] not in SECTION_TYPES:
            raise ConfigError(f"override {key!r} does not name a config section")
        node = d[parts[0]]
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = value
    return config_from_dict(d)


# --- checkpoints ----------------------------------------------------------------

def _wrap(kind: str, payload: dict) -> dict:
    return {"format": "vdd-checkpoint", "version": CHECKPOINT_VERSION, "kind": kind, "model": payload}


def _unwrap(d: dict, kind: str) -> dict:
    if d.get("format") != "vdd-checkpoint":
        raise CheckpointVersionError("not a checkpoint file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {d.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})")
    if d.get("kind") != kind:
        raise CheckpointVersionError(f"checkpoint holds a {d.get('kind')!r}, expected {kind!r}")
    return d["model"]


def save_checkpoint(model, path, schedule=None) -> None:
    """Write a mixture or score network as JSON (floats round-trip exactly).

    A score network may carry the noise schedule it was trained under.
    """
    from .moe import MoEParams, moe_to_dict
    from .scorenet import ScoreNet, scorenet_to_dict

    if isinstance(model, MoEParams):
        payload = _wrap("moe", moe_to_dict(model))
    elif isinstance(model, ScoreNet):
        payload = _wrap("scorenet", scorenet_to_dict(model))
        if schedule is not None:
            payload["model"]["schedule"] = {k: getattr(schedule, k) for k in SCHEDULE_KEYS}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_schedule(path):
    """The noise schedule stored with a score-network checkpoint, or None."""
    from .sde import NoiseSchedule

    with open(path) as fh:
        d = json.load(fh)
    sched = _unwrap(d, "scorenet").get("schedule")
    return None if sched is None else NoiseSchedule(**sched)


def load_checkpoint(path, kind: str | None = None):
    from .moe import moe_from_dict
    from .scorenet import scorenet_from_dict

    with open(path) as fh:
        d = json.load(fh)
    kind = kind or d.get("kind")
    if kind == "moe":
        return moe_from_dict(_unwrap(d, "moe"))
    if kind == "scorenet":
        return scorenet_from_dict(_unwrap(d, "scorenet"))
    raise CheckpointVersionError(f"unknown checkpoint kind {kind!r}")


# --- datasets -------------------------------------------------------------------

def dataset_to_jsonl(ds) -> str:
    """Header line with metadata, then one record per transition."""
    buf = _io.StringIO()
    buf.write(json.dumps({"header": {"version": DATASET_VERSION, **ds.metadata}}, sort_keys=True) + "\n")
    for i in range(len(ds)):
        rec = {"traj_id": int(ds.traj_ids[i]), "step": int(ds.steps[i]),
               "s": ds.states[i].tolist(), "a": ds.actions[i].tolist(),
               "behavior": int(ds.behaviors[i])}
        buf.write(json.dumps(rec) + "\n")
    return buf.getvalue()


def dataset_from_jsonl(text: str):
    from .tasks import Dataset

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    head = json.loads(lines[0]).get("header")
    if head is None or head.get("version") != DATASET_VERSION:
        raise CheckpointVersionError("dataset file has a missing or unsupported header")
    recs = [json.loads(ln) for ln in lines[1:]]
    meta = {k: v for k, v in head.items() if k != "version"}
    return Dataset(np.array([r["s"] for r in recs], dtype=np.float64),
                   np.array([r["a"] for r in recs], dtype=np.float64),
                   np.array([r["traj_id"] for r in recs]), np.array([r["step"] for r in recs]),
                   np.array([r["behavior"] for r in recs]), meta)


def save_dataset(ds, path) -> None:
    with open(path, "w") as fh:
        fh.write(dataset_to_jsonl(ds))


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_jsonl(fh.read())


# --- metrics ------------------------------------------------------------------------

def rows_to_csv(rows, columns=None) -> str:
    """CSV text; floats use ``repr`` so equal values give equal bytes."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                    for v in (r.get(c, "") for c in columns)])
    return buf.getvalue()


def write_csv(path, rows, columns=None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows, columns))


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
