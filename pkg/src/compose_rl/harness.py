"""Experiment orchestration: config, training loop, evaluation, metrics, checkpoints, ablations."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .composer import VARIANTS
from .ensemble import make_scripted_primitives
from .envs import ENV_REGISTRY, make_env
from .hiro import HiroConfig, HiroTrainer
from .nets import deserialize_params
from .numerics import Tensor
from .sac import NumericalFailure, SacConfig, SacTrainer
from .seeding import load_streams_state, streams_state

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "episode_return", "final_distance", "normalized_distance", "success", "wall_clock")
TRAIN_COLUMNS = ("step", "episode_return", "final_distance", "normalized_distance", "success")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
ABLATION_VARIANTS = ("full", "no_attention", "att_brnn_removed")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "point_random_goal"
    algo: str = "sac"
    variant: str = "full"
    seed: int = 0
    steps: int = 10_000
    eval_interval: int = 2_000
    eval_episodes: int = 10
    checkpoint_interval: int = 0
    out: str = "runs/default"
    log_wall_clock: bool = False
    sac: dict = field(default_factory=dict)
    hiro: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        for name in ("env", "algo", "variant", "out"):
            if not isinstance(getattr(self, name), str):
                raise ConfigError(f"{name} must be a string, got {getattr(self, name)!r}")
        for name in ("sac", "hiro"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"{name} must be a section of fields, got {getattr(self, name)!r}")
        if self.env not in ENV_REGISTRY:
            raise ConfigError(f"unknown env {self.env!r}; registered: {', '.join(sorted(ENV_REGISTRY))}")
        if self.algo not in ("sac", "hiro"):
            raise ConfigError(f"unknown algo {self.algo!r}; expected 'sac' or 'hiro'")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        for name in ("seed", "steps", "eval_interval", "eval_episodes", "checkpoint_interval"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
            if v < 0:
                raise ConfigError(f"{name} must be non-negative, got {v}")
        try:
            self.sac_config()
            self.hiro_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def sac_config(self) -> SacConfig:
        return SacConfig.from_dict({**self.sac, "variant": self.variant})

    def hiro_config(self) -> HiroConfig:
        return HiroConfig.from_dict({**self.hiro, "variant": self.variant})

    to_dict = asdict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (optional) and apply dot-path overrides such as ``{"sac.batch_size": 64}``."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    try:
        cfg = ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = d.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
        d = nxt
    d[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``"a.b=3"`` -> ``("a.b", 3)``; values parse as JSON, falling back to strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# ------------------------------------------------------------------ building

def build_trainer(cfg: ExperimentConfig):
    env = make_env(cfg.env)
    spec = env.spec
    ensemble = make_scripted_primitives(spec.family, spec.s_hat_width, spec.action_low, spec.action_high)
    if cfg.algo == "sac":
        return SacTrainer(env, ensemble, cfg.sac_config(), cfg.seed)
    return HiroTrainer(env, ensemble, cfg.hiro_config(), cfg.seed)


# ---------------------------------------------------------------- evaluation

def evaluate(trainer, env_name: str, n_episodes: int, rng: np.random.Generator, step: int) -> list[dict]:
    """``n_episodes`` noise-free episodes; one metrics record per episode."""
    env = make_env(env_name)
    rows = []
    for _ in range(n_episodes):
        obs = env.reset(rng, eval_mode=True)
        policy = trainer.eval_policy()
        policy.reset()
        ret, done, info = 0.0, False, {}
        while not done:
            obs, r, done, info = env.step(policy(obs))
            ret += r
        d0 = info["initial_distance"]
        rows.append({"step": step, "episode_return": ret, "final_distance": info["distance"],
                     "normalized_distance": info["distance"] / d0 if d0 > 0 else 0.0,
                     "success": int(bool(info["success"])), "wall_clock": ""})
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def summarize(rows: list[dict]) -> dict:
    """Mean and std of the normalized final distance over the last eval point."""
    if not rows:
        return {"eval_step": None, "n_episodes": 0, "normalized_distance_mean": None,
                "normalized_distance_std": None, "success_rate": None}
    last = max(r["step"] for r in rows)
    final = [r for r in rows if r["step"] == last]
    nd = np.array([r["normalized_distance"] for r in final])
    return {"eval_step": last, "n_episodes": len(final), "normalized_distance_mean": float(nd.mean()),
            "normalized_distance_std": float(nd.std()),
            "success_rate": float(np.mean([r["success"] for r in final]))}


# --------------------------------------------------------------- checkpoints

def _trainer_tensors(trainer) -> dict[str, Tensor]:
    out = {"param/" + k: v for k, v in trainer.nets.named_parameters().items()}
    for name, opt in trainer.optimizers().items():
        st = opt.state
        for i, (m, v) in enumerate(zip(st.first_moment, st.second_moment)):
            out[f"adam/{name}/m/{i}"] = Tensor(m)
            out[f"adam/{name}/v/{i}"] = Tensor(v)
    for name, rb in trainer.replays().items():
        for fname, arr in rb.state_dict()["store"].items():
            out[f"replay/{name}/{fname}"] = Tensor(arr)
    return out


def _env_state(env) -> dict:
    out = {}
    for k, v in vars(env).items():
        if isinstance(v, np.ndarray):
            out[k] = {"array": v.tolist()}
        elif isinstance(v, (bool, int, float)) or v is None:
            out[k] = v
    return out


def _load_env_state(env, st: dict) -> None:
    for k, v in st.items():
        setattr(env, k, np.asarray(v["array"], dtype=np.float64) if isinstance(v, dict) else v)


def checkpoint_save(out_dir, trainer, extra: dict | None = None, keep: int = 2) -> Path:
    """Write ``checkpoint_<step>.bin`` and point ``manifest.json`` at it.

    Both files go through write-then-rename, and the manifest is replaced only
    after its binary is on disk, so a crash leaves the previous pair loadable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = _trainer_tensors(trainer)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    step = trainer.total_steps
    bin_name = f"checkpoint_{step:08d}.bin"
    atomic_write(out_dir / bin_name, b"".join(chunks))
    meta = {
        "step": step,
        "streams": streams_state(trainer.streams),
        "rollout": trainer.rollout_state(),
        "env": _env_state(trainer.env),
        "adam": {name: {"step_count": opt.state.step_count, "n": len(opt.state.first_moment)}
                 for name, opt in trainer.optimizers().items()},
        "replay": {name: {k: v for k, v in rb.state_dict().items() if k not in ("store", "rng")}
                   for name, rb in trainer.replays().items()},
        "extra": extra or {},
    }
    manifest = {"format": 1, "bin": bin_name, "dtype": "float64-le", "tensors": entries, "meta": meta}
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True).encode("utf-8"))
    old = sorted(out_dir.glob("checkpoint_*.bin"))
    for p in old[:-keep]:
        p.unlink()
    return out_dir / bin_name


def read_manifest(out_dir) -> dict:
    path = Path(out_dir) / "manifest.json"
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("format", "bin", "dtype", "tensors", "meta"):
        if key not in manifest:
            raise ValueError(f"corrupt manifest: missing field {key!r}")
    for key in ("step", "streams", "rollout", "env", "adam", "replay"):
        if key not in manifest["meta"]:
            raise ValueError(f"corrupt manifest: missing field 'meta.{key}'")
    return manifest


def checkpoint_load(out_dir, trainer) -> dict:
    """Restore ``trainer`` in place from ``out_dir``; returns the manifest's extra payload."""
    out_dir = Path(out_dir)
    manifest = read_manifest(out_dir)
    meta = manifest["meta"]
    with open(out_dir / manifest["bin"], "rb") as fh:
        blob = fh.read()
    # allocate optimizer moments and replay stores so every manifest entry has a home
    for name, opt in trainer.optimizers().items():
        info = meta["adam"].get(name)
        if info is None:
            raise ValueError(f"corrupt manifest: missing field 'meta.adam.{name}'")
        opt.state.step_count = info["step_count"]
        if info["n"]:
            opt.state.first_moment = [np.zeros_like(p.data) for p in opt.params]
            opt.state.second_moment = [np.zeros_like(p.data) for p in opt.params]
        else:
            opt.state.first_moment, opt.state.second_moment = [], []
    stores: dict[str, dict[str, Tensor]] = {}
    into = {"param/" + k: v for k, v in trainer.nets.named_parameters().items()}
    for name, opt in trainer.optimizers().items():
        for i, (m, v) in enumerate(zip(opt.state.first_moment, opt.state.second_moment)):
            into[f"adam/{name}/m/{i}"] = Tensor(m)
            into[f"adam/{name}/v/{i}"] = Tensor(v)
            opt.state.first_moment[i] = into[f"adam/{name}/m/{i}"].data
            opt.state.second_moment[i] = into[f"adam/{name}/v/{i}"].data
    for e in manifest["tensors"]:
        if e.get("name", "").startswith("replay/"):
            _, rname, fname = e["name"].split("/", 2)
            t = Tensor(np.zeros(tuple(e["shape"])))
            stores.setdefault(rname, {})[fname] = t
            into[e["name"]] = t
    deserialize_params(blob, {"dtype": manifest["dtype"], "tensors": manifest["tensors"]}, into)
    replays = trainer.replays()
    for rname, rb in replays.items():
        info = meta["replay"].get(rname)
        if info is None:
            raise ValueError(f"corrupt manifest: missing field 'meta.replay.{rname}'")
        rb.load_state_dict({**info, "store": {k: t.data for k, t in stores.get(rname, {}).items()},
                            "rng": rb.rng.bit_generator.state})
    load_streams_state(trainer.streams, meta["streams"])
    trainer.load_rollout_state(meta["rollout"])
    _load_env_state(trainer.env, meta["env"])
    return meta.get("extra", {})


# ------------------------------------------------------------------ running

def _training_rows(trainer) -> list[dict]:
    return [{k: r[k] for k in TRAIN_COLUMNS} for r in trainer.log]


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> int:
    """Train, evaluate every ``eval_interval`` steps and write all outputs under ``cfg.out``.

    Returns an exit status: 0 success, 1 config error, 2 numerical failure.
    """
    try:
        cfg.validate()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True).encode("utf-8"))
    trainer = build_trainer(cfg)
    rows: list[dict] = []
    timings: list[dict] = []
    if resume and (out / "manifest.json").exists():
        extra = checkpoint_load(out, trainer)
        rows = extra.get("metrics", [])
        trainer.log = extra.get("train_log", [])
        log.info("resumed %s at step %d", out, trainer.total_steps)
    eval_rng = trainer.streams["eval"]
    start = time.perf_counter()

    def do_eval():
        new = evaluate(trainer, cfg.env, cfg.eval_episodes, eval_rng, trainer.total_steps)
        elapsed = time.perf_counter() - start
        timings.append({"step": trainer.total_steps, "wall_clock": elapsed})
        if cfg.log_wall_clock:
            for r in new:
                r["wall_clock"] = elapsed
        rows.extend(new)
        write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
        s = summarize(new)
        log.info("step %d: normalized distance %.3f +- %.3f, success %.2f", trainer.total_steps,
                 s["normalized_distance_mean"] or 0.0, s["normalized_distance_std"] or 0.0, s["success_rate"] or 0.0)

    def save():
        checkpoint_save(out, trainer, {"metrics": rows, "train_log": trainer.log})

    try:
        if trainer.total_steps == 0 and cfg.eval_episodes > 0 and cfg.eval_interval > 0:
            do_eval()
        while trainer.total_steps < cfg.steps:
            trainer.env_step()
            t = trainer.total_steps
            if cfg.eval_interval and t % cfg.eval_interval == 0 and cfg.eval_episodes > 0:
                do_eval()
            if cfg.checkpoint_interval and t % cfg.checkpoint_interval == 0:
                save()
        if cfg.checkpoint_interval:
            # before the closing eval, so a resumed run replays only scheduled evals
            save()
        if cfg.eval_episodes > 0 and (not rows or rows[-1]["step"] != trainer.total_steps):
            do_eval()
    except NumericalFailure as exc:
        log.error("numerical failure: %s", exc)
        atomic_write(out / "failure.json", json.dumps({"error": str(exc), "snapshot": exc.snapshot},
                                                      sort_keys=True, default=float).encode("utf-8"))
        return EXIT_NUMERIC
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    write_csv(out / "train_log.csv", TRAIN_COLUMNS, _training_rows(trainer))
    write_csv(out / "timing.csv", ("step", "wall_clock"), timings)
    summary = {"env": cfg.env, "algo": cfg.algo, "variant": cfg.variant, "seed": cfg.seed,
               "steps": trainer.total_steps, "training_episodes": len(trainer.log), **summarize(rows)}
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True).encode("utf-8"))
    return EXIT_OK


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"step": int(r["step"]), "episode_return": float(r["episode_return"]),
                    "final_distance": float(r["final_distance"]),
                    "normalized_distance": float(r["normalized_distance"]), "success": int(r["success"])})
    return out


def learning_curve(rows: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    """Per eval point: mean normalized distance over its episodes."""
    steps = sorted({r["step"] for r in rows})
    vals = [np.mean([r["normalized_distance"] for r in rows if r["step"] == s]) for s in steps]
    return np.array(steps, dtype=np.float64), np.array(vals)


def learning_auc(steps: np.ndarray, values: np.ndarray) -> float:
    """Step-averaged area under ``1 - normalized distance``; higher is better."""
    score = 1.0 - np.asarray(values, dtype=np.float64)
    if len(steps) < 2:
        return float(score.mean()) if len(score) else 0.0
    area = np.sum(0.5 * (score[1:] + score[:-1]) * np.diff(steps))
    return float(area / (steps[-1] - steps[0]))


def ablate(base: ExperimentConfig, seeds, variants=ABLATION_VARIANTS) -> dict:
    """Run each variant over ``seeds`` and write per-variant mean/std learning curves."""
    base.validate()
    root = Path(base.out)
    report = {"variants": {}, "seeds": list(seeds)}
    for variant in variants:
        curves, aucs = [], []
        for seed in seeds:
            cfg = ExperimentConfig.from_dict({**base.to_dict(), "variant": variant, "seed": int(seed),
                                              "out": str(root / variant / f"seed_{seed}")})
            status = run_experiment(cfg)
            if status != EXIT_OK:
                raise RuntimeError(f"variant {variant} seed {seed} exited with status {status}")
            steps, vals = learning_curve(read_metrics(Path(cfg.out) / "metrics.csv"))
            curves.append(vals)
            aucs.append(learning_auc(steps, vals))
        stack = np.vstack(curves)
        rows = [{"step": int(s), "mean_normalized_distance": float(m), "std_normalized_distance": float(sd),
                 "n_seeds": len(seeds)} for s, m, sd in zip(steps, stack.mean(0), stack.std(0))]
        write_csv(root / f"curve_{variant}.csv",
                  ("step", "mean_normalized_distance", "std_normalized_distance", "n_seeds"), rows)
        report["variants"][variant] = {"auc": aucs, "median_auc": float(np.median(aucs)),
                                       "final_normalized_distance": [float(c[-1]) for c in curves]}
    atomic_write(root / "ablation.json", json.dumps(report, indent=1, sort_keys=True).encode("utf-8"))
    return report
