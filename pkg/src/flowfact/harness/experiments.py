"""Training runs, evaluation cells and the three sweeps.

Every run directory holds ``manifest.json`` (config, digest, seed, versions),
``train_log.jsonl``, ``policy.ffck`` and ``eval.json``. Sweep directories add
``episodes.jsonl`` with one record per evaluated episode and ``report.tsv`` /
``report.json`` derived from it, so every number in a report can be
recomputed from the shipped episode records.
"""

from __future__ import annotations

import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import __version__
from ..envs import NavigationEnv
from ..sac import EvalReport, evaluate, load_policy, save_agent, summarize, train
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FLOWFACT_OUTPUT_ROOT"
WORKERS_ENV = "FLOWFACT_THREADS"


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or config.output_dir)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def versions() -> dict[str, str]:
    return {"flowfact": __version__, "numpy": np.__version__, "python": platform.python_version()}


def make_env(config: ExperimentConfig, representations: str, speed: str, fps: float) -> NavigationEnv:
    return NavigationEnv(config.environment, representations, speed, fps, config.scene, config.midlevel)


def run_dir(root: Path, representations: str, seed: int) -> Path:
    return root / representations.replace("+", "_") / f"seed{seed}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def train_run(config: ExperimentConfig, representations: str, seed: int, out: Path, reuse: bool = True) -> Path:
    """Train one (composition, seed) cell; returns the checkpoint path.

    A finished run whose manifest digest matches is reused.
    """
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(config, representations=representations, training=replace(config.training, seed=seed))
    ckpt = out / "policy.ffck"
    manifest_path = out / "manifest.json"
    if reuse and ckpt.exists() and manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("digest") == cfg.digest() and old.get("complete"):
            return ckpt
    manifest = {"digest": cfg.digest(), "seed": seed, "representations": representations,
                "config": cfg.to_dict(), "versions": versions(), "complete": False}
    _write_json(manifest_path, manifest)
    (out / "config.ini").write_text(dump_config(cfg))
    env = make_env(cfg, representations, cfg.train_speed, cfg.train_fps)
    log.info("training %s seed %d for %d steps", representations, seed, cfg.training.total_steps)
    state, _ = train(env, cfg.training, out / "train_log.jsonl", out / "diverged.ffck")
    save_agent(ckpt, state, {"representations": env.spec_string, "seed": seed, "digest": cfg.digest(),
                             "environment": cfg.environment, "train_fps": cfg.train_fps})
    final = evaluate_cell(cfg, ckpt, cfg.train_speed, cfg.train_fps)
    _write_json(out / "eval.json", {"speed": cfg.train_speed, "fps": cfg.train_fps, "seed": cfg.eval_seed,
                                    **final.to_dict()})
    manifest["complete"] = True
    _write_json(manifest_path, manifest)
    return ckpt


def evaluate_cell(config: ExperimentConfig, checkpoint, speed: str, fps: float) -> EvalReport:
    policy, meta = load_policy(checkpoint)
    env = make_env(config, meta["representations"], speed, fps)
    return evaluate(policy, env, config.eval_episodes, config.eval_seed, meta["representations"])


# -- sweeps ------------------------------------------------------------------


def _cell(args):
    config, comp, seed, root, conditions = args
    ckpt = train_run(config, comp, seed, run_dir(root, comp, seed))
    rows = []
    for speed, fps in conditions:
        rep = evaluate_cell(config, ckpt, speed, fps)
        for r in rep.results:
            rows.append({"composition": comp, "environment": config.environment, "seed": seed,
                         "speed": speed, "fps": fps, **r})
    return rows


def _run_cells(config: ExperimentConfig, compositions, conditions, root: Path) -> list[dict]:
    jobs = [(config, comp, seed, root, conditions) for comp in compositions for seed in config.seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(_cell, jobs))
    else:
        chunks = [_cell(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


def build_report(episodes: list[dict], by: tuple[str, ...] = ("composition", "environment", "speed", "fps")) -> list[dict]:
    """Aggregate episode records into report rows.

    Success rate is averaged per seed first; mean and standard deviation
    (population, ddof=0) are taken over seeds. Failure shares and the
    OOB-to-collision ratio pool all episodes of the cell.
    """
    groups: dict[tuple, list[dict]] = {}
    for e in episodes:
        groups.setdefault(tuple(e[k] for k in by), []).append(e)
    rows = []
    for key, items in groups.items():
        per_seed: dict[int, list[str]] = {}
        for e in items:
            per_seed.setdefault(e["seed"], []).append(e["outcome"])
        rates = [summarize(o)[0] for _, o in sorted(per_seed.items())]
        _, counts, oob, col, ratio = summarize([e["outcome"] for e in items])
        rows.append({
            **dict(zip(by, key)),
            "seeds": len(rates),
            "episodes": len(items),
            "success_mean": float(np.mean(rates)),
            "success_std": float(np.std(rates)),
            "per_seed": rates,
            "oob": counts["oob"],
            "collision": counts["collision"],
            "timeout": counts["timeout"],
            "oob_pct": None if oob is None else 100.0 * oob,
            "collision_pct": None if col is None else 100.0 * col,
            "oob_to_collision": ratio,
        })
    return rows


_COLUMNS = ("composition", "environment", "speed", "fps", "seeds", "episodes", "success_mean", "success_std",
            "oob", "collision", "timeout", "oob_pct", "collision_pct", "oob_to_collision")


def format_tsv(rows: list[dict]) -> str:
    def fmt(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    lines = ["\t".join(_COLUMNS)]
    lines += ["\t".join(fmt(r.get(c)) for c in _COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def write_report(out: Path, name: str, episodes: list[dict], config: ExperimentConfig | None = None) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.jsonl", "w") as f:
        for e in episodes:
            f.write(json.dumps(e) + "\n")
    rows = build_report(episodes)
    (out / "report.tsv").write_text(format_tsv(rows))
    meta = {"sweep": name, "rows": rows, "versions": versions()}
    if config is not None:
        meta["config_digest"] = config.digest()
        (out / "config.ini").write_text(dump_config(config))
    _write_json(out / "report.json", meta)
    return rows


def report_from_dir(out: Path) -> list[dict]:
    """Recompute a report from ``episodes.jsonl``."""
    with open(Path(out) / "episodes.jsonl") as f:
        episodes = [json.loads(line) for line in f if line.strip()]
    return build_report(episodes)


def sweep_composition(config: ExperimentConfig) -> list[dict]:
    """Train each flow composition at the training speed; evaluate at each eval speed."""
    root = output_root(config)
    conditions = [(s, config.train_fps) for s in config.eval_speeds]
    episodes = _run_cells(config, config.compositions, conditions, root / "runs")
    return write_report(root / "sweep_composition", "composition", episodes, config)


def sweep_complementarity(config: ExperimentConfig) -> list[dict]:
    """Train the flow/segmentation/depth combinations; report success and failure breakdown."""
    root = output_root(config)
    conditions = [(s, config.train_fps) for s in config.eval_speeds]
    episodes = _run_cells(config, config.complementarity, conditions, root / "runs")
    return write_report(root / "sweep_complementarity", "complementarity", episodes, config)


def sweep_fps(config: ExperimentConfig, compositions: tuple[str, ...] | None = None) -> list[dict]:
    """Evaluate policies trained at ``train_fps`` at every ``eval_fps`` in normal speed mode."""
    root = output_root(config)
    comps = compositions or config.complementarity
    conditions = [("normal", f) for f in config.eval_fps]
    episodes = _run_cells(config, comps, conditions, root / "runs")
    return write_report(root / "sweep_fps", "fps", episodes, config)
