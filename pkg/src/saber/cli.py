"""Command-line entry points: gen-data, train, score, evaluate, export-latent, rerun.

Every artifact-producing command writes ``manifest.json`` next to its outputs
with the resolved parameters, config snapshot and hash, seed, input and output
digests and timings. ``saber rerun manifest.json`` replays a command from its
manifest alone.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import __version__
from .baselines import ConstantVelocity
from .errors import (
    CheckpointError,
    ConfigError,
    NonFiniteError,
    ParameterError,
    SceneFormatError,
    SingleClassError,
)
from .metrics import roc_auc
from .model import load_checkpoint
from .scene_data import ABNORMAL, IGNORED, MapSpec, build_observations, collate, load_scenes, make_windows, save_scenes
from .scoring import evaluate_series, pooled, read_scores, score_scenes, write_scores
from .synth import default_counts, generate_dataset
from .training import TrainConfig, train

logger = logging.getLogger("saber")

MANIFEST_VERSION = 1
DATA_ENV = "SABER_DATA_DIR"

# named exit codes; click itself uses 2 for usage errors
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_SCHEMA = 3
EXIT_CHECKPOINT = 4
EXIT_SINGLE_CLASS = 5
EXIT_NON_FINITE = 6
EXIT_PARAMETER = 7
EXIT_MISSING_INPUT = 8

_ERROR_CODES = [
    (SceneFormatError, "schema_mismatch", EXIT_SCHEMA),
    (ConfigError, "invalid_config", EXIT_SCHEMA),
    (CheckpointError, "checkpoint_error", EXIT_CHECKPOINT),
    (SingleClassError, "single_class", EXIT_SINGLE_CLASS),
    (NonFiniteError, "non_finite", EXIT_NON_FINITE),
    (ParameterError, "invalid_parameter", EXIT_PARAMETER),
    (FileNotFoundError, "missing_input", EXIT_MISSING_INPUT),
]

GEN_DEFAULTS = {"seed": 0, "duration_range": [25, 80], "noise_std": 0.005, "n_vehicles": 2}


def _fail(exc):
    for cls, name, code in _ERROR_CODES:
        if isinstance(exc, cls):
            break
    else:
        name, code = "unexpected", EXIT_UNEXPECTED
    click.echo(json.dumps({"error": name, "exit_code": code, "message": str(exc)}, sort_keys=True), err=True)
    sys.exit(code)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except Exception as exc:  # noqa: BLE001 - mapped to a structured exit
            if logger.isEnabledFor(logging.DEBUG):
                logger.exception("command failed")
            _fail(exc)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def code_hash() -> str:
    """Digest of the package sources, so manifests pin the code that ran."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def write_manifest(out_dir, command, params, config, seed, inputs, outputs, t0):
    out_dir = Path(out_dir)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "params": params,
        "config": config,
        "config_hash": _digest(config),
        "code_hash": code_hash(),
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted(outputs.items())},
        "timings": {"wall_seconds": round(time.perf_counter() - t0, 3)},
        "versions": {"saber": __version__, "torch": torch.__version__, "numpy": np.__version__},
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _data_file(data, split) -> Path:
    if data is None:
        raise click.UsageError(f"--data not given and {DATA_ENV} is not set")
    p = Path(data)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"scene file {p} not found")
    return p.resolve()


def _abs(p):
    return None if p is None else str(Path(p).resolve())


def _load_detector(checkpoint, variant, mc_samples):
    if checkpoint is None:
        if variant != "cvm":
            raise click.UsageError("give --checkpoint, or --variant cvm for the parameter-free baseline")
        return ConstantVelocity(), {"variant": "cvm"}, {}
    path = Path(checkpoint)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    model, extra = load_checkpoint(path)
    if variant is not None and variant != model.config.variant:
        raise ConfigError(f"--variant {variant} does not match checkpoint variant {model.config.variant}")
    model.mc_samples = mc_samples
    info = {"variant": model.config.variant, "model_config_hash": model.config.digest()}
    if mc_samples:
        info["mc_samples"] = mc_samples
    return model, info, extra


def _scoring_opts(extra):
    tc = extra.get("train_config", {}) if extra else {}
    return {"window_length": tc.get("window", 15), "d": tc.get("d", 45.0)}


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
@click.version_option(__version__, prog_name="saber")
def main(verbose):
    """Highway trajectory anomaly detection."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)


# --- gen-data -----------------------------------------------------------------

def run_gen_data(config: dict, out) -> dict:
    unknown = set(config) - {"seed", "train_counts", "test_counts", "duration_range", "noise_std", "n_vehicles", "map"}
    if unknown:
        raise ConfigError(f"unknown gen-data config keys {sorted(unknown)}")
    cfg = dict(GEN_DEFAULTS)
    tr_default, te_default = default_counts()
    cfg.update({"train_counts": tr_default, "test_counts": te_default})
    cfg.update(config)
    map_spec = MapSpec.from_dict(cfg["map"]) if cfg.get("map") else None
    train_s, test_s = generate_dataset(
        cfg["train_counts"], cfg["test_counts"], seed=int(cfg["seed"]), map=map_spec,
        duration_range=tuple(cfg["duration_range"]), noise_std=float(cfg["noise_std"]),
        n_vehicles=int(cfg["n_vehicles"]),
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_scenes(train_s, out / "train.jsonl")
    save_scenes(test_s, out / "test.jsonl")
    return {"config": cfg, "outputs": {"train": out / "train.jsonl", "test": out / "test.jsonl"},
            "seed": int(cfg["seed"]), "n_train": len(train_s), "n_test": len(test_s)}


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON generator config.")
@click.option("--out", required=True, type=click.Path(file_okay=False), envvar=DATA_ENV)
@click.option("--seed", type=int, help="Overrides the config seed.")
def gen_data_cmd(config_path, out, seed):
    """Generate synthetic train (normal only) and test (mixed) scene files."""
    t0 = time.perf_counter()
    config = load_config(config_path)
    if seed is not None:
        config["seed"] = seed
    res = run_gen_data(config, out)
    params = {"config": _abs(config_path), "out": _abs(out), "seed": seed}
    inputs = [config_path] if config_path else []
    write_manifest(out, "gen-data", params, res["config"], res["seed"], inputs, res["outputs"], t0)
    click.echo(f"wrote {res['n_train']} train and {res['n_test']} test scenes to {out}")


# --- train --------------------------------------------------------------------

def _test_tuning_fn(data, fraction, seed, cfg):
    test_s = load_scenes(_data_file(data, "test"))
    if not test_s:
        raise ParameterError("no test scenes available for test-split tuning")
    n = max(1, math.ceil(fraction * len(test_s)))
    pick = np.random.default_rng(seed).permutation(len(test_s))[:n]
    subset = [test_s[i] for i in sorted(pick)]
    _, labels, _ = pooled(_label_only(subset))
    if ABNORMAL not in labels or "normal" not in labels:
        raise SingleClassError(f"the {fraction:.0%} test subset for tuning contains a single class")
    logger.warning("selecting checkpoints on %d test scenes: reported test metrics are optimistic", n)

    def val(model):
        series = score_scenes(model, subset, cfg.window, d=cfg.d)
        s, y, _ = pooled(series)
        keep = np.asarray(y) != IGNORED
        return roc_auc(s[keep], np.asarray(y)[keep] == ABNORMAL)

    return val


def _label_only(scenes):
    from .scoring import ScoreSeries

    out = []
    for s in scenes:
        zero = np.zeros((s.n_vehicles, s.length))
        out.append(ScoreSeries.from_per_vehicle(s.scene_id, s.labels, zero, zero.astype(int), s.anomaly_type))
    return out


def run_train(config: dict, data, out, variant=None, tune_on_test=0.0) -> dict:
    config = dict(config)
    if variant is not None:
        config["variant"] = variant
    if config.get("variant") == "cvm":
        raise ConfigError("cvm has no parameters to train; score it directly with --variant cvm")
    cfg = TrainConfig.from_dict(config)
    train_file = _data_file(data, "train")
    scenes = load_scenes(train_file)
    val_fn = None
    if tune_on_test:
        if not 0 < tune_on_test <= 1:
            raise ParameterError("--tune-on-test must be in (0, 1]")
        val_fn = _test_tuning_fn(data, tune_on_test, cfg.seed, cfg)
    out = Path(out)
    res = train(scenes, cfg, out_dir=out, val_fn=val_fn)
    return {"config": cfg.to_dict(), "seed": cfg.seed, "inputs": [train_file],
            "outputs": {"best": out / "best.pt", "last": out / "last.pt", "log": out / "train_log.jsonl"},
            "result": res}


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON training config.")
@click.option("--data", type=click.Path(exists=True), envvar=DATA_ENV, help="gen-data directory or train scene file.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--variant", type=click.Choice(["saber_vae", "saber_ae", "vv_rae", "rae_pred", "rae_recon"]))
@click.option("--epochs", type=int, help="Overrides the config epoch count.")
@click.option("--seed", type=int, help="Overrides the config seed.")
@click.option("--tune-on-test", type=float, default=0.0, show_default=True,
              help="Select the best checkpoint by AUROC on this fraction of the test split. Leaks test data; off by default.")
def train_cmd(config_path, data, out, variant, epochs, seed, tune_on_test):
    """Train a detector on normal scenes."""
    t0 = time.perf_counter()
    config = load_config(config_path)
    if epochs is not None:
        config["epochs"] = epochs
    if seed is not None:
        config["seed"] = seed
    res = run_train(config, data, out, variant, tune_on_test)
    params = {"config": _abs(config_path), "data": _abs(data), "out": _abs(out), "variant": variant,
              "epochs": epochs, "seed": seed, "tune_on_test": tune_on_test}
    inputs = res["inputs"] + ([config_path] if config_path else [])
    cfg = dict(res["config"], tune_on_test=tune_on_test)
    write_manifest(out, "train", params, cfg, res["seed"], inputs, res["outputs"], t0)
    r = res["result"]
    click.echo(f"trained {r.steps} steps; best epoch {r.best_epoch}; checkpoints in {out}")


# --- score / evaluate -----------------------------------------------------------

def _score(checkpoint, variant, data, jobs, mc_samples):
    detector, info, extra = _load_detector(checkpoint, variant, mc_samples)
    test_file = _data_file(data, "test")
    scenes = load_scenes(test_file)
    opts = _scoring_opts(extra)
    if mc_samples:
        # latent draws come from the global stream, so keep scene order fixed
        torch.manual_seed(0)
        jobs = 1
    series = score_scenes(detector, scenes, opts["window_length"], d=opts["d"], jobs=jobs)
    return series, info, test_file


_detector_options = [
    click.option("--checkpoint", type=click.Path(dir_okay=False), help="Trained checkpoint (best.pt)."),
    click.option("--variant", type=click.Choice(["cvm", "saber_vae", "saber_ae", "vv_rae", "rae_pred", "rae_recon"]),
                 help="cvm needs no checkpoint; otherwise must match the checkpoint."),
    click.option("--data", type=click.Path(exists=True), envvar=DATA_ENV, help="gen-data directory or test scene file."),
    click.option("--jobs", type=int, default=1, show_default=True, help="Scenes scored in parallel."),
    click.option("--mc-samples", type=int, default=0, show_default=True,
                 help="Average stochastic scores over this many latent draws (0 scores with the mean)."),
]


def _with_detector_options(f):
    for opt in reversed(_detector_options):
        f = opt(f)
    return f


@main.command("score")
@_with_detector_options
@click.option("--out", required=True, type=click.Path(file_okay=False))
def score_cmd(checkpoint, variant, data, jobs, mc_samples, out):
    """Write per-scene anomaly score series (CSV) for a test split."""
    t0 = time.perf_counter()
    series, info, test_file = _score(checkpoint, variant, data, jobs, mc_samples)
    index = write_scores(series, out)
    params = {"checkpoint": _abs(checkpoint), "variant": variant, "data": _abs(data), "jobs": jobs,
              "mc_samples": mc_samples, "out": _abs(out)}
    inputs = [test_file] + ([checkpoint] if checkpoint else [])
    write_manifest(out, "score", params, info, None, inputs, {"index": index}, t0)
    click.echo(f"scored {len(series)} scenes into {out}")


def metric_report(series, info) -> dict:
    ev = evaluate_series(series)
    return {"detector": info, **ev}


def write_report(report, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = out / "per_type_auroc.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["anomaly_type", "auroc"])
        for kind, v in sorted(report["per_type_auroc"].items()):
            w.writerow([kind, repr(v)])
    overall = out / "overall.csv"
    with open(overall, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report["overall"].items():
            w.writerow([k, repr(v)])
    return {"metrics": path, "per_type": table, "overall": overall}


@main.command("evaluate")
@click.option("--scores", type=click.Path(exists=True, file_okay=False), help="Directory written by `score`.")
@_with_detector_options
@click.option("--out", required=True, type=click.Path(file_okay=False))
def evaluate_cmd(scores, checkpoint, variant, data, jobs, mc_samples, out):
    """Compute AUROC, AUPR-Abnormal, AUPR-Normal, FPR@95%TPR and per-type AUROC."""
    t0 = time.perf_counter()
    if scores is not None:
        series = read_scores(scores)
        info = {"scores": "precomputed"}
        manifest = Path(scores) / "manifest.json"
        if manifest.exists():
            info = json.loads(manifest.read_text(encoding="utf-8")).get("config", info)
        inputs = [Path(scores) / "index.json"]
    else:
        series, info, test_file = _score(checkpoint, variant, data, jobs, mc_samples)
        inputs = [test_file] + ([checkpoint] if checkpoint else [])
    report = metric_report(series, info)
    outputs = write_report(report, out)
    params = {"scores": _abs(scores), "checkpoint": _abs(checkpoint), "variant": variant, "data": _abs(data),
              "jobs": jobs, "mc_samples": mc_samples, "out": _abs(out)}
    write_manifest(out, "evaluate", params, info, None, inputs, outputs, t0)
    o = report["overall"]
    click.echo(" ".join(f"{k}={v:.4f}" for k, v in o.items()))


# --- export-latent ------------------------------------------------------------

def export_latents(model, scenes, path, window=15, d=45.0, seed=0):
    """Per (scene, timestep, vehicle) latent mean, deviation and one sample.

    Values are averaged over every window covering the step, like scores.
    """
    j = model.config.latent_dim
    gen = torch.Generator().manual_seed(seed)
    header = ["scene_id", "anomaly_type", "timestep", "vehicle", "label"]
    header += [f"mu_{i}" for i in range(j)]
    if model.stochastic:
        header += [f"sigma_{i}" for i in range(j)]
    header += [f"z_{i}" for i in range(j)]
    n_rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in scenes:
            wins = make_windows(build_observations(s, d), window)
            if not wins:
                continue
            batch = collate(wins, n_vehicles=s.n_vehicles)
            with torch.no_grad():
                out = model(batch)
            mu = out.mu_vv.double().numpy()
            sig = out.sigma_vv.double().numpy() if out.sigma_vv is not None else None
            valid = out.recon_mask.numpy()
            V, T = s.n_vehicles, s.length
            acc_mu = np.zeros((V, T, j))
            acc_sig = np.zeros((V, T, j))
            cnt = np.zeros((V, T))
            for b, win in enumerate(wins):
                ts = win.start + np.arange(mu.shape[2]) + 1
                m = valid[b]
                acc_mu[:, ts] += np.where(m[..., None], mu[b], 0.0)
                if sig is not None:
                    acc_sig[:, ts] += np.where(m[..., None], sig[b], 0.0)
                cnt[:, ts] += m
            for t in range(T):
                for v in range(V):
                    if cnt[v, t] == 0:
                        continue
                    m_ = acc_mu[v, t] / cnt[v, t]
                    row = [s.scene_id, s.anomaly_type or "", t, v, s.labels[t]] + [repr(float(x)) for x in m_]
                    if sig is not None:
                        s_ = acc_sig[v, t] / cnt[v, t]
                        z = m_ + s_ * torch.randn(j, generator=gen, dtype=torch.float64).numpy()
                        row += [repr(float(x)) for x in s_]
                    else:
                        z = m_
                    row += [repr(float(x)) for x in z]
                    w.writerow(row)
                    n_rows += 1
    return n_rows


@main.command("export-latent")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", type=click.Path(exists=True), envvar=DATA_ENV, help="gen-data directory or test scene file.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for the latent samples.")
def export_latent_cmd(checkpoint, data, out, seed):
    """Write per-timestep latent coordinates for scatter plots."""
    t0 = time.perf_counter()
    if not Path(checkpoint).exists():
        raise CheckpointError(f"checkpoint {checkpoint} not found")
    model, extra = load_checkpoint(checkpoint)
    test_file = _data_file(data, "test")
    scenes = load_scenes(test_file)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    opts = _scoring_opts(extra)
    n = export_latents(model, scenes, out_dir / "latent.csv", opts["window_length"], opts["d"], seed)
    params = {"checkpoint": _abs(checkpoint), "data": _abs(data), "out": _abs(out), "seed": seed}
    info = {"variant": model.config.variant, "model_config_hash": model.config.digest()}
    write_manifest(out, "export-latent", params, info, seed, [test_file, checkpoint],
                   {"latent": out_dir / "latent.csv"}, t0)
    click.echo(f"wrote {n} latent rows to {out_dir / 'latent.csv'}")


# --- rerun ----------------------------------------------------------------------

_COMMANDS = {"gen-data": gen_data_cmd, "train": train_cmd, "score": score_cmd, "evaluate": evaluate_cmd,
             "export-latent": export_latent_cmd}


@main.command("rerun")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Write to a new directory instead of the recorded one.")
@click.pass_context
def rerun_cmd(ctx, manifest, out):
    """Replay a command from its manifest."""
    m = json.loads(Path(manifest).read_text(encoding="utf-8"))
    if m.get("manifest_version") != MANIFEST_VERSION or m.get("command") not in _COMMANDS:
        raise ConfigError(f"{manifest} is not a replayable manifest")
    params = dict(m["params"])
    if out is not None:
        params["out"] = _abs(out)
    ctx.invoke(_COMMANDS[m["command"]], **params)


if __name__ == "__main__":
    main()
