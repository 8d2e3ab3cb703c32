"""Command-line interface.

Configuration precedence: command-line flags > VACODE_BACKEND_URL env
var > config file (key = value lines, --config PATH) > built-in
defaults (alpha=1, beta=0.1, temperature=1, top_p=1, metric L2,
strategy all, tau=0.5).

Every command that does work writes a run.json provenance record (the
fully resolved configuration, backend descriptor and seeds) into the
output directory, sufficient to reproduce the run against the toy
backend byte-for-byte.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys

import click

from . import __version__, cdcore, evalharness, imgaug, rng, toyvlm, wire
from .backend import Backend, CachingBackend, HttpBackend
from .cdcore import CdConfig, SamplingConfig
from .decoder import DecodingConfig, calibrate, decode
from .imgaug import ImageBuffer

TOY_ENDPOINTS = {"in-process:toy": False, "in-process:toy-hard": True}


def _read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise click.UsageError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip().strip('"')
    except OSError as exc:
        raise click.UsageError(f"cannot read config file: {exc}")
    return values


def _resolve_backend_url(flag: str | None, cfg_file: dict[str, str]) -> str:
    if flag:
        return flag
    env = os.environ.get("VACODE_BACKEND_URL")
    if env:
        return env
    return cfg_file.get("backend", "in-process:toy")


def _make_backend(url: str) -> Backend:
    if url in TOY_ENDPOINTS:
        return CachingBackend(toyvlm.ToyBackend(hard_mode=TOY_ENDPOINTS[url]))
    return HttpBackend(url)


def _float_opt(cfg_file, flags, key, default):
    if flags.get(key) is not None:
        return flags[key]
    if key in cfg_file:
        try:
            return float(cfg_file[key])
        except ValueError:
            raise click.UsageError(f"config field {key}: not a number: {cfg_file[key]!r}")
    return default


def _build_decoding_config(cfg_file: dict[str, str], **flags) -> DecodingConfig:
    alpha = _float_opt(cfg_file, flags, "alpha", 1.0)
    beta = _float_opt(cfg_file, flags, "beta", 0.1)
    temperature = _float_opt(cfg_file, flags, "temperature", 1.0)
    top_p = _float_opt(cfg_file, flags, "top_p", 1.0)
    top_k = int(_float_opt(cfg_file, flags, "top_k", 0))
    metric = flags.get("metric") or cfg_file.get("metric", "L2")
    max_len = int(_float_opt(cfg_file, flags, "max_len", 8))
    seed = int(_float_opt(cfg_file, flags, "seed", 0))
    mode = flags.get("mode") or cfg_file.get("mode", "sample")
    try:
        return DecodingConfig(
            cd=CdConfig(alpha=alpha, beta=beta),
            sampling=SamplingConfig(temperature=temperature, top_p=top_p, top_k=top_k, mode=mode),
            metric=metric,
            max_len=max_len,
            seed=seed,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _config_snapshot(cfg: DecodingConfig, backend: Backend, extra: dict) -> dict:
    info = backend.info()
    return {
        "engine_version": __version__,
        "backend": {"name": info.name, "vocab_size": info.vocab_size, "endpoint": info.endpoint},
        "decoding": {
            "alpha": cfg.cd.alpha,
            "beta": cfg.cd.beta,
            "combine_space": cfg.cd.combine_space,
            "temperature": cfg.sampling.temperature,
            "top_p": cfg.sampling.top_p,
            "top_k": cfg.sampling.top_k,
            "mode": cfg.sampling.mode,
            "metric": cfg.metric,
            "max_len": cfg.max_len,
            "seed": cfg.seed,
            "aug_set": [op.kind for op in cfg.aug_set],
        },
        **extra,
    }


def _write_run_record(out_dir: str, snapshot: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")


@click.group()
@click.version_option(__version__)
def main():
    """Adaptive visual-augmented contrastive decoding engine."""


@main.command()
@click.option("--kind", required=True, type=click.Choice(list(imgaug.KINDS) + [imgaug.IDENTITY_KIND]))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--strength", type=float, default=None, help="sharp: unsharp mask strength")
@click.option("--sigma", type=float, default=None, help="sharp: blur sigma")
@click.option("--noise-step", type=int, default=None, help="noise: diffusion step t")
@click.option("--min-frac", type=float, default=None, help="crop: minimum side fraction")
@click.option("--max-frac", type=float, default=None, help="crop: maximum side fraction")
def augment(kind, seed, in_path, out_path, strength, sigma, noise_step, min_frac, max_frac):
    """Apply one augmentation to a PNG image."""
    overrides = {}
    if strength is not None:
        overrides["strength"] = strength
    if sigma is not None:
        overrides["sigma"] = sigma
    if noise_step is not None:
        overrides["t"] = noise_step
    if min_frac is not None:
        overrides["min_frac"] = min_frac
    if max_frac is not None:
        overrides["max_frac"] = max_frac
    try:
        op = imgaug.make_op(kind, seed=seed, **overrides)
        img = ImageBuffer.load_png(in_path)
        imgaug.apply(op, img).save_png(out_path)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {out_path}")


@main.command("serve-toy")
@click.option("--port", type=int, default=8750, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--hard", is_flag=True, help="raise the language prior so it beats the pixels")
def serve_toy(port, host, hard):
    """Serve the toy backend over the wire protocol."""
    server = wire.make_server(toyvlm.ToyBackend(hard_mode=hard), host, port)
    click.echo(f"serving toy backend on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def _decoding_options(fn):
    for opt in reversed([
        click.option("--backend", "backend_url", default=None, help="backend URL or in-process:toy[-hard]"),
        click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False)),
        click.option("--alpha", type=float, default=None),
        click.option("--beta", type=float, default=None),
        click.option("--temperature", type=float, default=None),
        click.option("--top-p", "top_p", type=float, default=None),
        click.option("--top-k", "top_k", type=int, default=None),
        click.option("--metric", type=click.Choice(cdcore.DISTANCE_METRICS), default=None),
        click.option("--max-len", "max_len", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--mode", type=click.Choice(["sample", "greedy"]), default=None),
    ]):
        fn = opt(fn)
    return fn


@main.command("decode")
@_decoding_options
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--question", required=True)
@click.option("--out", "out_dir", default="runs/decode", show_default=True)
def cmd_decode(backend_url, config_path, image_path, question, out_dir, **flags):
    """Decode one sample and print the step-1 distance table."""
    cfg_file = _read_config_file(config_path)
    backend = _make_backend(_resolve_backend_url(backend_url, cfg_file))
    cfg = _build_decoding_config(cfg_file, **flags)
    try:
        image = ImageBuffer.load_png(image_path)
        answer, trace = decode(image, question, cfg, backend)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"answer: {answer}")
    click.echo(f"chosen: {trace.chosen_aug.kind}")
    click.echo("step-1 distances:")
    for key, dist in trace.distances_at_t1.items():
        click.echo(f"  {key.split(':', 1)[1]:8s} {dist:.6f}")
    click.echo(f"backend calls per step: {trace.backend_calls}")
    _write_run_record(out_dir, _config_snapshot(cfg, backend, {"command": "decode", "question": question}))


@main.command("gen-toy")
@click.option("--n", "n_per_category", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", default="toyset", show_default=True)
def cmd_gen_toy(n_per_category, seed, out_dir):
    """Generate the synthetic benchmark (images + samples.jsonl)."""
    try:
        path = evalharness.generate_toy_dataset(n_per_category, seed, out_dir)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {path}")


def _load_samples(dataset):
    try:
        return evalharness.load_dataset(dataset)
    except (evalharness.DatasetError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _seed_list(cfg: DecodingConfig, n_seeds: int) -> list[int]:
    return [rng.mix(cfg.seed, "run-seed", i) for i in range(n_seeds)]


@main.command("eval")
@_decoding_options
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(evalharness.METHODS), default="vacode_all", show_default=True)
@click.option("--single-aug", type=click.Choice(imgaug.KINDS), default=None,
              help="augmentation for --method single")
@click.option("--seeds", "n_seeds", type=int, default=1, show_default=True, help="number of seed runs")
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--calib-fraction", type=float, default=0.2, show_default=True,
              help="held-out fraction used to calibrate the selection strategy")
@click.option("--workers", type=int, default=os.cpu_count() or 1, show_default=True)
@click.option("--out", "out_dir", default="runs/eval", show_default=True)
def cmd_eval(backend_url, config_path, dataset, method, single_aug, n_seeds, tau,
             calib_fraction, workers, out_dir, **flags):
    """Evaluate one decoding method over a dataset and write reports."""
    cfg_file = _read_config_file(config_path)
    backend = _make_backend(_resolve_backend_url(backend_url, cfg_file))
    cfg = _build_decoding_config(cfg_file, **flags)
    if method == "single" and single_aug is None:
        raise click.UsageError("--method single requires --single-aug")
    samples = _load_samples(dataset)
    seeds = _seed_list(cfg, n_seeds)
    calibration = None
    eval_samples = samples
    if method == "vacode_selection":
        n_cal = max(1, int(len(samples) * calib_fraction))
        calibration = calibrate(samples[:n_cal], cfg, backend, tau)
        eval_samples = samples[n_cal:]
    os.makedirs(out_dir, exist_ok=True)
    try:
        report = evalharness.evaluate(
            eval_samples,
            method,
            cfg,
            backend,
            seeds=seeds,
            single_aug=imgaug.make_op(single_aug) if single_aug else None,
            calibration=calibration,
            workers=workers,
            partial_dump_path=os.path.join(out_dir, "partial_report.json"),
        )
    except Exception as exc:
        click.echo(f"error: {exc} (partial records dumped)", err=True)
        sys.exit(1)
    evalharness.write_report(report, out_dir)
    extra = {"command": "eval", "method": method, "dataset": os.path.abspath(dataset),
             "seeds": seeds, "tau": tau}
    if calibration is not None:
        extra["calibration"] = {
            "counts": calibration.counts,
            "kept": [op.kind for op in calibration.kept],
        }
    _write_run_record(out_dir, _config_snapshot(cfg, backend, extra))
    click.echo(f"total score: {report.mean_total:.6f}")
    click.echo(f"reports written to {out_dir}")


@main.command("calibrate")
@_decoding_options
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--out", "out_dir", default="runs/calibrate", show_default=True)
def cmd_calibrate(backend_url, config_path, dataset, tau, out_dir, **flags):
    """Count step-1 selections and report the kept augmentation subset."""
    cfg_file = _read_config_file(config_path)
    backend = _make_backend(_resolve_backend_url(backend_url, cfg_file))
    cfg = _build_decoding_config(cfg_file, **flags)
    samples = _load_samples(dataset)
    try:
        report = calibrate(samples, cfg, backend, tau)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for op, count in zip(report.aug_set, report.counts):
        click.echo(f"{op.kind:8s} {count}")
    click.echo(f"kept: {', '.join(op.kind for op in report.kept)}")
    _write_run_record(out_dir, _config_snapshot(cfg, backend, {
        "command": "calibrate", "tau": tau,
        "counts": report.counts, "kept": [op.kind for op in report.kept],
    }))


@main.command("ablate-distance")
@_decoding_options
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", "n_seeds", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", default="runs/ablate", show_default=True)
def cmd_ablate_distance(backend_url, config_path, dataset, n_seeds, out_dir, **flags):
    """Mean selected-augmentation gain under each distance metric."""
    cfg_file = _read_config_file(config_path)
    backend = _make_backend(_resolve_backend_url(backend_url, cfg_file))
    cfg = _build_decoding_config(cfg_file, **flags)
    samples = _load_samples(dataset)
    seeds = _seed_list(cfg, n_seeds)
    try:
        result = evalharness.ablate_distance(samples, cfg, backend, seeds=seeds)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    os.makedirs(out_dir, exist_ok=True)
    lines = ["metric,mean_gain"]
    for metric, mean_gain in result.items():
        click.echo(f"{metric:8s} {mean_gain:.6f}")
        lines.append(f"{metric},{mean_gain:.6f}")
    with open(os.path.join(out_dir, "distance_metric_gain.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_run_record(out_dir, _config_snapshot(cfg, backend, {
        "command": "ablate-distance", "seeds": seeds,
    }))


if __name__ == "__main__":
    main()
