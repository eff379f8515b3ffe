"""Command-line harness for the desk-scale experiments.

Subcommands:
  flow1d    1-D particle-flow trajectory with KSD series and per-step KDE
  approx2d  2-D approximation comparison (particle flow vs fitted baselines)
  gof       goodness-of-fit test of a sample CSV against a target
  em-train  EM training of a latent variable model (CSV or synthetic data)
  predict   fill unobserved columns of a dataset with a trained model

Every subcommand is deterministic given --seed and writes timestamps nowhere,
so re-runs produce byte-identical files. --threads is accepted for interface
compatibility but never changes a computation path (results are independent
of it by construction). Exit codes: 0 ok, 2 usage/configuration, 3 I/O,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import baselines, plvm
from .core import (BandwidthPolicy, ConfigError, DivergedRunError, NumericError,
                   ParticleSet, RecordingError, Rng, RunConfig, RunRecord,
                   init_particles, record_snapshot, scalars_to_csv,
                   snapshots_to_csv)
from .discrepancy import gof_test, ksd
from .inference import run_info
from .kernels import KernelSpec, median_bandwidth, resolve_bandwidth
from .metrics import kde_gaussian, regression_metrics
from .targets import Gaussian, Gmm, StudentT, TargetDensity, target_from_json

# Stream offsets for deriving independent sub-seeds from --seed.
_STREAM_EVAL = 1      # evaluation-kernel bandwidth sample
_STREAM_FIT = 2       # baseline fitting + baseline cloud draws
_STREAM_GOF = 3       # bootstrap weights
_STREAM_GENERATOR = 11
_STREAM_INIT_MODEL = 22

PRESETS_1D = ("gauss-3", "student", "gmm-sym")
PRESETS_2D = ("mog", "mor", "tm")
# Fixed per-preset run bandwidths for the 2-D comparisons.
_RUN_BANDWIDTH_2D = {"mog": 0.5, "mor": 1.0, "tm": 0.5}
# Per-preset step sizes: the narrow-ridge targets need a smaller step.
_STEP_SIZE_2D = {"mog": 0.05, "mor": 0.01, "tm": 0.01}


def make_preset_1d(name: str) -> TargetDensity:
    if name == "gauss-3":
        return Gaussian(np.array([-3.0]), np.array([[0.25]]))
    if name == "student":
        return StudentT(9.0, 1.5, 0.5)
    if name == "gmm-sym":
        return Gmm(np.array([0.5, 0.5]),
                   (Gaussian(np.array([-2.0]), np.array([[0.25]])),
                    Gaussian(np.array([2.0]), np.array([[0.25]]))))
    raise ConfigError(f"unknown 1-D preset {name!r}; valid presets: {', '.join(PRESETS_1D)}")


def make_preset_2d(name: str) -> TargetDensity:
    if name not in PRESETS_2D:
        raise ConfigError(f"unknown 2-D preset {name!r}; valid presets: {', '.join(PRESETS_2D)}")
    doc = json.loads(resources.files("infoflow.presets").joinpath(f"{name}.json").read_text())
    return target_from_json(doc)


def load_target_spec(spec: str) -> TargetDensity:
    """A preset name or a path to a target JSON document."""
    if spec in PRESETS_2D:
        return make_preset_2d(spec)
    if spec in PRESETS_1D:
        return make_preset_1d(spec)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(
            f"unknown target {spec!r}: not a preset "
            f"({', '.join(PRESETS_1D + PRESETS_2D)}) and no such file")
    return target_from_json(json.loads(path.read_text(encoding="utf-8")))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json_line(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_cloud_csv(path) -> ParticleSet:
    """Read the final snapshot out of a trajectory/cloud CSV."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise plvm.DataFileError(f"cannot read cloud {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise plvm.DataFileError(f"cloud file {path} is empty")
    header = lines[0].split(",")
    dims = [i for i, name in enumerate(header) if name.startswith("dim_")]
    if not dims or header[0] != "t":
        raise ConfigError(f"cloud file {path} lacks the t,particle_id,dim_* header")
    rows = [ln.split(",") for ln in lines[1:]]
    last_t = max(int(r[0]) for r in rows)
    pts = np.array([[float(r[i]) for i in dims] for r in rows if int(r[0]) == last_t])
    return ParticleSet(pts, time_step=last_t)


def _bandwidth_policy(args, default: BandwidthPolicy | None = None) -> BandwidthPolicy:
    if args.bandwidth is None:
        return default if default is not None else BandwidthPolicy()
    return BandwidthPolicy.parse(args.bandwidth)


def cmd_flow1d(args) -> int:
    if args.preset not in PRESETS_1D:
        print(f"unknown preset {args.preset!r}; valid presets: {', '.join(PRESETS_1D)}",
              file=sys.stderr)
        return 2
    target = make_preset_1d(args.preset)
    config = RunConfig(num_particles=args.num_particles, horizon=args.horizon,
                       step_size=args.step_size, seed=args.seed,
                       bandwidth=_bandwidth_policy(args), snapshot_stride=args.stride)
    _, record = run_info(config, target)
    out = _out_dir(args)
    _write_text(out / "trajectory.csv", snapshots_to_csv(record))
    _write_text(out / "scalars.csv", scalars_to_csv(record))
    if args.num_particles >= 2:
        all_pts = np.concatenate([pts.ravel() for _, pts in record.snapshots])
        grid = np.linspace(all_pts.min() - 1.0, all_pts.max() + 1.0, args.kde_points)
        for t, pts in record.snapshots:
            dens = kde_gaussian(pts.ravel(), grid)
            lines = ["grid,density"]
            lines += [f"{repr(float(g))},{repr(float(d))}" for g, d in zip(grid, dens)]
            _write_text(out / f"kde_t{t}.csv", "\n".join(lines) + "\n")
    return 0


def _eval_kernel(target: TargetDensity, m: int, seed: int) -> KernelSpec:
    """Evaluation kernel shared by every method of one comparison run:
    median-heuristic bandwidth of an exact target sample of size m."""
    sample = ParticleSet(target.sample_exact(m, Rng(seed).derive(_STREAM_EVAL)))
    return KernelSpec(median_bandwidth(sample))


def cmd_approx2d(args) -> int:
    if args.preset not in PRESETS_2D:
        print(f"unknown preset {args.preset!r}; valid presets: {', '.join(PRESETS_2D)}",
              file=sys.stderr)
        return 2
    if args.method not in ("info", "gauss", "gmm"):
        print(f"unknown method {args.method!r}; valid methods: info, gauss, gmm",
              file=sys.stderr)
        return 2
    target = make_preset_2d(args.preset)
    m = args.num_particles
    eval_kernel = _eval_kernel(target, m, args.seed)

    if args.method == "info":
        policy = _bandwidth_policy(
            args, BandwidthPolicy("fixed", _RUN_BANDWIDTH_2D[args.preset]))
        step_size = args.step_size if args.step_size else _STEP_SIZE_2D[args.preset]
        config = RunConfig(num_particles=m, horizon=args.horizon, step_size=step_size,
                           seed=args.seed, bandwidth=policy,
                           snapshot_stride=max(args.horizon, 1))
        cloud, _ = run_info(config, target)
    else:
        fit_rng = Rng(args.seed).derive(_STREAM_FIT)
        train = target.sample_exact(m, fit_rng)
        if args.method == "gauss":
            fitted = baselines.fit_gaussian_mle(train)
        else:
            fitted = baselines.fit_gmm_em(train, k=args.gmm_components,
                                          iters=args.gmm_iters, rng=fit_rng)
        cloud = ParticleSet(baselines.sample_fitted(fitted, m, fit_rng))

    stat = ksd(cloud, target, eval_kernel)
    result = gof_test(cloud, target, eval_kernel, args.alpha, args.gof_draws,
                      Rng(args.seed).derive(_STREAM_GOF))
    out = _out_dir(args)
    _write_text(out / "cloud.csv", snapshots_to_csv(record_snapshot(RunRecord(), cloud)))
    _write_json_line(out / "summary.json",
                     {"method": args.method, "target": args.preset,
                      "ksd": stat, "gof_decision": result.decision})
    return 0


def cmd_gof(args) -> int:
    target = load_target_spec(args.target)
    cloud = load_cloud_csv(args.samples)
    kernel = KernelSpec(resolve_bandwidth(_bandwidth_policy(args), cloud))
    result = gof_test(cloud, target, kernel, args.alpha, args.draws,
                      Rng(args.seed).derive(_STREAM_GOF))
    print(json.dumps(result.to_json_dict()))
    return 0


def _inner_config(args) -> RunConfig:
    return RunConfig(num_particles=args.inner_particles, horizon=args.inner_horizon,
                     step_size=args.inner_step_size, seed=args.seed,
                     bandwidth=_bandwidth_policy(args),
                     snapshot_stride=max(args.inner_horizon, 1))


def cmd_em_train(args) -> int:
    out = _out_dir(args)
    if args.data is not None:
        data = plvm.load_dataset_csv(args.data)
    else:
        gen_rng = Rng(args.seed).derive(_STREAM_GENERATOR)
        if args.synthetic == "linear":
            generator = plvm.make_linear_model(args.obs_dim, args.latent_dim, gen_rng,
                                               noise_scale=max(args.noise, 1e-6))
        else:
            generator = plvm.make_mlp_model(args.obs_dim, args.latent_dim, gen_rng,
                                            hidden=args.hidden,
                                            noise_scale=max(args.noise, 1e-6))
        data, _ = plvm.synthesize_dataset(generator, args.num_rows, gen_rng,
                                          noise_scale=args.noise)
        gen_doc = plvm.model_to_json(generator)
        gen_doc["generator_noise"] = args.noise
        gen_doc["num_rows"] = args.num_rows
        _write_json_line(out / "generator.json", gen_doc)

    init_rng = Rng(args.seed).derive(_STREAM_INIT_MODEL)
    if args.decoder == "linear":
        model0 = plvm.make_linear_model(data.obs_dim, args.latent_dim, init_rng,
                                        noise_scale=1.0)
    else:
        model0 = plvm.make_mlp_model(data.obs_dim, args.latent_dim, init_rng,
                                     hidden=args.hidden, noise_scale=1.0)
    cfg = plvm.EmConfig(epochs=args.epochs, m_step_rate=args.m_step_rate,
                        m_step_iters=args.m_step_iters, inner=_inner_config(args),
                        m_step_mode=args.m_step_mode,
                        warm_start=not args.cold_start,
                        sigma_floor=args.sigma_floor)
    model, record = plvm.run_info_em(model0, data, cfg)
    _write_json_line(out / "model.json", plvm.model_to_json(model))
    lines = ["epoch,expected_loglik"]
    lines += [f"{t},{repr(v)}" for t, v in record.scalar_series("loglik")]
    _write_text(out / "monitor.csv", "\n".join(lines) + "\n")
    return 0


def cmd_predict(args) -> int:
    try:
        model_doc = json.loads(Path(args.model).read_text(encoding="utf-8"))
    except OSError as exc:
        raise plvm.DataFileError(f"cannot read model {args.model}: {exc}") from exc
    model = plvm.model_from_json(model_doc)
    data = plvm.load_dataset_csv(args.data)
    try:
        cols = sorted({int(c) for c in args.target_cols.split(",") if c != ""})
    except ValueError as exc:
        raise ConfigError(f"cannot parse --target-cols {args.target_cols!r}") from exc
    if not cols or any(c < 0 or c >= data.obs_dim for c in cols):
        raise ConfigError(
            f"--target-cols must name columns in [0, {data.obs_dim - 1}], got {cols}")
    if len(cols) >= data.obs_dim:
        raise ConfigError("at least one column must stay observed")
    mask = np.ones(data.obs_dim, dtype=bool)
    mask[cols] = False

    inner = _inner_config(args)
    rows = []
    truths, preds = [], []
    for idx in range(data.num_rows):
        init = init_particles(inner.num_particles, model.latent_dim,
                              Rng(inner.seed).derive(idx))
        pred = plvm.predict(model, data.rows[idx], mask, inner, init=init)
        for j, col in enumerate(cols):
            rows.append((idx, col, float(data.rows[idx, col]), float(pred[j])))
            truths.append(float(data.rows[idx, col]))
            preds.append(float(pred[j]))
    report = regression_metrics(truths, preds)
    out = _out_dir(args)
    lines = ["row,column,truth,prediction"]
    lines += [f"{r},{c},{repr(t)},{repr(p)}" for r, c, t, p in rows]
    _write_text(out / "predictions.csv", "\n".join(lines) + "\n")
    _write_text(out / "metrics.json", report.to_json() + "\n")
    return 0


def _common_flags(parser: argparse.ArgumentParser, default_bandwidth_help: str) -> None:
    parser.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; results never depend on it")
    parser.add_argument("--bandwidth", type=str, default=None,
                        help="median | median_dist | median_log | fixed:<h> "
                             f"(default: {default_bandwidth_help})")


def _inner_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--inner-particles", type=int, default=48,
                        help="particles per E-step cloud")
    parser.add_argument("--inner-horizon", type=int, default=300,
                        help="E-step flow steps")
    parser.add_argument("--inner-step-size", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infoflow",
                                     description="particle-flow variational inference experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flow1d", help="1-D trajectory reproduction")
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS_1D)}")
    p.add_argument("--num-particles", type=int, default=200)
    p.add_argument("--horizon", type=int, default=2000)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--stride", type=int, default=10, help="snapshot stride")
    p.add_argument("--kde-points", type=int, default=256)
    _common_flags(p, "median")
    p.set_defaults(func=cmd_flow1d)

    p = sub.add_parser("approx2d", help="2-D approximation accuracy comparison")
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS_2D)}")
    p.add_argument("--method", required=True, help="info | gauss | gmm")
    p.add_argument("--num-particles", type=int, default=500)
    p.add_argument("--horizon", type=int, default=3000)
    p.add_argument("--step-size", type=float, default=None,
                   help="flow step size (default: per-preset)")
    p.add_argument("--gmm-components", type=int, default=8)
    p.add_argument("--gmm-iters", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--gof-draws", type=int, default=1000)
    _common_flags(p, "per-preset fixed h for the flow")
    p.set_defaults(func=cmd_approx2d)

    p = sub.add_parser("gof", help="goodness-of-fit test of a sample CSV")
    p.add_argument("--target", required=True, help="preset name or target JSON path")
    p.add_argument("--samples", required=True, help="cloud CSV (t,particle_id,dim_*)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--draws", type=int, default=1000)
    _common_flags(p, "median")
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("em-train", help="train a latent variable model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=str, default=None, help="dataset CSV with header")
    src.add_argument("--synthetic", choices=("linear", "mlp"), default=None,
                     help="generate a synthetic dataset instead")
    p.add_argument("--decoder", choices=("linear", "mlp"), default="linear")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--obs-dim", type=int, default=5, help="synthetic data width")
    p.add_argument("--num-rows", type=int, default=64, help="synthetic row count")
    p.add_argument("--hidden", type=int, default=16, help="MLP hidden units")
    p.add_argument("--noise", type=float, default=0.1, help="synthetic noise scale")
    p.add_argument("--m-step-rate", type=float, default=5e-2)
    p.add_argument("--m-step-iters", type=int, default=50)
    p.add_argument("--m-step-mode", choices=("auto", "closed_form", "gradient"),
                   default="auto")
    p.add_argument("--sigma-floor", type=float, default=0.05)
    p.add_argument("--cold-start", action="store_true",
                   help="redraw E-step clouds from the prior each epoch")
    _inner_flags(p)
    _common_flags(p, "median")
    p.set_defaults(func=cmd_em_train)

    p = sub.add_parser("predict", help="predict unobserved columns with a trained model")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--data", required=True, help="dataset CSV with header")
    p.add_argument("--target-cols", required=True,
                   help="comma-separated column indices to predict")
    _inner_flags(p)
    _common_flags(p, "median")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except plvm.DataFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergedRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, RecordingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
