"""Experiment orchestrator and command-line entry point.

Wires the full study: generate datasets, train the count classifier plus one
regressor per transmitter count, evaluate all algorithms on the test set, and
run the sensor-density sweeps. Everything is driven by a flat key=value
config whose defaults reproduce the reference simulation setup, and by a
single base seed expanded into named per-component streams.
"""

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import evalsuite, mlp
from .datasets import (Dataset, GenConfig, fit_normalizer, generate_dataset,
                       read_dataset, split_train_val, write_dataset)
from .particlesim import PsParams
from .propagation import PropagationParams, grid_layout, reference_power_db
from .streams import stream


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    n_sensors: int = 16
    area_width: float = 20.0
    area_height: float = 20.0
    tx_power_dbm: float = 20.0
    freq_ghz: float = 2.4
    ref_distance_m: float = 1.0
    path_loss_exponent: float = 3.23
    shadow_variance_db: float = 10.0
    decorrelation_m: float = 1.0
    nt_max: int = 4
    train_per_class: int = 3000
    test_per_class: int = 3000
    val_fraction: float = 0.2
    hidden_layers: int = 3
    hidden_units: int = 128
    learning_rate: float = 1e-4
    batch_size: int = 40
    l2: float = 0.01
    epochs: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rem_resolution_m: float = 0.1
    ps_max_iter: int = 500
    ps_movement_tol_m: float = 1e-3
    ps_power_tol_db: float = 1e-2
    ps_step_gain_m: float = 0.05
    ps_init_radius_m: float = 0.5
    sweep_constant_density_sensors: tuple = (16, 36, 64)
    sweep_constant_area_sensors: tuple = (4, 16, 36, 64, 100)
    sweep_train_samples: int = 3000
    sweep_test_samples: int = 3000
    sweep_epochs: int = 1000
    base_seed: int = 20260809
    out_dir: str = "out"

    # -- derived pieces ----------------------------------------------------

    @property
    def ref_power_db(self) -> float:
        return reference_power_db(self.tx_power_dbm, self.freq_ghz * 1e9,
                                  self.ref_distance_m)

    def layout(self):
        return grid_layout(self.n_sensors, self.area_width, self.area_height)

    def prop_params(self) -> PropagationParams:
        return PropagationParams(ref_power_db=self.ref_power_db,
                                 ref_distance=self.ref_distance_m,
                                 path_loss_exponent=self.path_loss_exponent,
                                 shadow_variance_db=self.shadow_variance_db,
                                 decorrelation_m=self.decorrelation_m)

    def ps_params(self) -> PsParams:
        return PsParams(max_iter=self.ps_max_iter, movement_tol=self.ps_movement_tol_m,
                        power_tol=self.ps_power_tol_db, step_gain=self.ps_step_gain_m,
                        init_radius=self.ps_init_radius_m)

    def train_config(self, seed: int, epochs: int | None = None) -> mlp.TrainConfig:
        return mlp.TrainConfig(lr=self.learning_rate, batch_size=self.batch_size,
                               l2=self.l2,
                               epochs=self.epochs if epochs is None else epochs,
                               beta1=self.adam_beta1, beta2=self.adam_beta2,
                               eps=self.adam_eps, seed=seed)

    def hidden_dims(self) -> tuple:
        return (self.hidden_units,) * self.hidden_layers

    def validate(self):
        def require(ok, key, msg):
            if not ok:
                raise ConfigError(f"config key '{key}': {msg}")

        side = round(self.n_sensors ** 0.5)
        require(self.n_sensors >= 1 and side * side == self.n_sensors,
                "n_sensors", "must be a positive perfect square (grid layout)")
        require(self.area_width > 0, "area_width", "must be > 0")
        require(self.area_height > 0, "area_height", "must be > 0")
        require(self.freq_ghz > 0, "freq_ghz", "must be > 0")
        require(self.ref_distance_m > 0, "ref_distance_m", "must be > 0")
        require(self.path_loss_exponent > 0, "path_loss_exponent", "must be > 0")
        require(self.shadow_variance_db >= 0, "shadow_variance_db", "must be >= 0")
        require(self.decorrelation_m > 0, "decorrelation_m", "must be > 0")
        require(self.nt_max >= 1, "nt_max", "must be >= 1")
        require(self.train_per_class >= 0, "train_per_class", "must be >= 0")
        require(self.test_per_class >= 0, "test_per_class", "must be >= 0")
        require(0 < self.val_fraction < 1, "val_fraction", "must be in (0, 1)")
        require(self.hidden_layers >= 1, "hidden_layers", "must be >= 1")
        require(self.hidden_units >= 1, "hidden_units", "must be >= 1")
        require(self.learning_rate > 0, "learning_rate", "must be > 0")
        require(self.batch_size >= 1, "batch_size", "must be >= 1")
        require(self.l2 >= 0, "l2", "must be >= 0")
        require(self.epochs >= 0, "epochs", "must be >= 0")
        require(0 <= self.adam_beta1 < 1, "adam_beta1", "must be in [0, 1)")
        require(0 <= self.adam_beta2 < 1, "adam_beta2", "must be in [0, 1)")
        require(self.adam_eps > 0, "adam_eps", "must be > 0")
        require(self.rem_resolution_m > 0, "rem_resolution_m", "must be > 0")
        for key, extent in (("area_width", self.area_width),
                            ("area_height", self.area_height)):
            ratio = extent / self.rem_resolution_m
            require(abs(ratio - round(ratio)) <= 1e-9 * max(1.0, round(ratio)),
                    "rem_resolution_m", f"must divide {key}={extent}")
        require(self.ps_max_iter >= 0, "ps_max_iter", "must be >= 0")
        require(self.ps_movement_tol_m > 0, "ps_movement_tol_m", "must be > 0")
        require(self.ps_power_tol_db > 0, "ps_power_tol_db", "must be > 0")
        require(self.ps_step_gain_m > 0, "ps_step_gain_m", "must be > 0")
        require(self.ps_init_radius_m >= 0, "ps_init_radius_m", "must be >= 0")
        for key in ("sweep_constant_density_sensors", "sweep_constant_area_sensors"):
            values = getattr(self, key)
            require(len(values) > 0, key, "must not be empty")
            for v in values:
                s = round(v ** 0.5)
                require(v >= 1 and s * s == v, key,
                        f"every entry must be a positive perfect square, got {v}")
        require(self.sweep_train_samples >= 0, "sweep_train_samples", "must be >= 0")
        require(self.sweep_test_samples >= 0, "sweep_test_samples", "must be >= 0")
        require(self.sweep_epochs >= 0, "sweep_epochs", "must be >= 0")
        return self


_INT_LIST_KEYS = {"sweep_constant_density_sensors", "sweep_constant_area_sensors"}


def parse_config(path) -> ExperimentConfig:
    """Flat ``key = value`` config file; unknown keys are rejected.

    An empty file yields the full default (paper-parameter) configuration.
    '#' starts a comment; values are typed after the defaults.
    """
    defaults = ExperimentConfig()
    valid = {f.name: getattr(defaults, f.name) for f in fields(ExperimentConfig)}
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"line {lineno}: expected 'key = value', got '{text}'")
            key, value = (part.strip() for part in text.split("=", 1))
            if key not in valid:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            try:
                overrides[key] = _parse_value(key, value, valid[key])
            except ValueError:
                raise ConfigError(
                    f"line {lineno}: key '{key}': cannot parse '{value}'") from None
    return replace(defaults, **overrides).validate()


def _parse_value(key: str, text: str, default):
    if key in _INT_LIST_KEYS:
        return tuple(int(v.strip()) for v in text.split(",") if v.strip())
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def serialize_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if f.name in _INT_LIST_KEYS:
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = f"{value:.17g}"
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode("utf-8")).hexdigest()[:12]


# -- artifact names ---------------------------------------------------------

TRAIN_DATASET = "train.ds"
TEST_DATASET = "test.ds"
CLASSIFIER_MODEL = "classifier.mdl"


def regressor_model(nt: int) -> str:
    return f"regressor_nt{nt}.mdl"


def _require_file(out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        raise MissingArtifact(f"missing prerequisite file '{path}'")
    return path


def _stamp(config: ExperimentConfig) -> str:
    return f"# config_hash={config_hash(config)} seed={config.base_seed}"


def _write_csv(path, config: ExperimentConfig, header: str, rows) -> None:
    lines = [_stamp(config), header]
    lines.extend(rows)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# -- subcommands -------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, out_dir: str) -> dict:
    """Write train/test datasets plus one per-count training file each."""
    os.makedirs(out_dir, exist_ok=True)
    layout = config.layout()
    params = config.prop_params()
    written = {}
    train = generate_dataset(
        GenConfig(layout, params, config.train_per_class, config.nt_max),
        stream(config.base_seed, "dataset-train").integers(2 ** 62))
    test = generate_dataset(
        GenConfig(layout, params, config.test_per_class, config.nt_max),
        stream(config.base_seed, "dataset-test").integers(2 ** 62))
    for name, ds in ((TRAIN_DATASET, train), (TEST_DATASET, test)):
        path = os.path.join(out_dir, name)
        write_dataset(ds, path, comment=_stamp(config))
        written[name] = path
    for nt in range(1, config.nt_max + 1):
        name = f"train_nt{nt}.ds"
        path = os.path.join(out_dir, name)
        write_dataset(train.subset(nt), path, comment=_stamp(config))
        written[name] = path
    return written


def cmd_train(config: ExperimentConfig, out_dir: str) -> dict:
    """Train the count classifier and one coordinate regressor per count."""
    train_path = _require_file(out_dir, TRAIN_DATASET)
    full = read_dataset(train_path)
    train, val = split_train_val(full, 1.0 - config.val_fraction,
                                 seed=config.base_seed)
    norm = fit_normalizer(train)
    layout = full.layout
    written = {}

    cls_dims = (layout.n_sensors, *config.hidden_dims(), config.nt_max)
    classifier = mlp.init_xavier(cls_dims, "softmax",
                                 stream(config.base_seed, "model-init", "classifier"))
    cls_cfg = config.train_config(
        int(stream(config.base_seed, "model-shuffle", "classifier").integers(2 ** 62)))
    cls_data = ((norm.normalize_features(train.rss_matrix()), train.counts() - 1),
                (norm.normalize_features(val.rss_matrix()), val.counts() - 1))
    classifier, _ = mlp.train(classifier, cls_data[0], cls_data[1], cls_cfg)
    path = os.path.join(out_dir, CLASSIFIER_MODEL)
    mlp.save_model(classifier, norm, path)
    written[CLASSIFIER_MODEL] = path

    for nt in range(1, config.nt_max + 1):
        sub_train, sub_val = train.subset(nt), val.subset(nt)
        dims = (layout.n_sensors, *config.hidden_dims(), 2 * nt)
        net = mlp.init_xavier(dims, "linear",
                              stream(config.base_seed, "model-init", "regressor", nt))
        cfg = config.train_config(
            int(stream(config.base_seed, "model-shuffle", "regressor", nt)
                .integers(2 ** 62)))
        data = ((norm.normalize_features(sub_train.rss_matrix()),
                 norm.normalize_targets(sub_train.coord_matrix())),
                (norm.normalize_features(sub_val.rss_matrix()),
                 norm.normalize_targets(sub_val.coord_matrix())))
        net, _ = mlp.train(net, data[0], data[1], cfg)
        name = regressor_model(nt)
        path = os.path.join(out_dir, name)
        mlp.save_model(net, norm, path)
        written[name] = path
    return written


ALGO_CHOICES = ("dl", "reml", "ps", "rg", "all")


def cmd_evaluate(config: ExperimentConfig, out_dir: str, algo: str = "all") -> dict:
    """Run the selected algorithms on the test set and write report CSVs."""
    if algo not in ALGO_CHOICES:
        raise ConfigError(f"unknown algorithm '{algo}', expected one of {ALGO_CHOICES}")
    algos = ("dl", "reml", "ps", "rg") if algo == "all" else (algo,)
    test = read_dataset(_require_file(out_dir, TEST_DATASET))
    layout, params = test.layout, test.params
    results = {}

    if "dl" in algos:
        classifier, norm = mlp.load_model(_require_file(out_dir, CLASSIFIER_MODEL))
        regressors = {}
        for nt in range(1, config.nt_max + 1):
            net, _ = mlp.load_model(_require_file(out_dir, regressor_model(nt)))
            regressors[nt] = net
        results["dl_oracle"] = evalsuite.eval_dl_oracle(regressors, norm, test)
        two_stage, conf, _ = evalsuite.eval_dl_two_stage(classifier, regressors,
                                                         norm, test)
        results["dl_twostage"] = two_stage
        results["confusion"] = conf
        results["rmse_matrix"] = evalsuite.rmse_matrix(regressors, norm, test)
        _write_confusion_csv(os.path.join(out_dir, "confusion.csv"), config, conf)
        _write_rmse_matrix_csv(os.path.join(out_dir, "rmse_matrix.csv"), config,
                               results["rmse_matrix"])
    if "reml" in algos:
        results["reml"] = evalsuite.eval_reml(layout, params,
                                              config.rem_resolution_m, test)
    if "ps" in algos:
        ps_seed = int(stream(config.base_seed, "ps").integers(2 ** 62))
        results["ps"] = evalsuite.eval_ps(layout, params, config.ps_params(),
                                          test, ps_seed)
    if "rg" in algos:
        rg_seed = int(stream(config.base_seed, "rg").integers(2 ** 62))
        results["rg"] = evalsuite.eval_rg(layout, test, rg_seed)

    for name in ("dl_oracle", "dl_twostage", "reml", "ps", "rg"):
        for nt, report in results.get(name, {}).items():
            path = os.path.join(out_dir, f"cdf_{name}_nt{nt}.csv")
            rows = [f"{x:.17g},{F:.17g}" for x, F in report.cdf()]
            _write_csv(path, config, "error,F", rows)
    return results


def cmd_sweep(config: ExperimentConfig, out_dir: str, jobs: int = 1) -> list:
    """Constant-density and constant-area studies; one CSV row per point/algo."""
    os.makedirs(out_dir, exist_ok=True)
    settings = evalsuite.SweepSettings(
        params=config.prop_params(),
        train_samples=config.sweep_train_samples,
        test_samples=config.sweep_test_samples,
        val_fraction=config.val_fraction,
        hidden_dims=config.hidden_dims(),
        train_config=config.train_config(0, epochs=config.sweep_epochs),
        rem_resolution=config.rem_resolution_m,
        ps_params=config.ps_params(),
        base_area=(config.area_width, config.area_height))
    tasks = [("constant-density", n) for n in config.sweep_constant_density_sensors]
    tasks += [("constant-area", n) for n in config.sweep_constant_area_sensors]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_sweep_worker,
                                   [(mode, n, settings, config.base_seed)
                                    for mode, n in tasks]))
    else:
        points = [evalsuite.run_sweep_point(mode, n, settings, config.base_seed)
                  for mode, n in tasks]
    rows = []
    for point in points:
        for name, report in sorted(point.reports.items()):
            rows.append(",".join([
                point.mode, str(point.n_sensors), f"{point.area_width:.17g}",
                f"{point.area_height:.17g}", f"{point.density:.17g}", name,
                f"{report.rmse:.17g}", f"{report.median:.17g}",
                f"{report.percentile(90):.17g}"]))
    _write_csv(os.path.join(out_dir, "density_sweep.csv"), config,
               "mode,n_sensors,area_width,area_height,density,algo,rmse,"
               "median_error,p90_error", rows)
    return points


def _sweep_worker(task):
    mode, n, settings, base_seed = task
    return evalsuite.run_sweep_point(mode, n, settings, base_seed)


def _write_confusion_csv(path, config, conf) -> None:
    n = conf.matrix.shape[0]
    rows = []
    for t in range(n):
        counts = ",".join(str(c) for c in conf.matrix[t])
        rows.append(f"{t + 1},{counts},{conf.recall[t]:.17g}")
    precisions = ",".join(f"{p:.17g}" for p in conf.precision)
    rows.append(f"precision,{precisions},{conf.accuracy:.17g}")
    header = "true\\pred," + ",".join(str(p + 1) for p in range(n)) + ",recall"
    _write_csv(path, config, header, rows)


def _write_rmse_matrix_csv(path, config, matrix: np.ndarray) -> None:
    n = matrix.shape[0]
    header = "model\\true," + ",".join(str(m + 1) for m in range(n))
    rows = [f"{k + 1}," + ",".join(f"{v:.17g}" for v in matrix[k]) for k in range(n)]
    _write_csv(path, config, header, rows)


# -- entry point -------------------------------------------------------------

def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtl-lab",
        description="Multi-transmitter RSS localization experiments")
    parser.add_argument("command", choices=("generate", "train", "evaluate", "sweep"))
    parser.add_argument("--config", required=True, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config base seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--algo", choices=ALGO_CHOICES, default="all",
                        help="evaluate only this algorithm")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker-process cap for sweep points")
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
        if args.seed is not None:
            config = replace(config, base_seed=args.seed).validate()
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out_dir = args.out if args.out is not None else config.out_dir
        if args.command == "generate":
            cmd_generate(config, out_dir)
        elif args.command == "train":
            cmd_train(config, out_dir)
        elif args.command == "evaluate":
            cmd_evaluate(config, out_dir, args.algo)
        elif args.command == "sweep":
            cmd_sweep(config, out_dir, jobs=args.jobs)
    except (ConfigError, MissingArtifact, ValueError, OSError) as exc:
        print(f"mtl-lab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
