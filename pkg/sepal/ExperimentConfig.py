import copy
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .GlobalLogger import GlobalLogger
from .data import Dataset, SyntheticParams
from .exceptions import ConfigurationError
from .harness import DEFAULT_STRATEGIES, SCHEDULE_PRESETS, LearnerSettings, Schedule, Strategy, default_epochs
from .metrics import ENTROPY_VARIANTS, MetricId
from .scoremap import PoolConfig

SNAPSHOT_NAME = "config.snapshot"

# Settings that change neither selections nor scores
NON_REPRODUCIBLE_KEYS = ("jobs", "output_dir", "progress", "log_level")

SYNTHETIC_INTS = ("n_classes", "n_features", "height", "width", "n_train", "n_eval", "seed")
SYNTHETIC_FLOATS = ("signal", "noise")
SYNTHETIC_RANGES = ("blob_size", "labels_per_sample")

DEFAULT_SETTINGS = {
    "dataset": {
        "source": "synthetic",  # or "manifest"
        "manifest": "",
        "load_workers": 4,
        "synthetic": {
            "n_classes": 8,
            "n_features": 16,
            "height": 8,
            "width": 8,
            "n_train": 600,
            "n_eval": 200,
            "blob_size": [3, 4],
            "signal": 4.0,
            "noise": 1.0,
            "labels_per_sample": [1, 4],
        },
    },
    "model": {
        "head": "weldon",
        "k_top": None,
        "k_bot": None,
        "alpha": 1.0,
        "maps_per_class": 1,
        "separation": "extreme",
        "allow_overlap": False,
        "lr": 0.1,
        "batch_size": 16,
        "init_scale": 0.01,
        "warm_start": False,
        "reference_epochs": None,
    },
    "schedule": {
        "preset": "synthetic",
        # explicit values below replace the preset's
        "initial_size": None,
        "adds": None,
        "epochs": None,
        "epoch_scale": 1.0,
        "trials": 3,
        "trial_seeds": [],
    },
    "strategies": list(DEFAULT_STRATEGIES),
    "ag_metrics": ["UNC", "ENT", "MM", "SEPMAX", "SEPMIN", "SEPSUM"],
    "entropy_variant": "sum",
    "seed": 0,
    "jobs": 1,
    "output_dir": "runs/latest",
    "progress": True,
    "log_level": "WARNING",
    "bench": {
        "repeats": 5,
        "pool_size": None,
        "write_csv": True,
    },
}


def _deep_update(target, data, prefix=""):
    """Merge ``data`` into ``target`` in place and return the dotted keys it did not know."""
    unknown = []
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in target:
            unknown.append(name)
            target[key] = value
        elif isinstance(target[key], dict) and isinstance(value, dict):
            unknown.extend(_deep_update(target[key], value, f"{name}."))
        else:
            target[key] = value
    return unknown


def _set_dotted(settings, dotted, value):
    node = settings
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def read_settings_file(path):
    """Parse a JSON or TOML experiment file into a plain dict."""
    if not os.path.exists(path):
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        if str(path).endswith(".toml"):
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Could not parse {path}: {e}") from e


def _coerce(name, value, kind, optional=False):
    """Convert one setting, naming its dotted key when the value has the wrong type."""
    if value is None and optional:
        return None
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigurationError(f"{name}: expected an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{name}: expected {kind.__name__}, got {value!r}") from e


def _coerce_list(name, values, kind):
    if not isinstance(values, (list, tuple)):
        raise ConfigurationError(f"{name}: expected a list, got {values!r}")
    return tuple(_coerce(f"{name}[{i}]", v, kind) for i, v in enumerate(values))


class ExperimentConfig:
    """Validated experiment settings. Built from defaults, an optional file and flag overrides."""

    def __init__(self, settings):
        self.logger = GlobalLogger.get_instance().get_logger()
        self.settings = settings
        self._validate()

    @classmethod
    def load_config(cls, path=None, overrides=None):
        """
        Defaults, then the file at ``path``, then ``overrides``.
        :param overrides: mapping of dotted keys (``"schedule.trials"``) to values
        """
        settings = copy.deepcopy(DEFAULT_SETTINGS)
        unknown = []
        if path:
            unknown = _deep_update(settings, read_settings_file(path))
        for dotted, value in (overrides or {}).items():
            if value is not None:
                _set_dotted(settings, dotted, value)
        config = cls(settings)
        for name in unknown:
            config.logger.warning(f"Ignoring unknown setting: {name}")
        if path:
            config.logger.debug(f"Experiment settings loaded from {path}")
        return config

    @classmethod
    def from_settings(cls, settings):
        merged = copy.deepcopy(DEFAULT_SETTINGS)
        _deep_update(merged, settings)
        return cls(merged)

    def _validate(self):
        s = self.settings
        _coerce("seed", s["seed"], int)
        source = s["dataset"]["source"]
        if source not in ("synthetic", "manifest"):
            raise ConfigurationError(f"dataset.source must be 'synthetic' or 'manifest', got {source!r}")
        if source == "manifest" and not s["dataset"]["manifest"]:
            raise ConfigurationError("dataset.manifest is required when dataset.source is 'manifest'")
        if source == "synthetic":
            self.synthetic_params()
        self.pool = self._pool_config()
        self.schedule = self._schedule()
        self.strategies = [Strategy.parse(name) for name in s["strategies"]]
        if not self.strategies:
            raise ConfigurationError("strategies must name at least one strategy")
        if s["entropy_variant"] not in ENTROPY_VARIANTS:
            raise ConfigurationError(f"entropy_variant must be one of {ENTROPY_VARIANTS}")
        self.learner = self._learner()
        if _coerce("jobs", s["jobs"], int) < 1:
            raise ConfigurationError(f"jobs must be >= 1, got {s['jobs']}")
        if _coerce("bench.repeats", s["bench"]["repeats"], int) < 1:
            raise ConfigurationError("bench.repeats must be >= 1")

    def synthetic_params(self) -> SyntheticParams:
        values = dict(self.settings["dataset"]["synthetic"])
        if "seed" not in values:
            values["seed"] = self.settings["seed"]
        for key, value in list(values.items()):
            name = f"dataset.synthetic.{key}"
            if key in SYNTHETIC_FLOATS:
                values[key] = _coerce(name, value, float)
            elif key in SYNTHETIC_RANGES:
                values[key] = _coerce_list(name, value, int)
            elif key in SYNTHETIC_INTS:
                values[key] = _coerce(name, value, int)
        try:
            return SyntheticParams(**values)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"dataset.synthetic: {e}") from e

    def _pool_config(self) -> PoolConfig:
        m = self.settings["model"]
        return PoolConfig(k_top=_coerce("model.k_top", m["k_top"], int, optional=True),
                          k_bot=_coerce("model.k_bot", m["k_bot"], int, optional=True),
                          alpha=_coerce("model.alpha", m["alpha"], float), mode=m["head"],
                          maps_per_class=_coerce("model.maps_per_class", m["maps_per_class"], int),
                          separation=m["separation"], allow_overlap=bool(m["allow_overlap"]))

    def _schedule(self) -> Schedule:
        sch = self.settings["schedule"]
        preset = sch.get("preset")
        if preset:
            if preset not in SCHEDULE_PRESETS:
                raise ConfigurationError(
                    f"schedule.preset {preset!r} is unknown; known presets: {sorted(SCHEDULE_PRESETS)}")
            initial, adds = SCHEDULE_PRESETS[preset]
        else:
            initial, adds = None, None
        initial = sch["initial_size"] if sch["initial_size"] is not None else initial
        adds = sch["adds"] if sch["adds"] is not None else adds
        if initial is None or adds is None:
            raise ConfigurationError("schedule needs a preset or both initial_size and adds")
        adds = _coerce_list("schedule.adds", adds, int)
        epochs = sch["epochs"]
        if epochs is None:
            epochs = default_epochs(len(adds), _coerce("schedule.epoch_scale", sch["epoch_scale"], float))
        return Schedule(_coerce("schedule.initial_size", initial, int), adds,
                        _coerce_list("schedule.epochs", epochs, int),
                        _coerce("schedule.trials", sch["trials"], int),
                        _coerce_list("schedule.trial_seeds", sch["trial_seeds"] or (), int))

    def _learner(self) -> LearnerSettings:
        m = self.settings["model"]
        ag = tuple(MetricId.parse(name) for name in self.settings["ag_metrics"])
        if not ag or MetricId.RANDOM in ag:
            raise ConfigurationError("ag_metrics must list at least one scoring metric and not R")
        batch_size = _coerce("model.batch_size", m["batch_size"], int)
        if batch_size < 1:
            raise ConfigurationError(f"model.batch_size must be >= 1, got {batch_size}")
        reference_epochs = _coerce("model.reference_epochs", m["reference_epochs"], int, optional=True)
        if reference_epochs is not None and reference_epochs < 0:
            raise ConfigurationError(f"model.reference_epochs must be >= 0, got {reference_epochs}")
        return LearnerSettings(pool=self.pool, lr=_coerce("model.lr", m["lr"], float), batch_size=batch_size,
                               init_scale=_coerce("model.init_scale", m["init_scale"], float),
                               warm_start=bool(m["warm_start"]),
                               entropy_variant=self.settings["entropy_variant"], ag_metrics=ag,
                               reference_epochs=reference_epochs)

    def validate_against(self, dataset: Dataset):
        """Check the dataset-dependent preconditions: schedule budget and pooling k."""
        train_size = len(dataset.split_ids("train"))
        self.schedule.check_feasible(train_size)
        if not dataset.split_ids("eval"):
            raise ConfigurationError("The dataset has no eval split")
        h, w, _ = dataset.grid_shape
        self.pool.resolve(h * w)
        missing = dataset.classes_missing_in_eval()
        if len(missing) == dataset.n_classes:
            raise ConfigurationError("No class has a positive in the eval split")

    @property
    def seed(self) -> int:
        return int(self.settings["seed"])

    @property
    def jobs(self) -> int:
        return int(self.settings["jobs"])

    @property
    def output_dir(self) -> str:
        return self.settings["output_dir"]

    def reproducible_settings(self):
        return {k: v for k, v in self.settings.items() if k not in NON_REPRODUCIBLE_KEYS}

    def config_hash(self) -> str:
        canonical = json.dumps(self.reproducible_settings(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save_snapshot(self, directory) -> str:
        """Write the fully merged settings as ``config.snapshot`` (indented JSON)."""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, SNAPSHOT_NAME)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.settings, f, indent=2, sort_keys=True)
            f.write("\n")
        self.logger.debug(f"Config snapshot saved to {path}")
        return path
