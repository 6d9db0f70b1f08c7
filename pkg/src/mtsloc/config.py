"""Run configuration: a sectioned ``key = value`` text file.

Grammar (configparser INI subset)::

    [section]
    key = value
    # full-line comment

Lists are comma-separated; anomaly specs are separated by ``;``.

Sections are ``run``, ``data``, ``model``, ``detect`` and ``localize``.
Blank values mean "use the default"; ``K`` set to ``auto`` calibrates the
CUSUM allowance from training scores.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import WvsConfig
from .errors import ConfigError

SECTIONS = ("run", "data", "model", "detect", "localize")

_DATA_KEYS = {"source", "train_path", "test_path", "labels_path", "has_header"} | {f.name for f in fields(WvsConfig)} - {"seed"}
_MODEL_KEYS = {"d_model", "H", "L", "T", "lam", "learning_rate", "max_epochs", "patience", "mlp_hidden", "d_ff",
               "batch_size", "val_fraction"}
_DETECT_KEYS = {"K", "b", "n", "mu", "reset_per_window"}
_LOCALIZE_KEYS = {"method", "h1_mode", "h1_percentile", "h2_percentile", "h2_per_series", "w1", "w2",
                  "sfas_min_window", "sweep_threshold", "sweep_w2"}


def substream_seed(seed: int, name: str) -> int:
    """Deterministic child seed for a named random stream."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    data: dict = field(default_factory=lambda: {"source": "wvs"})
    model: dict = field(default_factory=dict)
    detect: dict = field(default_factory=dict)
    localize: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    # typed views -------------------------------------------------------

    def wvs_config(self) -> WvsConfig:
        mapping = {k: v for k, v in self.data.items() if k in {f.name for f in fields(WvsConfig)}}
        cfg = WvsConfig.from_mapping(mapping)
        cfg.seed = substream_seed(self.seed, "data")
        return cfg

    def model_kwargs(self) -> dict:
        ints = {"d_model", "H", "L", "T", "max_epochs", "patience", "mlp_hidden", "d_ff", "batch_size"}
        out = {}
        for k, v in self.model.items():
            if k not in _MODEL_KEYS:
                continue
            out[k] = int(v) if k in ints else float(v)
        out["seed"] = substream_seed(self.seed, "init")
        return out

    def detect_kwargs(self) -> dict:
        out = {}
        for k, v in self.detect.items():
            if k not in _DETECT_KEYS:
                continue
            if k == "reset_per_window":
                out[k] = _bool(v)
            elif k == "K" and str(v).lower() == "auto":
                out[k] = None
            else:
                out[k] = float(v)
        return out

    def localize_opts(self) -> dict:
        opts = {"method": "spearman", "h1_mode": "eval", "h1_percentile": 90.0, "h2_percentile": 97.0,
                "h2_per_series": False, "w1": 0, "w2": 5, "sfas_min_window": 10, "sweep_threshold": 0.9,
                "sweep_w2": 0}
        for k, v in self.localize.items():
            if k not in opts:
                continue  # reported by validate()
            default = opts[k]
            if isinstance(default, bool):
                opts[k] = _bool(v)
            elif isinstance(default, int):
                opts[k] = int(v)
            elif isinstance(default, float):
                opts[k] = float(v)
            else:
                opts[k] = str(v)
        return opts

    def path(self, key: str) -> Path:
        p = Path(self.data[key])
        return p if p.is_absolute() else self.base_dir / p

    # validation / io -----------------------------------------------------

    def validate(self) -> None:
        """Check every section and raise one ConfigError listing all problems."""
        problems = []
        for name, keys, section in (("data", _DATA_KEYS, self.data), ("model", _MODEL_KEYS, self.model),
                                    ("detect", _DETECT_KEYS, self.detect), ("localize", _LOCALIZE_KEYS, self.localize)):
            for k in section:
                if k not in keys:
                    problems.append(f"[{name}] unknown key {k!r}")
        source = self.data.get("source", "wvs")
        if source == "wvs":
            try:
                self.wvs_config().validate()
            except (ConfigError, ValueError) as exc:
                problems.append(f"[data] {exc}")
        elif source == "csv":
            for key in ("train_path", "test_path"):
                if key not in self.data:
                    problems.append(f"[data] csv source needs {key}")
                elif not self.path(key).exists():
                    problems.append(f"[data] {key} does not exist: {self.path(key)}")
            if "labels_path" in self.data and not self.path("labels_path").exists():
                problems.append(f"[data] labels_path does not exist: {self.path('labels_path')}")
        else:
            problems.append(f"[data] unknown source {source!r} (expected wvs or csv)")
        for section, conv in ((self.model, self.model_kwargs), (self.detect, self.detect_kwargs),
                              (self.localize, self.localize_opts)):
            try:
                conv()
            except ValueError as exc:
                problems.append(f"bad value: {exc}")
        try:
            from .model import ModelConfig

            ModelConfig(d=1, **self.model_kwargs()).validate()
        except (ConfigError, ValueError, TypeError) as exc:
            problems.append(f"[model] {exc}")
        try:
            from .detect import DetectionConfig

            DetectionConfig(**self.detect_kwargs(), window=int(self.model.get("T", 50))).validate()
        except (ConfigError, ValueError, TypeError) as exc:
            problems.append(f"[detect] {exc}")
        opts = None
        try:
            opts = self.localize_opts()
        except ValueError:
            pass
        if opts:
            if opts["method"] not in ("spearman", "kendall"):
                problems.append(f"[localize] method must be spearman or kendall, got {opts['method']!r}")
            if opts["h1_mode"] not in ("eval", "fixed"):
                problems.append(f"[localize] h1_mode must be eval or fixed, got {opts['h1_mode']!r}")
            if not 0 <= opts["h2_percentile"] <= 100 or not 0 <= opts["h1_percentile"] <= 100:
                problems.append("[localize] percentiles must lie in [0, 100]")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed), "out_dir": self.out_dir}
        for name in SECTIONS[1:]:
            cp[name] = {k: str(v) for k, v in sorted(getattr(self, name).items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        unknown = [s for s in cp.sections() if s not in SECTIONS]
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        run = dict(cp["run"]) if cp.has_section("run") else {}
        try:
            seed = int(run.get("seed", 0))
        except ValueError:
            raise ConfigError(f"[run] seed must be an integer, got {run['seed']!r}") from None

        def section(name):
            return {k: v for k, v in cp[name].items() if v.strip() != ""} if cp.has_section(name) else {}

        data = section("data")
        data.setdefault("source", "wvs")
        return cls(seed=seed, out_dir=run.get("out_dir", "run"), data=data, model=section("model"),
                   detect=section("detect"), localize=section("localize"), base_dir=base_dir or Path.cwd())

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), base_dir=path.parent.resolve())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


DEFAULT_CONFIG = """\
[run]
seed = 0
out_dir = run

[data]
source = wvs
length = 20000
train_fraction = 0.5
anomaly_specs = 3:500:649:constant_outlier; 8:1500:1649:additive_sine:amplitude=6.0:frequency=0.1;
    5:2600:2749:constant_outlier; 0:3700:3849:additive_offset; 9:4800:4949:constant_outlier;
    6:5900:6049:additive_sine:amplitude=6.0:frequency=0.01; 2:7000:7149:constant_outlier;
    7:8200:8349:additive_sine:amplitude=6.0:frequency=0.1

[model]
d_model = 64
H = 4
L = 2
T = 50
lam = 0.0
learning_rate = 0.001
max_epochs = 60
patience = 10

[detect]
K = auto
b = 0.0
n = 3.0
mu = 0.0
reset_per_window = true

[localize]
method = spearman
h1_mode = eval
h2_percentile = 97
w2 = 5
sweep_threshold = 0.9
sweep_w2 = 0
"""


def default_config() -> RunConfig:
    return RunConfig.from_text(DEFAULT_CONFIG)
