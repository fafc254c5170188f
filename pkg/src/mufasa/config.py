"""INI-style configuration files for data generation and training.

Every dataclass field lives in one section; unknown sections or keys are errors.
Lists are comma separated; colours are ``r g b`` triples separated by ``;``.
"""

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

from .data import SceneSpec
from .errors import ConfigurationError
from .features import FeatureBackendConfig


def _section(name, default=dataclasses.MISSING, factory=dataclasses.MISSING):
    if factory is not dataclasses.MISSING:
        return field(default_factory=factory, metadata={"section": name})
    return field(default=default, metadata={"section": name})


@dataclass
class TrainConfig:
    # [data]
    data_path: str = _section("data", "data")
    train_split: str = _section("data", "train")
    eval_split: str = _section("data", "eval")
    crop: str = _section("data", "full")
    flip: bool = _section("data", True)
    # [model]
    layer_ids: tuple = _section("model", (1, 2))
    architecture: str = _section("model", "multi")
    n_slots: int = _section("model", 6)
    d_slot: int = _section("model", 256)
    sa_iters: int = _section("model", 3)
    sa_mlp_hidden: int = _section("model", 1024)
    slot_init: str = _section("model", "gaussian")
    fusion: str = _section("model", "m_fusion")
    fusion_hidden: int = _section("model", 768)
    mask_weights: str = _section("model", "uniform")
    decoder: str = _section("model", "transformer")
    dec_width: int = _section("model", 192)
    dec_layers: int = _section("model", 4)
    dec_heads: int = _section("model", 6)
    dec_hidden: int = _section("model", 2048)
    dec_order: str = _section("model", "raster")
    # [train]
    epochs: int = _section("train", 1)
    teacher_epochs: int = _section("train", 1)
    student_epochs: int = _section("train", 1)
    student_mask_weights: str = _section("train", "learned")
    batch_size: int = _section("train", 64)
    lr_main: float = _section("train", 4e-4)
    lr_low: float = _section("train", 4e-7)
    warmup_steps: int = _section("train", 200)
    beta1: float = _section("train", 0.9)
    beta2: float = _section("train", 0.999)
    grad_clip: float = _section("train", 1.0)
    distill_lambda: float = _section("train", 0.01)
    distill_soft: bool = _section("train", False)
    seed: int = _section("train", 0)
    dtype: str = _section("train", "float32")
    # [eval]
    eval_every: int = _section("eval", 1)
    eval_limit: int = _section("eval", 0)
    eval_res: int = _section("eval", 0)
    include_background: bool = _section("eval", True)
    # [features]
    backend: FeatureBackendConfig = _section("features", factory=FeatureBackendConfig)

    def __post_init__(self):
        self.layer_ids = tuple(int(i) for i in self.layer_ids)
        if not self.layer_ids or any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ConfigurationError(f"layer ids must be non-empty and strictly increasing: {self.layer_ids}")
        if not self.lr_main > self.lr_low >= 0:
            raise ConfigurationError("need lr_main > lr_low >= 0")
        if self.distill_lambda < 0:
            raise ConfigurationError("distillation weight must be non-negative")
        if min(self.epochs, self.teacher_epochs, self.student_epochs) < 1:
            raise ConfigurationError("epoch counts must be at least 1")
        if self.architecture not in ("multi", "single"):
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "single" and len(self.layer_ids) != 1:
            raise ConfigurationError("the single-layer architecture takes exactly one layer id")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")

    @property
    def n_layers(self):
        return len(self.layer_ids)


@dataclass
class DataGenConfig:
    n_train: int = _section("data", 2000)
    n_eval: int = _section("data", 200)
    scene: SceneSpec = _section("scene", factory=SceneSpec)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return "; ".join(" ".join(str(v) for v in item) for item in value)
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (tuple, list)):
            if default and isinstance(default[0], (tuple, list)):
                return tuple(tuple(int(v) for v in item.replace(",", " ").split()) for item in text.split(";") if item.strip())
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(int(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key!r}: {text!r}") from exc


def _nested_fields(cls):
    """``{section: (attribute or None, dataclass)}`` -- nested dataclass sections."""
    out = {}
    for f in dataclasses.fields(cls):
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            out[f.metadata["section"]] = (f.name, f.default_factory)
    return out


def _flat_fields(cls):
    nested = {name for name, _ in _nested_fields(cls).values()}
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in nested}


def from_ini_text(cls, text):
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    nested = _nested_fields(cls)
    flat = _flat_fields(cls)
    flat_sections = {f.metadata["section"] for f in flat.values()}
    kwargs = {}
    nested_kwargs = {name: {} for name, _ in nested.values()}
    for section in parser.sections():
        if section in nested:
            attr, sub = nested[section]
            defaults = {f.name: f.default for f in dataclasses.fields(sub)}
            for key, value in parser.items(section):
                if key not in defaults:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                nested_kwargs[attr][key] = _parse_value(value, defaults[key], key)
        elif section in flat_sections:
            for key, value in parser.items(section):
                f = flat.get(key)
                if f is None or f.metadata["section"] != section:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                kwargs[key] = _parse_value(value, f.default, key)
        else:
            raise ConfigurationError(f"unknown section [{section}]")
    for attr, sub in ((a, s) for a, s in nested.values()):
        kwargs[attr] = sub(**nested_kwargs[attr])
    return cls(**kwargs)


def to_ini_text(obj):
    """Canonical serialisation: every field, fixed order."""
    cls = type(obj)
    sections = {}
    for f in dataclasses.fields(cls):
        value = getattr(obj, f.name)
        section = f.metadata["section"]
        if dataclasses.is_dataclass(value):
            sections.setdefault(section, [])
            for sf in dataclasses.fields(value):
                sections[section].append((sf.name, _format_value(getattr(value, sf.name))))
        else:
            sections.setdefault(section, []).append((f.name, _format_value(value)))
    buf = io.StringIO()
    for section, items in sections.items():
        buf.write(f"[{section}]\n")
        for key, value in items:
            buf.write(f"{key} = {value}\n")
        buf.write("\n")
    return buf.getvalue()


def load_config(cls, path):
    with open(path, encoding="utf-8") as fh:
        return from_ini_text(cls, fh.read())


def config_hash(obj):
    return hashlib.sha256(to_ini_text(obj).encode()).hexdigest()[:16]


def replace(obj, **changes):
    """``dataclasses.replace`` that also accepts ``backend__<field>`` for the nested backend."""
    nested = {k.split("__", 1)[1]: v for k, v in changes.items() if k.startswith("backend__")}
    flat = {k: v for k, v in changes.items() if not k.startswith("backend__")}
    if nested:
        flat["backend"] = dataclasses.replace(obj.backend, **nested)
    return dataclasses.replace(obj, **flat)
