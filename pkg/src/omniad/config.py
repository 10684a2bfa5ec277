"""Flat key=value run configuration covering network, training and eval.

The on-disk form is one ``key = value`` pair per line; ``#`` starts a
comment.  Unknown keys are rejected by name, every key has a documented
default, and ``parse_config(serialize_config(c)) == c`` holds exactly.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError
from .network import NetworkConfig


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text):
    return tuple(int(p.strip()) for p in text.split(","))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    int: int,
    float: float,
    bool: _parse_bool,
    str: lambda s: s.strip(),
    tuple: _parse_int_tuple,
}


@dataclass(frozen=True)
class RunConfig:
    # network
    input_h: int = 256
    input_w: int = 256
    channel_base: int = 64
    depths: tuple = (3, 9, 9, 7)
    token_count: int = 64
    heads: int = 4
    decouple_order: str = "Q+KV"
    global_branch: bool = True
    local_branch: bool = True
    provider: str = "synthetic-cnn"
    provider_seed: int = 7
    feature_dir: str = ""
    # optimization
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    # synthetic corpus
    corpus_classes: int = 3
    corpus_train: int = 64
    corpus_test: int = 40
    corpus_seed: int = 0
    # anomaly map / metrics
    sigma: float = 4.0
    fpr_cap: float = 0.3

    def replace(self, **kw):
        from dataclasses import replace as _replace
        return _replace(self, **kw)

    def network_config(self):
        return NetworkConfig(
            input_h=self.input_h, input_w=self.input_w,
            channel_base=self.channel_base, depths=self.depths,
            token_count=self.token_count, n_heads=self.heads,
            decouple_order=self.decouple_order,
            global_enabled=self.global_branch, local_enabled=self.local_branch,
            provider=self.provider, provider_seed=self.provider_seed,
            feature_dir=self.feature_dir)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}


def parse_config(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        ftype = _TYPE_NAMES.get(_FIELD_TYPES[key], _FIELD_TYPES[key])
        try:
            values[key] = _PARSERS[ftype](value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for key {key!r}: {exc}") from exc
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except Exception as exc:  # dataclass/NetworkConfig validation
        raise ConfigError(str(exc)) from exc


def serialize_config(cfg):
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
