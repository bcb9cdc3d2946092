"""TOML run configuration: load, apply dotted overrides, write back the resolved form."""
import sys

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .pipeline import CaseConfig
from .volume import ContractError

# keys that only locate inputs/outputs; kept out of written provenance so
# runs into different directories produce identical files
_LOCATION_KEYS = ("out_dir",)


def load_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _set(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ContractError(f"override {dotted!r} descends into a non-table")
    d[keys[-1]] = value


def apply_overrides(raw, overrides):
    """Apply ``{"a.b.c": value}`` overrides onto a nested dict (in place)."""
    for k, v in overrides.items():
        if v is not None:
            _set(raw, k, v)
    return raw


def case_config(raw):
    """Build a CaseConfig from the ``[case]`` table and its siblings."""
    raw = dict(raw)
    known = set(CaseConfig.__dataclass_fields__)
    body = {**raw.get("case", {})}
    for key in ("registration", "backend", "fit", "metrics"):
        if key in raw:
            body[key] = raw[key]
    for key in ("seed",):
        if key in raw:
            body[key] = raw[key]
    unknown = set(body) - known
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    return CaseConfig(**body)


def _clean(x):
    # TOML has no null
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items() if v is not None}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def resolved(cfg, extra=None):
    """The fully populated configuration as a nested dict, ready for TOML."""
    d = cfg.to_dict()
    out = {"seed": d.pop("seed")}
    for key in ("registration", "backend", "fit", "metrics"):
        out[key] = d.pop(key)
    out["case"] = d
    if extra:
        out.update({k: v for k, v in extra.items() if k not in _LOCATION_KEYS})
    return _clean(out)


def write_resolved(cfg, path, extra=None):
    with open(path, "wb") as fh:
        tomli_w.dump(resolved(cfg, extra), fh)
