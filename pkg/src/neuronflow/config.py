"""TOML experiment configuration.

One file describes one experiment::

    seed = 0

    [model]                 # or: container = "model.nfm" to take the spec from a file
    n_layers = 4
    d_model = 4096
    d_ffn = 14336
    dtype = "int4-group"

    [skew]                  # optional SkewParams overrides
    base_sparsity = 0.42

    [hardware]              # optional: profile = "phone.toml" and/or inline profile tables
    [hardware.memory]
    combined_gbps = 59.6

    [run]
    batch_schedule = [1, 1, 1, 1]
    offload_fraction = 0.5
    profile_tokens = 64
    plan = "plan.json"      # optional; generated from a profiling trace otherwise

    [policy]
    bundle = true
    cache = true
    pipeline = "cluster_level"
    xpu = true

    [prefill]
    prompt_len = 512

    [gen_model]             # shapes for gen-model (full-size weights are large)
    n_layers = 2
    d_model = 64
    d_ffn = 256

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .engine import PolicyFlags, RunConfig, build_run_config
from .errors import ConfigError, NeuronFlowError
from .hardware import HardwareProfile, load_profile
from .model import ModelSpec, SkewParams, default_skew, read_model
from .planner import ExecutionPlan

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SECTIONS = {"seed", "model", "skew", "hardware", "run", "policy", "prefill", "gen_model"}
RUN_KEYS = {"batch_schedule", "offload_fraction", "profile_tokens", "fixed_bytes", "plan",
            "cold_cluster_size", "hot_cluster_size", "clusters_per_matrix", "record_events"}
POLICY_KEYS = {"bundle", "cache", "pipeline", "xpu", "coactivation"}
DEFAULT_MODEL = {"n_layers": 4, "d_model": 4096, "d_ffn": 14336, "dtype": "int4-group"}
U64_MAX = 2 ** 64 - 1


@dataclass(frozen=True)
class Experiment:
    """A parsed, validated config.  ``raw`` is the TOML as loaded, for hashing."""

    seed: int
    spec: ModelSpec
    skew: SkewParams
    hw: HardwareProfile
    flags: PolicyFlags
    run: dict = field(default_factory=dict)
    prompt_len: int = 512
    gen_model: ModelSpec | None = None
    plan: ExecutionPlan | None = None
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps({"config": self.raw, "seed": self.seed}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_config(self, **overrides) -> RunConfig:
        """Profile, plan (unless a plan file was given) and sample the decode trace."""
        run = {**self.run, **overrides}
        run.pop("plan", None)
        cfg = build_run_config(self.spec, run.pop("batch_schedule"), skew=self.skew, hw=self.hw,
                               flags=run.pop("flags", self.flags), **run)
        if self.plan is not None:
            missing = set(cfg.batch_schedule) - set(self.plan.batch_sizes)
            if missing:
                raise ConfigError(f"plan file has no entry for batch sizes {sorted(missing)}")
            cfg = replace(cfg, plan=self.plan)
        return cfg


def _table(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _unknown(table: dict, allowed: set, where: str) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def parse(data: dict, base: Path = Path("."), seed: int | None = None) -> Experiment:
    """Validate a loaded TOML document; every failure surfaces as ConfigError."""
    try:
        return _parse(data, base, seed)
    except ConfigError:
        raise
    except (NeuronFlowError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc


def _parse(data: dict, base: Path, seed: int | None) -> Experiment:
    _unknown(data, SECTIONS, "config")
    seed = int(data.get("seed", 0)) if seed is None else int(seed)
    if not 0 <= seed <= U64_MAX:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")

    model = dict(_table(data, "model"))
    if "container" in model:
        path = base / model.pop("container")
        if not path.is_file():
            raise ConfigError(f"model container not found: {path}")
        spec = read_model(path)[0]
        spec = replace(spec, **{k: v for k, v in model.items()})
    else:
        _unknown(model, {"n_layers", "d_model", "d_ffn", "dtype"}, "[model]")
        spec = ModelSpec.from_dict({**DEFAULT_MODEL, **model})
    spec = replace(spec, seed=seed)

    skew_t = _table(data, "skew")
    skew = SkewParams.from_dict({**default_skew().to_dict(), **skew_t}) if skew_t else default_skew()

    hw_t = dict(_table(data, "hardware"))
    profile = hw_t.pop("profile", None)
    if profile is not None:
        hw = load_profile(base / profile)
        if hw_t:
            merged = hw.to_dict()
            for k, v in hw_t.items():
                merged[k] = {**merged.get(k, {}), **v} if isinstance(v, dict) else v
            hw = HardwareProfile.from_dict(merged)
    else:
        hw = HardwareProfile.from_dict(hw_t)

    run = dict(_table(data, "run"))
    _unknown(run, RUN_KEYS, "[run]")
    run.setdefault("batch_schedule", [1] * 16)
    sched = run["batch_schedule"]
    if not isinstance(sched, list) or not sched or not all(isinstance(b, int) and b >= 1 for b in sched):
        raise ConfigError("[run] batch_schedule must be a non-empty list of positive integers")
    off = float(run.setdefault("offload_fraction", 0.5))
    if not 0.0 <= off <= 1.0:
        raise ConfigError("[run] offload_fraction must lie in [0, 1]")
    plan = None
    if "plan" in run:
        path = base / run["plan"]
        if not path.is_file():
            raise ConfigError(f"plan file not found: {path}")
        plan = ExecutionPlan.load(path)

    pol = _table(data, "policy")
    _unknown(pol, POLICY_KEYS, "[policy]")
    flags = PolicyFlags(**pol)

    pre = _table(data, "prefill")
    _unknown(pre, {"prompt_len"}, "[prefill]")
    prompt_len = int(pre.get("prompt_len", 512))
    if prompt_len < 1:
        raise ConfigError("[prefill] prompt_len must be >= 1")

    gm = _table(data, "gen_model")
    _unknown(gm, {"n_layers", "d_model", "d_ffn"}, "[gen_model]")
    gen = ModelSpec.from_dict({"n_layers": 2, "d_model": 64, "d_ffn": 256, **gm, "seed": seed})

    return Experiment(seed=seed, spec=spec, skew=skew, hw=hw, flags=flags, run=run,
                      prompt_len=prompt_len, gen_model=gen, plan=plan, raw=data)


def load(path: str | Path | None, seed: int | None = None) -> Experiment:
    """Load a config file; ``None`` gives the built-in defaults."""
    if path is None:
        return parse({}, seed=seed)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse(data, path.parent, seed)
