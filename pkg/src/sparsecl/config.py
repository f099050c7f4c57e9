"""Run configuration: a flat set of named hyperparameters.

Config files are flat YAML mappings using the same keys as
:class:`TrainConfig`; CLI flags override file values.  ``None`` for ``s``,
``q`` or ``rho`` means "use the method default": baselines (``sgd``, ``er``,
``derpp``) run dense with no data removal, ``sparcl-*`` runs at ``s=0.75``
with ``rho=0.3`` and the gradient sparsity paired to ``s``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import yaml

from .errors import ArgumentError

METHODS = ("sgd", "er", "derpp", "sparcl-er", "sparcl-derpp")
ARCHS = ("mlp", "cnn")
# extra gradient sparsity paired with each weight sparsity
Q_PAIRING = {0.75: 0.05, 0.90: 0.02}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "sparcl-er"
    s: float | None = None
    q: float | None = None
    rho: float | None = None
    cutoff: int = 4
    removal: str = "ddr"  # or "one-shot"
    counter_reset: str = "stage"  # or "cumulative"
    delta_k: int = 5
    p_intra: float = 0.005
    p_inter: float = 0.01
    alpha: float = 0.5
    beta: float = 1.0
    coeff_mse: float = 0.5
    coeff_ce: float = 0.5
    epochs: int = 5
    batch_size: int = 32
    buffer: int = 200
    lr: float = 0.03
    seed: int = 0
    precision: str = "f32"
    arch: str = "mlp"
    hidden: int = 256
    cwi_batches: int = 10

    @property
    def sparse_method(self) -> bool:
        return self.method.startswith("sparcl-")

    @property
    def replay(self) -> str | None:
        base = self.method.removeprefix("sparcl-")
        return None if base == "sgd" else base

    def resolved(self) -> "TrainConfig":
        """Fill method defaults for ``s``/``q``/``rho`` and validate."""
        s, q, rho = self.s, self.q, self.rho
        if s is None:
            s = 0.75 if self.sparse_method else 0.0
        if q is None:
            q = Q_PAIRING.get(round(s, 4), 0.0) if self.sparse_method else 0.0
        if rho is None:
            rho = 0.3 if self.sparse_method else 0.0
        cfg = replace(self, s=float(s), q=float(q), rho=float(rho))
        cfg.validate()
        return cfg

    def validate(self):
        def bad(msg):
            raise ArgumentError(f"invalid config: {msg}")

        if self.method not in METHODS:
            bad(f"method must be one of {METHODS}")
        if self.arch not in ARCHS:
            bad(f"arch must be one of {ARCHS}")
        if self.precision not in ("f32", "f64"):
            bad("precision must be f32 or f64")
        s, q, rho = self.s or 0.0, self.q or 0.0, self.rho or 0.0
        if not 0 <= s < 1:
            bad("s must be in [0, 1)")
        if self.sparse_method and s <= 0:
            bad("sparcl-* methods need s > 0")
        if q < 0 or s + q >= 1:
            bad("need q >= 0 and s + q < 1")
        if not 0 <= rho <= 1:
            bad("rho must be in [0, 1]")
        if self.sparse_method and self.p_inter > s:
            bad("p_inter cannot exceed s")
        if self.p_intra < 0 or self.p_inter < 0:
            bad("p_intra and p_inter must be non-negative")
        if self.removal not in ("ddr", "one-shot"):
            bad("removal must be 'ddr' or 'one-shot'")
        if self.counter_reset not in ("stage", "cumulative"):
            bad("counter_reset must be 'stage' or 'cumulative'")
        for name in ("cutoff", "delta_k", "epochs", "batch_size", "hidden", "cwi_batches"):
            if getattr(self, name) < 1:
                bad(f"{name} must be >= 1")
        if self.buffer < 0:
            bad("buffer must be >= 0")
        if not self.lr > 0:
            bad("lr must be positive")
        if self.coeff_mse < 0 or self.coeff_ce < 0:
            bad("replay coefficients must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> dict:
    """Read a flat YAML mapping; nested values are rejected."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ArgumentError(f"{path}: config must be a mapping")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise ArgumentError(f"{path}: key {k!r} must be a scalar")
    return {k.replace("-", "_"): v for k, v in data.items()}
