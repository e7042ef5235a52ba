"""Encoder / generator / two-critic Wasserstein GAN over standardized feature vectors.

Networks (defaults):

* encoder E: 186 -> 40 -> 10, batchnorm + ReLU between the affine layers
* generator G: 10 -> 128 -> 186, batchnorm + ReLU between the affine layers
* data critic C1: 186 -> 100 -> 10 -> 1 with ReLU
* latent critic C2: a single affine map 10 -> 1

Each outer step runs ``n_critic`` critic updates (C1 separates real rows from
G(z), C2 separates prior draws z ~ N(0, I) from E(x)), clips both critics to
[-c, c], then one joint E/G update on

    -mean C1(G(z)) - mean C2(E(x)) + alpha * mean ||x - G(E(x))||^2

Only the Wasserstein critic objective is implemented; the saturating
log-loss GAN objective is not.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from powerprof.artifacts import load_artifact, payload_digest, save_artifact
from powerprof.errors import ConfigError, DataError, NumericError
from powerprof.features import N_FEATURES, Scaler
from powerprof.neural import Network, RMSProp, clip_weights

log = logging.getLogger(__name__)

ARTIFACT_KIND = "gan_model"


@dataclass
class GanConfig:
    input_dim: int = N_FEATURES
    latent_dim: int = 10
    encoder_hidden: int = 40
    generator_hidden: int = 128
    critic_hidden: tuple[int, int] = (100, 10)
    n_critic: int = 5
    clip: float = 0.01
    alpha: float = 10.0
    lr: float = 2e-4
    critic_lr: float = 5e-5
    rho: float = 0.9
    batch_size: int = 64
    epochs: int = 60
    seed: int = 0
    # debug switch: 0 trains E/G as a plain autoencoder (critics still step)
    adversarial_weight: float = 1.0
    # standardized inputs are winsorized to [-input_clip, input_clip]; rare-event
    # swing columns have tiny stds and would otherwise yield z-scores in the hundreds
    input_clip: float | None = 10.0

    def __post_init__(self):
        self.critic_hidden = tuple(self.critic_hidden)
        if self.latent_dim >= self.input_dim:
            raise ConfigError("latent_dim must be smaller than input_dim")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.batch_size < 2 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 2 and epochs >= 0")
        if self.input_clip is not None and self.input_clip <= 0:
            raise ConfigError("input_clip must be positive or null")

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad GAN config: {exc}") from None


def prepare(cfg: GanConfig, X) -> np.ndarray:
    """Standardized rows as the networks see them (winsorized when configured)."""
    X = np.asarray(X, dtype=np.float64)
    if cfg.input_clip is None:
        return X
    return np.clip(X, -cfg.input_clip, cfg.input_clip)


def build_networks(cfg: GanConfig, rng: np.random.Generator) -> dict[str, Network]:
    return {
        "encoder": Network.mlp([cfg.input_dim, cfg.encoder_hidden, cfg.latent_dim], rng, batchnorm=True),
        "generator": Network.mlp([cfg.latent_dim, cfg.generator_hidden, cfg.input_dim], rng, batchnorm=True),
        "critic_x": Network.mlp([cfg.input_dim, *cfg.critic_hidden, 1], rng),
        "critic_z": Network.mlp([cfg.latent_dim, 1], rng),
    }


@dataclass
class GanModel:
    encoder: Network
    generator: Network
    critic_x: Network
    critic_z: Network
    config: GanConfig
    scaler: Scaler | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def scaler_id(self) -> str | None:
        return None if self.scaler is None else payload_digest(self.scaler.to_dict())

    def networks(self) -> dict[str, Network]:
        return {
            "encoder": self.encoder,
            "generator": self.generator,
            "critic_x": self.critic_x,
            "critic_z": self.critic_z,
        }

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.config.seed,
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "scaler_id": self.scaler_id,
            "networks": {k: v.to_dict() for k, v in self.networks().items()},
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GanModel":
        nets = {k: Network.from_dict(v) for k, v in d["networks"].items()}
        return cls(
            config=GanConfig.from_dict(d["config"]),
            scaler=None if d.get("scaler") is None else Scaler.from_dict(d["scaler"]),
            history=list(d.get("history", [])),
            **nets,
        )

    def save(self, path) -> None:
        save_artifact(path, ARTIFACT_KIND, self.to_dict())

    @classmethod
    def load(cls, path) -> "GanModel":
        return cls.from_dict(load_artifact(path, ARTIFACT_KIND))


def _check_finite(value: float, what: str, epoch: int, history: list[dict]) -> None:
    if not np.isfinite(value):
        dump = history[-3:]
        raise NumericError(f"non-finite {what} at epoch {epoch}; recent history: {dump}")


def _critic_step(net: Network, real, fake, opt: RMSProp, clip: float) -> float:
    """One critic update maximizing mean net(real) - mean net(fake); returns that gap."""
    n_r, n_f = len(real), len(fake)
    net.zero_grad()
    s_real = net.forward(real, training=True)
    net.backward(np.full_like(s_real, -1.0 / n_r))
    s_fake = net.forward(fake, training=True)
    net.backward(np.full_like(s_fake, 1.0 / n_f))
    opt.step_networks([net])
    clip_weights(net, clip)
    return float(s_real.mean() - s_fake.mean())


def reconstruction_mse(model: GanModel, X: np.ndarray) -> float:
    """Mean squared error per feature of G(E(x)) against the prepared rows, in inference mode."""
    return float(np.mean((reconstruct(model, X) - prepare(model.config, X)) ** 2))


def train(features: np.ndarray, cfg: GanConfig | None = None, scaler: Scaler | None = None) -> GanModel:
    """Train on an already standardized feature matrix."""
    cfg = cfg or GanConfig()
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise DataError(f"expected a feature matrix with {cfg.input_dim} columns, got {X.shape}")
    if len(X) < 10 * cfg.batch_size:
        raise DataError(f"need at least {10 * cfg.batch_size} rows (10 x batch size), got {len(X)}")
    if not np.isfinite(X).all():
        raise DataError("feature matrix contains non-finite values")
    if np.abs(X.mean(axis=0)).max() > 1e-6:
        log.warning("GAN input does not look standardized (max |column mean| = %.3g)", np.abs(X.mean(0)).max())
    X = prepare(cfg, X)

    rng = np.random.default_rng(cfg.seed)
    nets = build_networks(cfg, rng)
    E, G, C1, C2 = nets["encoder"], nets["generator"], nets["critic_x"], nets["critic_z"]
    model = GanModel(E, G, C1, C2, cfg, scaler)
    opt_c1 = RMSProp(cfg.critic_lr, cfg.rho)
    opt_c2 = RMSProp(cfg.critic_lr, cfg.rho)
    opt_eg = RMSProp(cfg.lr, cfg.rho)
    # critics start inside the clip box like every later state
    clip_weights(C1, cfg.clip)
    clip_weights(C2, cfg.clip)

    B, d, w = cfg.batch_size, cfg.latent_dim, cfg.adversarial_weight
    n_batches = len(X) // B
    model.history.append({"epoch": 0, "recon_mse": reconstruction_mse(model, X)})

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        gap_x, gap_z, eg_loss = [], [], []
        for k in range(n_batches):
            x = X[order[k * B : (k + 1) * B]]
            for _ in range(cfg.n_critic):
                z = rng.standard_normal((B, d))
                fake_x = G.forward(z, training=True, update_stats=False)
                enc_z = E.forward(x, training=True, update_stats=False)
                gap_x.append(_critic_step(C1, x, fake_x, opt_c1, cfg.clip))
                gap_z.append(_critic_step(C2, z, enc_z, opt_c2, cfg.clip))

            z = rng.standard_normal((B, d))
            E.zero_grad()
            G.zero_grad()
            ze = E.forward(x, training=True)
            s_z = C2.forward(ze, training=True)
            g_ze = C2.backward(np.full_like(s_z, -w / B))
            xr = G.forward(ze, training=True)
            resid = xr - x
            g_ze = g_ze + G.backward(2.0 * cfg.alpha * resid / B)
            E.backward(g_ze)
            xg = G.forward(z, training=True)
            s_x = C1.forward(xg, training=True)
            G.backward(C1.backward(np.full_like(s_x, -w / B)))
            opt_eg.step_networks([E, G])
            C1.zero_grad()
            C2.zero_grad()
            eg_loss.append(
                float(-w * s_x.mean() - w * s_z.mean() + cfg.alpha * np.mean(np.sum(resid**2, axis=1)))
            )

        entry = {
            "epoch": epoch,
            "wasserstein_x": float(np.mean(gap_x)),
            "wasserstein_z": float(np.mean(gap_z)),
            "eg_loss": float(np.mean(eg_loss)),
            "recon_mse": reconstruction_mse(model, X),
        }
        for key in ("wasserstein_x", "wasserstein_z", "eg_loss", "recon_mse"):
            _check_finite(entry[key], key, epoch, model.history)
        model.history.append(entry)
        log.debug("gan epoch %d: %s", epoch, entry)
    return model


def encode(model: GanModel, x) -> np.ndarray:
    """Latent vectors for standardized rows (inference mode, deterministic)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.config.input_dim:
        raise DataError(f"dimension mismatch: encoder expects {model.config.input_dim} features, got {x.shape[1]}")
    return model.encoder.forward(prepare(model.config, x), training=False)


def reconstruct(model: GanModel, x) -> np.ndarray:
    return model.generator.forward(encode(model, x), training=False)


def embed_raw(model: GanModel, X_raw) -> np.ndarray:
    """Standardize raw feature rows with the model's scaler, then encode."""
    if model.scaler is None:
        raise DataError("model has no scaler; pass standardized features to encode()")
    return encode(model, model.scaler.transform(X_raw))


def distribution_check(real, recon) -> list[dict]:
    """Per-feature summary comparing real and reconstructed columns."""
    real = np.asarray(real, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if real.ndim != 2 or recon.ndim != 2 or real.shape[1] != recon.shape[1]:
        raise DataError("distribution_check needs two matrices of equal width")
    report = []
    for j in range(real.shape[1]):
        ks = stats.ks_2samp(real[:, j], recon[:, j]).statistic
        report.append(
            {
                "feature": j,
                "mean_real": float(real[:, j].mean()),
                "mean_recon": float(recon[:, j].mean()),
                "std_real": float(real[:, j].std()),
                "std_recon": float(recon[:, j].std()),
                "ks": float(ks),
            }
        )
    return report


def mean_match_fraction(report: list[dict], tol: float = 0.15, degenerate_std: float = 1e-12) -> float:
    """Fraction of non-degenerate features with |mean_recon - mean_real| <= tol * std_real."""
    rows = [r for r in report if r["std_real"] > degenerate_std]
    if not rows:
        return 1.0
    ok = sum(abs(r["mean_recon"] - r["mean_real"]) <= tol * r["std_real"] for r in rows)
    return ok / len(rows)
