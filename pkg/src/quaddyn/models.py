"""History-windowed dynamics predictors.

Model state rows are ``(v, omega, q)``: linear velocity (3), body angular
velocity (3) and attitude quaternion (4, w first).  Action rows are the
four motor speeds already scaled by 1e-3.  Position is never an input.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import quat
from .autodiff import Tensor
from .nn import MLP, GRULayer, LSTMLayer, MLPEncoder, Module, RecurrentEncoder, TCNEncoder

log = logging.getLogger(__name__)

STATE_DIM = 10
ACTION_DIM = 4
VEL = slice(0, 6)
ATT = slice(6, 10)
FEATURE_GROUPS = (("v", slice(0, 3)), ("omega", slice(3, 6)), ("q", slice(6, 10)))

ARCHS = ("mlp", "lstm", "gru", "tcn")
HEADS = ("full_state", "multi_head", "decoupled")

FULL_LAYERS = {
    "mlp": (1024, 512, 512),
    "lstm": (512, 512, 512),
    "gru": (512, 512, 512),
    "tcn": (512, 256, 256),
}
FULL_DECODER = (512, 256, 256)

# small widths for CPU experiments; same depth as the full sizes
DESK_LAYERS = {
    "mlp": (64, 64, 64),
    "lstm": (32, 32, 32),
    "gru": (32, 32, 32),
    "tcn": (32, 32, 32),
}
DESK_DECODER = (64, 32, 32)

PARAM_BOUND = 5_200_000
UNIT_TOL = 1e-6


class HistoryLengthError(ValueError):
    pass


class NonUnitQuaternionError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "tcn"
    layer_sizes: tuple = None
    kernel: int = 3
    dilation_base: int = 2
    history: int = 20
    # (v, omega, q) input groups; motor speeds are always fed
    feature_mask: tuple = (True, True, True)

    def __post_init__(self):
        if self.kind not in ARCHS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ARCHS}")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.layer_sizes is None:
            object.__setattr__(self, "layer_sizes", FULL_LAYERS[self.kind])
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "feature_mask", tuple(bool(m) for m in self.feature_mask))
        if len(self.feature_mask) != 3:
            raise ValueError("feature_mask needs three flags (v, omega, q)")

    @property
    def n_features(self):
        return ACTION_DIM + sum(
            (sl.stop - sl.start) for (_, sl), on in zip(FEATURE_GROUPS, self.feature_mask) if on
        )


@dataclass(frozen=True)
class ModelConfig:
    head: str = "decoupled"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_sizes: tuple = FULL_DECODER

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        object.__setattr__(self, "decoder_sizes", tuple(int(s) for s in self.decoder_sizes))

    def to_dict(self):
        d = asdict(self)
        d["encoder"]["layer_sizes"] = list(self.encoder.layer_sizes)
        d["encoder"]["feature_mask"] = list(self.encoder.feature_mask)
        d["decoder_sizes"] = list(self.decoder_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        enc = dict(d["encoder"])
        enc["layer_sizes"] = tuple(enc["layer_sizes"])
        enc["feature_mask"] = tuple(enc["feature_mask"])
        return cls(head=d["head"], encoder=EncoderConfig(**enc),
                   decoder_sizes=tuple(d["decoder_sizes"]))


def model_config(arch, history, head="decoupled", preset="full", feature_mask=(True, True, True)):
    if preset not in ("full", "desk"):
        raise ValueError(f"unknown preset {preset!r}; expected 'full' or 'desk'")
    layers = (FULL_LAYERS if preset == "full" else DESK_LAYERS)[arch]
    decoder = FULL_DECODER if preset == "full" else DESK_DECODER
    enc = EncoderConfig(kind=arch, layer_sizes=layers, history=history, feature_mask=feature_mask)
    return ModelConfig(head=head, encoder=enc, decoder_sizes=decoder)


def build_encoder(cfg: EncoderConfig, rng):
    f = cfg.n_features
    if cfg.kind == "mlp":
        return MLPEncoder(f, cfg.history, cfg.layer_sizes, rng)
    if cfg.kind == "lstm":
        return RecurrentEncoder(LSTMLayer, f, cfg.layer_sizes, rng)
    if cfg.kind == "gru":
        return RecurrentEncoder(GRULayer, f, cfg.layer_sizes, rng)
    return TCNEncoder(f, cfg.history, cfg.layer_sizes, cfg.kernel, cfg.dilation_base, rng)


class Network(Module):
    """Encoder followed by an MLP decoder with a zero-initialized output layer."""

    def __init__(self, enc_cfg, decoder_sizes, n_out, rng, out_bias=None):
        self.encoder = build_encoder(enc_cfg, rng)
        self.decoder = MLP(self.encoder.n_out, decoder_sizes, rng, out=n_out, out_bias=out_bias)

    def __call__(self, seq):
        return self.decoder(self.encoder(seq))


class PredictorModel(Module):
    """One-step residual predictor with a full-state, multi-head or
    decoupled head.

    ``step`` maps a window of ``history`` state rows (batch, H, 10) and
    action rows (batch, H, 4) to the predicted next state row (batch, 10).
    """

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.history = config.encoder.history
        rng = np.random.default_rng(seed)
        enc, dec = config.encoder, config.decoder_sizes
        if config.head == "decoupled":
            self.velocity = Network(enc, dec, 6, rng)
            # attitude increment starts at the identity rotation
            self.attitude = Network(enc, dec, 4, rng, out_bias=quat.IDENTITY)
        elif config.head == "multi_head":
            self.encoder = build_encoder(enc, rng)
            n = self.encoder.n_out
            self.velocity_decoder = MLP(n, dec, rng, out=6)
            self.attitude_decoder = MLP(n, dec, rng, out=4)
        else:
            self.encoder = build_encoder(enc, rng)
            self.decoder = MLP(self.encoder.n_out, dec, rng, out=STATE_DIM)
        for name, net in self.networks().items():
            count = sum(p.size for _, p in net.named_parameters())
            if count > PARAM_BOUND:
                warnings.warn(
                    f"{name} network has {count:,} parameters, above the "
                    f"{PARAM_BOUND:,} real-time bound",
                    stacklevel=2,
                )

    def networks(self):
        if self.config.head == "decoupled":
            return {"velocity": self.velocity, "attitude": self.attitude}
        return {"model": self}

    def _features(self, states, actions):
        mask = self.config.encoder.feature_mask
        if all(mask):
            return ad.concat([states, actions], axis=-1)
        parts = [states[:, :, sl] for (_, sl), on in zip(FEATURE_GROUPS, mask) if on]
        return ad.concat(parts + [actions], axis=-1)

    def check_input(self, states, actions):
        s = states.data if isinstance(states, Tensor) else np.asarray(states)
        a = actions.data if isinstance(actions, Tensor) else np.asarray(actions)
        if s.ndim != 3 or s.shape[2] != STATE_DIM or a.shape != s.shape[:2] + (ACTION_DIM,):
            raise ad.ShapeError("predict_one_step", s.shape, a.shape)
        if s.shape[1] != self.history:
            raise HistoryLengthError(
                f"history length {s.shape[1]} does not match model history {self.history}"
            )
        dev = np.abs(np.linalg.norm(s[:, :, ATT], axis=-1) - 1.0)
        if dev.size and dev.max() > UNIT_TOL:
            raise NonUnitQuaternionError(
                f"input quaternion deviates from unit norm by {dev.max():.3g}"
            )

    def step(self, states: Tensor, actions: Tensor) -> Tensor:
        self.check_input(states, actions)
        seq = self._features(states, actions)
        last = states[:, -1, :]
        z_t = last[:, VEL]
        q_t = last[:, ATT]
        head = self.config.head
        if head == "decoupled":
            z = z_t + self.velocity(seq)
            increment = ad.normalize_rows(self.attitude(seq))
            q = ad.quat_mul(increment, q_t)
        elif head == "multi_head":
            emb = self.encoder(seq)
            z = z_t + self.velocity_decoder(emb)
            q = ad.normalize_rows(q_t + self.attitude_decoder(emb))
        else:
            delta = self.decoder(self.encoder(seq))
            z = z_t + delta[:, VEL]
            q = ad.normalize_rows(q_t + delta[:, ATT])
        return ad.concat([z, q], axis=1)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def predict_one_step(model: PredictorModel, states, actions):
    """Next state rows (batch, 10) as an ndarray."""
    return model.step(_as_tensor(states), _as_tensor(actions)).data


def unroll(model: PredictorModel, states, actions, future_actions, steps):
    """Recursive prediction over ``steps`` steps.

    After each step the prediction is appended to the state window and the
    oldest row dropped; the action window advances with ``future_actions``
    (batch, >= steps - 1, 4), where row ``i`` is the action paired with the
    ``i``-th predicted state.  Returns the list of predicted rows; all ops
    are recorded when a tape is active.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    states, actions, future_actions = map(_as_tensor, (states, actions, future_actions))
    if future_actions.shape[1] < steps - 1:
        raise ValueError(
            f"need {steps - 1} future actions, got {future_actions.shape[1]}"
        )
    model.begin_unroll()
    b = states.shape[0]
    preds = []
    for i in range(steps):
        pred = model.step(states, actions)
        preds.append(pred)
        if i + 1 < steps:
            states = ad.concat([states[:, 1:, :], ad.reshape(pred, (b, 1, STATE_DIM))], axis=1)
            actions = ad.concat([actions[:, 1:, :], future_actions[:, i:i + 1, :]], axis=1)
    return preds


def rollout(model: PredictorModel, states, actions, future_actions, horizon):
    """Open-loop forecast (batch, horizon, 10) driven by ground-truth actions."""
    preds = unroll(model, states, actions, future_actions, horizon)
    return np.stack([p.data for p in preds], axis=1)


def count_parameters(model: Module) -> int:
    return sum(p.size for _, p in model.named_parameters())


def params_hash(model: Module) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.array(arr, dtype="<f8", order="C").tobytes())
    return h.hexdigest()


CHECKPOINT_VERSION = 1


def save_checkpoint(model: PredictorModel, directory, extra=None):
    """Write ``model.json`` plus ``params.bin``/``params.manifest`` to a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "quaddyn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "history": model.history,
        "n_parameters": count_parameters(model),
        "params_sha256": params_hash(model),
    }
    if extra:
        manifest.update(extra)
    ad.save_params(directory / "params", model.state_dict())
    (directory / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> PredictorModel:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    if manifest.get("format") != "quaddyn-checkpoint":
        raise ValueError(f"{directory}: not a quaddyn checkpoint")
    config = ModelConfig.from_dict(manifest["config"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = PredictorModel(config)
    model.load_state_dict(ad.load_params(directory / "params"))
    model.eval()
    return model
