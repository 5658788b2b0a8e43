"""Distance-regression CNN over stacked image pairs and LSTM heads over its embeddings."""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .sampling import Direction, window_target

BASE_CONV_SPECS: tuple[tuple[int, int, int], ...] = ((11, 5, 32), (9, 4, 64), (7, 3, 128), (5, 2, 256), (3, 1, 512))
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite activations, losses or gradients."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CnnConfig:
    conv_specs: tuple[tuple[int, int, int], ...] = BASE_CONV_SPECS
    pool: int = 2
    activation: str = "elu"
    dropout_rate: float = 0.15
    fc_widths: tuple[int, ...] = (512, 1)
    input_shape: tuple[int, int, int] = (120, 280, 6)  # (H, W, C)

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_specs", tuple(tuple(int(v) for v in s) for s in self.conv_specs))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        for k, p, f in self.conv_specs:
            if k % 2 == 0 or p != (k - 1) // 2 or f < 1:
                raise ValueError(f"conv spec {(k, p, f)} does not preserve spatial size")
        if self.fc_widths and self.fc_widths[-1] != 1:
            raise ValueError("last fully connected width must be 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def embedding_width(self) -> int:
        return self.fc_widths[-2] if len(self.fc_widths) >= 2 else flatten_width(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_specs"] = [list(s) for s in self.conv_specs]
        d["fc_widths"] = list(self.fc_widths)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        d = dict(d)
        d["conv_specs"] = tuple(tuple(s) for s in d.get("conv_specs", BASE_CONV_SPECS))
        d["fc_widths"] = tuple(d.get("fc_widths", (512, 1)))
        d["input_shape"] = tuple(d.get("input_shape", (120, 280, 6)))
        return cls(**d)


@dataclass(frozen=True)
class LstmConfig:
    direction: Direction = Direction.BIDIRECTIONAL
    window_length: int = 19
    hidden_width: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        window_target(self.window_length, self.direction)  # validates length

    @property
    def target_position(self) -> int:
        return window_target(self.window_length, self.direction)

    @property
    def num_directions(self) -> int:
        return 2 if self.direction is Direction.BIDIRECTIONAL else 1

    def to_dict(self) -> dict:
        return {"direction": self.direction.value, "window_length": self.window_length, "hidden_width": self.hidden_width}

    @classmethod
    def from_dict(cls, d: dict) -> "LstmConfig":
        return cls(**d)


ACTIVATIONS = {"elu": nn.ELU, "tanh": nn.Tanh}


def fingerprint(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_fingerprint(cnn: CnnConfig, lstm: LstmConfig | None = None) -> str:
    return fingerprint({"cnn": cnn.to_dict(), "lstm": None if lstm is None else lstm.to_dict()})


# -- shape and parameter arithmetic ------------------------------------------


def conv_output_shape(cfg: CnnConfig) -> tuple[int, int, int]:
    """(H, W, C) after the last pooling stage, floor division at odd sizes."""
    h, w, c = cfg.input_shape
    for _, _, f in cfg.conv_specs:
        h, w, c = h // cfg.pool, w // cfg.pool, f
    return h, w, c


def stage_shapes(cfg: CnnConfig) -> list[tuple[int, int]]:
    h, w, _ = cfg.input_shape
    shapes = [(h, w)]
    for _ in cfg.conv_specs:
        h, w = h // cfg.pool, w // cfg.pool
        shapes.append((h, w))
    return shapes


def flatten_width(cfg: CnnConfig) -> int:
    h, w, c = conv_output_shape(cfg)
    return h * w * c


def conv_param_counts(cfg: CnnConfig) -> list[int]:
    c_in = cfg.input_shape[2]
    out = []
    for k, _, f in cfg.conv_specs:
        out.append(k * k * c_in * f + f)
        c_in = f
    return out


def fc_param_counts(cfg: CnnConfig) -> list[int]:
    if not cfg.fc_widths:
        return []
    n_in = flatten_width(cfg)
    out = []
    for width in cfg.fc_widths:
        out.append(n_in * width + width)
        n_in = width
    return out


def lstm_param_count(cfg: LstmConfig, input_width: int) -> int:
    """Per direction: 4 gates x (input + recurrent weights + two bias vectors),
    plus the final linear map to one scalar."""
    h = cfg.hidden_width
    per_dir = 4 * h * (input_width + h) + 8 * h
    return cfg.num_directions * per_dir + (cfg.num_directions * h + 1)


def param_count(cfg: CnnConfig, lstm: LstmConfig | None = None) -> int:
    total = sum(conv_param_counts(cfg)) + sum(fc_param_counts(cfg))
    if lstm is not None:
        total += lstm_param_count(lstm, cfg.embedding_width)
    return total


# -- modules -----------------------------------------------------------------


def _init_linear_like(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        fan_in = m.weight[0].numel()
        std = math.sqrt(1.0 / fan_in)
        nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        nn.init.zeros_(m.bias)


class DistanceCNN(nn.Module):
    """Five conv/pool stages (kernels 11, 9, 7, 5, 3 by default) followed by fully connected layers.

    Input is channels-last ``[B, H, W, 6]``; returns distances ``[B]`` and the
    activation of the last hidden fc layer ``[B, embedding_width]``.
    """

    def __init__(self, cfg: CnnConfig):
        super().__init__()
        self.cfg = cfg
        act = ACTIVATIONS[cfg.activation]
        self.convs = nn.ModuleList()
        c_in = cfg.input_shape[2]
        for k, p, f in cfg.conv_specs:
            self.convs.append(nn.Conv2d(c_in, f, k, stride=1, padding=p))
            c_in = f
        self.act = act()
        self.pool = nn.MaxPool2d(cfg.pool, cfg.pool)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.fcs = nn.ModuleList()
        n_in = flatten_width(cfg)
        for width in cfg.fc_widths:
            self.fcs.append(nn.Linear(n_in, width))
            n_in = width
        self.apply(_init_linear_like)
        self.check_finite = True

    def _guard(self, x: torch.Tensor, name: str) -> torch.Tensor:
        if self.check_finite and not torch.isfinite(x).all():
            raise NumericalError(f"non-finite activation after layer {name}")
        return x

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"expected input [B, {', '.join(map(str, self.cfg.input_shape))}], got {list(x.shape)}")
        x = x.permute(0, 3, 1, 2)
        for i, conv in enumerate(self.convs, start=1):
            x = self._guard(self.drop(self.pool(self.act(conv(x)))), f"conv{i}")
        x = torch.flatten(x, 1)
        emb = x
        for i, fc in enumerate(self.fcs, start=1):
            x = fc(x)
            if i < len(self.fcs):
                x = self._guard(self.act(x), f"fc{i}")
                emb = x
                x = self.drop(x)
        self._guard(x, f"fc{len(self.fcs)}")
        return x.reshape(-1), emb


class DistanceLSTM(nn.Module):
    """Many-to-one (bi)LSTM over per-pair CNN embeddings of a window."""

    def __init__(self, cnn_cfg: CnnConfig, lstm_cfg: LstmConfig):
        super().__init__()
        self.cnn = DistanceCNN(cnn_cfg)
        self.lstm_cfg = lstm_cfg
        self.lstm = nn.LSTM(
            cnn_cfg.embedding_width,
            lstm_cfg.hidden_width,
            num_layers=1,
            batch_first=True,
            bidirectional=lstm_cfg.direction is Direction.BIDIRECTIONAL,
        )
        self.head = nn.Linear(lstm_cfg.num_directions * lstm_cfg.hidden_width, 1)
        _init_linear_like(self.head)

    def forward_embeddings(self, emb: torch.Tensor) -> torch.Tensor:
        """``emb`` is ``[B, L, E]``; returns ``[B]``."""
        if emb.dim() != 3 or emb.shape[1] != self.lstm_cfg.window_length:
            raise ValueError(f"expected window length {self.lstm_cfg.window_length}, got shape {list(emb.shape)}")
        out, _ = self.lstm(emb)
        return self.head(out[:, self.lstm_cfg.target_position]).reshape(-1)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """``windows`` is ``[B, L, H, W, 6]``."""
        b, length = windows.shape[:2]
        _, emb = self.cnn(windows.reshape(b * length, *windows.shape[2:]))
        return self.forward_embeddings(emb.reshape(b, length, -1))


def cnn_forward(model: DistanceCNN, batch, mode: str = "eval") -> tuple[torch.Tensor, torch.Tensor]:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    model.train(mode == "train")
    x = torch.as_tensor(np.asarray(batch, dtype=np.float32)) if not isinstance(batch, torch.Tensor) else batch
    if mode == "eval":
        with torch.no_grad():
            return model(x)
    return model(x)


def lstm_forward(model: DistanceLSTM, window_embeddings) -> float:
    """Evaluate the recurrent head on one window of embeddings ``[L, E]``."""
    model.eval()
    e = torch.as_tensor(np.asarray(window_embeddings, dtype=np.float32)) if not isinstance(window_embeddings, torch.Tensor) else window_embeddings
    if e.dim() != 2:
        raise ValueError(f"expected [L, E] embeddings, got {list(e.shape)}")
    with torch.no_grad():
        return float(model.forward_embeddings(e[None])[0])


def build_model(cnn_cfg: CnnConfig, lstm_cfg: LstmConfig | None = None, seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    return DistanceCNN(cnn_cfg) if lstm_cfg is None else DistanceLSTM(cnn_cfg, lstm_cfg)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    """Named parameter arrays plus the configuration they belong to.

    Serialized as a ``.npz`` archive: ``param/<name>`` and ``optim/<name>``
    arrays and a ``__meta__`` JSON string (format version, step, configs,
    fingerprints, optimizer hyperparameters).
    """

    params: dict[str, np.ndarray]
    cnn_config: CnnConfig
    lstm_config: LstmConfig | None = None
    step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @property
    def kind(self) -> str:
        return "cnn" if self.lstm_config is None else "lstm"

    @property
    def config_fingerprint(self) -> str:
        return config_fingerprint(self.cnn_config, self.lstm_config)

    def param_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]

    def meta(self) -> dict:
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "step": self.step,
            "cnn_config": self.cnn_config.to_dict(),
            "lstm_config": None if self.lstm_config is None else self.lstm_config.to_dict(),
            "config_fingerprint": self.config_fingerprint,
            "cnn_fingerprint": config_fingerprint(self.cnn_config),
            "param_fingerprint": self.param_fingerprint(),
            "extra": self.extra,
        }

    def save(self, path: str | Path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"optim/{k}": v for k, v in self.optimizer_state.items()})
        arrays["__meta__"] = np.array(json.dumps(self.meta(), sort_keys=True))
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["__meta__"]))
                params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
                optim = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')!r}")
        ckpt = cls(
            params,
            CnnConfig.from_dict(meta["cnn_config"]),
            None if meta["lstm_config"] is None else LstmConfig.from_dict(meta["lstm_config"]),
            int(meta["step"]),
            optim,
            meta.get("extra", {}),
        )
        if ckpt.config_fingerprint != meta["config_fingerprint"]:
            raise CheckpointError("config fingerprint mismatch: checkpoint metadata is inconsistent")
        return ckpt

    @classmethod
    def from_model(cls, model: nn.Module, step: int = 0, optimizer_state: dict | None = None, extra: dict | None = None) -> "ModelCheckpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        if isinstance(model, DistanceLSTM):
            cnn_cfg, lstm_cfg = model.cnn.cfg, model.lstm_cfg
        else:
            cnn_cfg, lstm_cfg = model.cfg, None
        return cls(params, cnn_cfg, lstm_cfg, step, optimizer_state or {}, extra or {})

    def to_model(self) -> nn.Module:
        model = build_model(self.cnn_config, self.lstm_config)
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint parameters do not match config: {exc}") from exc
        model.eval()
        return model
