"""Named training configurations.

Full-scale presets use the reference schedules (batch 75, 100K iterations
for the CNN; batch 16, 15K iterations for the LSTM). ``*-desk`` presets keep
the same layer structure at reduced width and half resolution so runs finish
on one CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .geometry import CameraModel, CANONICAL_CAMERA
from .imaging import AugmentConfig
from .model import BASE_CONV_SPECS, CnnConfig, LstmConfig
from .sampling import Direction
from .synthgen import DESK_CAMERA
from .training import TrainConfig


@dataclass(frozen=True)
class Preset:
    name: str
    config: TrainConfig
    data: str  # which training data the row uses: kitti, carla, carla+kitti, synthgen
    description: str = ""


CNN_PAPER = TrainConfig(phase="cnn", base_lr=1e-4, decay_every=10_000, batch_size=75, total_iterations=100_000, dropout_rate=0.15)
LSTM_PAPER = TrainConfig(
    phase="lstm", base_lr=2e-5, decay_every=2_500, batch_size=16, total_iterations=15_000, dropout_rate=0.15,
    checkpoint_every=2_500, lstm=LstmConfig(Direction.BIDIRECTIONAL, 19, 256),
)

BASELINE_CONV = BASE_CONV_SPECS[:3]
CAMERA_240 = CameraModel(250.0, 250.0, (120.0, 60.0), (240, 120))

DESK_CNN = CnnConfig(conv_specs=tuple((k, p, f // 4) for k, p, f in BASE_CONV_SPECS), fc_widths=(256, 1), input_shape=(60, 140, 6))
DESK_AUGMENT = AugmentConfig(max_rotation=0.0, max_translation_frac=0.0, brightness_delta_range=(-0.1, 0.1), contrast_factor_range=(0.9, 1.1))
CNN_DESK = TrainConfig(
    phase="cnn", base_lr=5e-4, decay_every=1_000, batch_size=16, total_iterations=2_000, dropout_rate=0.0,
    checkpoint_every=1_000, cnn=DESK_CNN, target_camera=DESK_CAMERA, augment=DESK_AUGMENT,
)
LSTM_DESK = replace(
    CNN_DESK, phase="lstm", base_lr=2e-4, decay_every=300, batch_size=8, total_iterations=600, checkpoint_every=300,
    lstm=LstmConfig(Direction.BIDIRECTIONAL, 5, 64),
)


def _presets() -> dict[str, Preset]:
    p: dict[str, Preset] = {}

    def add(name: str, cfg: TrainConfig, data: str, desc: str) -> None:
        p[name] = Preset(name, cfg, data, desc)

    baseline = CnnConfig(conv_specs=BASELINE_CONV, activation="tanh", fc_widths=(512, 1))
    add("baseline-240", replace(CNN_PAPER, cnn=replace(baseline, input_shape=(120, 240, 6)), target_camera=CAMERA_240), "kitti", "3-conv tanh baseline, 240x120 input")
    add("baseline-280", replace(CNN_PAPER, cnn=baseline), "kitti", "3-conv tanh baseline, 280x120 input")
    add("cnn-paper", CNN_PAPER, "kitti", "5-conv CNN on KITTI")
    add("cnn-kitti", CNN_PAPER, "kitti", "5-conv CNN on KITTI")
    add("cnn-carla", CNN_PAPER, "carla", "5-conv CNN on simulator data")
    add("cnn-carla-kitti", CNN_PAPER, "carla+kitti", "5-conv CNN on simulator and KITTI data")
    add("lstm-paper", LSTM_PAPER, "kitti", "bidirectional L=19 head on KITTI")
    add("lstm-b19-kitti", LSTM_PAPER, "kitti", "bidirectional L=19 head on KITTI")
    add("lstm-b19-carla", LSTM_PAPER, "carla", "bidirectional L=19 head on simulator data")
    add("lstm-b19-carla-kitti", LSTM_PAPER, "carla+kitti", "bidirectional L=19 head on simulator and KITTI data")
    for d, tag in ((Direction.UNIDIRECTIONAL, "u"), (Direction.BIDIRECTIONAL, "b")):
        for length in (5, 11, 19):
            add(f"lstm-{tag}{length}", replace(LSTM_PAPER, lstm=LstmConfig(d, length, 256)), "kitti", f"{d.value} L={length} head on KITTI")
    maps = ["map1", "map2", "map3", "map4", "map5", "map6"]
    for k in range(1, 7):
        name = "cnn-maps-" + "".join(str(i) for i in range(1, k + 1))
        add(name, replace(CNN_PAPER, map_tags=tuple(maps[:k])), "carla", f"5-conv CNN on simulator maps 1..{k}")
    add("cnn-desk", CNN_DESK, "synthgen", "reduced-width CNN for CPU runs on synthgen data")
    add("lstm-desk-b5", LSTM_DESK, "synthgen", "bidirectional L=5 head on the desk CNN")
    add("lstm-desk-u5", replace(LSTM_DESK, lstm=LstmConfig(Direction.UNIDIRECTIONAL, 5, 64)), "synthgen", "unidirectional L=5 head on the desk CNN")
    return p


PRESETS: dict[str, Preset] = _presets()


def resolve_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
