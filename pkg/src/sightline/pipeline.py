"""Scene-then-pet cascade, description sentences and the text-to-speech hand-off."""
from __future__ import annotations

import logging
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .tensor import DimensionError

log = logging.getLogger(__name__)

SCENES = ("indoor", "outdoor")
PETS = ("cat", "dog")


class ProbabilityModel(Protocol):
    input_shape: tuple

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray: ...


@dataclass
class CascadeModel:
    scene_net: ProbabilityModel  # p = P(outdoor)
    pet_net: ProbabilityModel    # p = P(dog)
    tau: float = 0.5

    def __post_init__(self):
        if not 0.5 <= self.tau <= 1:
            raise ValueError(f"pet presence threshold must lie in [0.5, 1], got {self.tau}")


@dataclass(frozen=True)
class Description:
    scene_label: str
    scene_confidence: float
    pet_label: str
    pet_confidence: Optional[float]

    @property
    def text(self) -> str:
        return render_text(self)


def _probability(net: ProbabilityModel, image: np.ndarray, which: str) -> float:
    shape = getattr(net, "input_shape", None)
    if shape is not None and tuple(image.shape) != tuple(shape):
        raise DimensionError(f"{which} net expects image shape {tuple(shape)}, got {image.shape}")
    out = np.asarray(net.forward(image[None], "eval")).reshape(-1)
    if out.size != 1:
        raise DimensionError(f"{which} net must emit one probability, got {out.size} values")
    return float(out[0])


def decide(p_scene: float, p_pet: float, tau: float = 0.5) -> Description:
    """Turn the two probabilities into labels; both ties at 0.5 go to the positive class."""
    scene = SCENES[1] if p_scene >= 0.5 else SCENES[0]
    pet_conf = max(p_pet, 1 - p_pet)
    if pet_conf < tau:
        pet, conf = "none", None
    else:
        pet, conf = (PETS[1] if p_pet >= 0.5 else PETS[0]), pet_conf
    return Description(scene, max(p_scene, 1 - p_scene), pet, conf)


def cascade_classify(model: CascadeModel, image: np.ndarray) -> Description:
    p_scene = _probability(model.scene_net, image, "scene")
    p_pet = _probability(model.pet_net, image, "pet")
    return decide(p_scene, p_pet, model.tau)


def render_text(d: Description) -> str:
    if d.scene_label not in SCENES or d.pet_label not in PETS + ("none",):
        raise ValueError(f"invalid description labels {d.scene_label!r}, {d.pet_label!r}")
    head = f"This photo appears to be {d.scene_label}."
    if d.pet_label == "none":
        return f"{head} No cat or dog was detected."
    return f"{head} A {d.pet_label} appears in the photo."


class AudioError(RuntimeError):
    pass


class TtsNotFoundError(AudioError):
    pass


class TtsExitError(AudioError):
    pass


class TtsEmptyOutputError(AudioError):
    pass


def tts_argv(template: str, text: str, out: str) -> list:
    """Split the command template and substitute ``{text}`` and ``{out}`` per argument.

    A template without placeholders gets the output path and then the text
    appended as the final two arguments.
    """
    parts = shlex.split(template)
    if not parts:
        raise TtsNotFoundError("empty text-to-speech command")
    if not any("{text}" in p or "{out}" in p for p in parts):
        return parts + [out, text]
    return [p.replace("{out}", out).replace("{text}", text) for p in parts]


def emit_audio(text: str, tts_command: str, out_path) -> Path:
    if not text:
        raise ValueError("nothing to speak")
    out_path = Path(out_path)
    argv = tts_argv(tts_command, text, str(out_path))
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except (FileNotFoundError, PermissionError) as e:
        raise TtsNotFoundError(f"text-to-speech command not runnable: {argv[0]}: {e}") from e
    if proc.returncode != 0:
        raise TtsExitError(f"text-to-speech command exited with status {proc.returncode}: "
                           f"{proc.stderr.strip()}")
    if not out_path.is_file() or out_path.stat().st_size == 0:
        raise TtsEmptyOutputError(f"text-to-speech command wrote no audio to {out_path}")
    return out_path


@dataclass(frozen=True)
class AudioResult:
    status: str  # "ok", "text-only" or "error"
    path: Optional[Path] = None
    error: Optional[str] = None


def deliver(text: str, tts_command: Optional[str], out_path) -> AudioResult:
    """Try to voice ``text``; never raises, the caller keeps the text either way."""
    if not tts_command:
        return AudioResult("text-only")
    try:
        return AudioResult("ok", emit_audio(text, tts_command, out_path))
    except AudioError as e:
        log.warning("audio output failed: %s", e)
        return AudioResult("error", error=str(e))
