"""Canonical seven-emotion label set."""

from __future__ import annotations

from enum import IntEnum


class EmotionLabel(IntEnum):
    NEUTRAL = 0
    HAPPY = 1
    SAD = 2
    SURPRISE = 3
    FEAR = 4
    DISGUST = 5
    ANGER = 6

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "EmotionLabel":
        return cls[name.strip().upper()]


NUM_CLASSES = len(EmotionLabel)
LABEL_NAMES: tuple[str, ...] = tuple(lbl.label_name for lbl in EmotionLabel)
