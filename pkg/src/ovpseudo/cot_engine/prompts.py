"""The three MLLM prompt templates, stored byte-exact under ``templates/``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources


class Step(str, Enum):
    VERIFY = "verify"
    LABEL = "label"
    GROUND = "ground"


# Marks where the crop is attached. It stays in the text; backends send the
# image alongside the prompt.
IMAGE_SLOT = "<attach image here>"
LABEL_SLOT = "<Response>"

GOLDEN_SHA256 = {
    Step.VERIFY: "0907fe4a7e322072a83c78accda6d42fbbe2afc5b79deb33f67a0bbb71879a91",
    Step.LABEL: "a3272dcfa54935632838c2c9e3a854790e94472eb90bef710af3b7bf740cf151",
    Step.GROUND: "3193f8f949efea6b7108bf495eecac12a510b3689787c31e7815b26c1b2af8fc",
}


class TemplateIntegrityError(RuntimeError):
    pass


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptTemplate:
    step: Step
    text: str

    @property
    def slots(self) -> tuple[str, ...]:
        names = [IMAGE_SLOT]
        if LABEL_SLOT in self.text:
            names.append(LABEL_SLOT)
        return tuple(names)

    @property
    def sha256(self) -> str:
        return sha256_text(self.text)

    def render(self, label: str | None = None) -> str:
        if LABEL_SLOT not in self.text:
            if label is not None:
                raise ValueError(f"{self.step.value} prompt takes no label")
            return self.text
        if not label:
            raise ValueError(f"{self.step.value} prompt needs a label")
        out = self.text.replace(LABEL_SLOT, label)
        if LABEL_SLOT in out:
            raise ValueError("label re-introduced the slot marker")
        return out


@lru_cache(maxsize=None)
def load_template(step: Step | str) -> PromptTemplate:
    step = Step(step)
    raw = resources.files(__package__).joinpath("templates", f"{step.value}.txt").read_bytes()
    text = raw.decode("utf-8")
    if sha256_text(text) != GOLDEN_SHA256[step]:
        raise TemplateIntegrityError(f"{step.value} template does not match its golden hash")
    return PromptTemplate(step, text)
