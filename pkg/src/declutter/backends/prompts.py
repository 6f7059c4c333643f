"""Prompt templates handed verbatim to external proposer/remover tools."""
from __future__ import annotations

import json
from importlib import resources

__all__ = ["load_prompts"]


def load_prompts(path=None) -> dict:
    """Bundled templates, or a JSON file overriding some of them."""
    text = resources.files(__package__).joinpath("assets/prompts.json").read_text()
    prompts = json.loads(text)
    if path is not None:
        with open(path) as fh:
            prompts.update(json.load(fh))
    return prompts
