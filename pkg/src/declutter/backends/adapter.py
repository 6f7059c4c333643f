"""Backends that shell out to external executables.

Each role maps to a command prefix.  A call writes its inputs to a fresh
temporary directory, runs ``prefix + [inputs..., out_dir]`` and reads the
outputs back in this package's file formats:

============  ==================================  ========================
role          inputs                              outputs in ``out_dir``
============  ==================================  ========================
proposer      image.png prompt.txt                proposal.json
segmenter     image.png label.txt                 mask.png
remover       image.png mask.png label.txt        image.png
              prompt.txt
depth         image.png                           disp.pfm camera.json
mesh          masked.png                          mesh.obj
rotation      masked.png mask.png sweep/          rotation.json
tracker       image.png rendered.png              tracks.json
============  ==================================  ========================

``sweep/`` holds ``view_###.png`` renders and ``yaws.json``.  A nonzero
exit status raises :class:`BackendError` carrying the tool's stderr.
"""
from __future__ import annotations

import json
import os
import subprocess
import tempfile

import numpy as np

from ..fitting import BaselineRotation, CorrespondenceSet
from ..geometry import Camera
from ..meshio import read_obj
from ..raster import load_disparity, load_image, load_mask, save_image, save_mask
from .base import BackendError, BackendSuite, ObjectProposal
from .prompts import load_prompts

__all__ = ["AdapterBackends", "adapter_suite", "NoTracks"]


class NoTracks:
    """Tracker that never finds correspondences (forces registration)."""

    def track(self, image, rendered, *, mask=None, render_pose=None):
        return CorrespondenceSet.empty()


class AdapterBackends:
    def __init__(self, commands: dict, prompts: dict | None = None, timeout=None):
        self.commands = {k: list(v) if not isinstance(v, str) else [v] for k, v in commands.items()}
        self.prompts = prompts or load_prompts()
        self.timeout = timeout
        self.calls = 0

    def _run(self, role, write_inputs, read_outputs):
        cmd = self.commands.get(role)
        if not cmd:
            raise BackendError(f"adapter: no command configured for {role}")
        with tempfile.TemporaryDirectory(prefix=f"adapter-{role}-") as tmp:
            in_dir = os.path.join(tmp, "in")
            out_dir = os.path.join(tmp, "out")
            os.makedirs(in_dir)
            os.makedirs(out_dir)
            inputs = write_inputs(in_dir)
            self.calls += 1
            proc = subprocess.run(cmd + inputs + [out_dir], capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise BackendError(f"{role} adapter exited with {proc.returncode}: {proc.stderr.strip()}")
            try:
                return read_outputs(out_dir)
            except (OSError, ValueError) as exc:
                raise BackendError(f"{role} adapter produced unreadable output: {exc}") from exc

    @staticmethod
    def _text(path, text):
        with open(path, "w") as fh:
            fh.write(text)
        return path

    def propose(self, image):
        def write(d):
            save_image(image, os.path.join(d, "image.png"))
            return [os.path.join(d, "image.png"), self._text(os.path.join(d, "prompt.txt"), self.prompts["propose"])]

        def read(d):
            with open(os.path.join(d, "proposal.json")) as fh:
                return ObjectProposal.from_dict(json.load(fh))

        return self._run("proposer", write, read)

    def segment(self, image, label):
        def write(d):
            save_image(image, os.path.join(d, "image.png"))
            return [os.path.join(d, "image.png"), self._text(os.path.join(d, "label.txt"), label)]

        return self._run("segmenter", write, lambda d: load_mask(os.path.join(d, "mask.png")))

    def remove(self, image, mask, label):
        def write(d):
            save_image(image, os.path.join(d, "image.png"))
            save_mask(mask, os.path.join(d, "mask.png"))
            prompt = self.prompts["remove"].replace("{OBJ_NAME}", label)
            return [
                os.path.join(d, "image.png"),
                os.path.join(d, "mask.png"),
                self._text(os.path.join(d, "label.txt"), label),
                self._text(os.path.join(d, "prompt.txt"), prompt),
            ]

        return self._run("remover", write, lambda d: load_image(os.path.join(d, "image.png")))

    def estimate_disparity(self, image):
        def write(d):
            save_image(image, os.path.join(d, "image.png"))
            return [os.path.join(d, "image.png")]

        def read(d):
            return load_disparity(os.path.join(d, "disp.pfm")), Camera.load(os.path.join(d, "camera.json"))

        return self._run("depth", write, read)

    def generate_mesh(self, masked_image):
        def write(d):
            save_image(masked_image, os.path.join(d, "masked.png"))
            return [os.path.join(d, "masked.png")]

        return self._run("mesh", write, lambda d: read_obj(os.path.join(d, "mesh.obj")))

    def estimate_rotation(self, masked_image, mask, sweep):
        def write(d):
            save_image(masked_image, os.path.join(d, "masked.png"))
            save_mask(mask, os.path.join(d, "mask.png"))
            sd = os.path.join(d, "sweep")
            os.makedirs(sd)
            for i, view in enumerate(sweep):
                save_image(view.image, os.path.join(sd, f"view_{i:03d}.png"))
            with open(os.path.join(sd, "yaws.json"), "w") as fh:
                json.dump([float(v.yaw) for v in sweep], fh)
            return [os.path.join(d, "masked.png"), os.path.join(d, "mask.png"), sd]

        def read(d):
            with open(os.path.join(d, "rotation.json")) as fh:
                return np.asarray(json.load(fh), dtype=np.float64).reshape(3, 3)

        return self._run("rotation", write, read)

    def track(self, image, rendered, *, mask=None, render_pose=None):
        def write(d):
            save_image(image, os.path.join(d, "image.png"))
            save_image(rendered, os.path.join(d, "rendered.png"))
            return [os.path.join(d, "image.png"), os.path.join(d, "rendered.png")]

        return self._run("tracker", write, lambda d: CorrespondenceSet.load(os.path.join(d, "tracks.json")))


def adapter_suite(commands: dict, prompts=None, timeout=None):
    """Suite over external tools; rotation and tracking fall back to native stand-ins."""
    ad = AdapterBackends(commands, prompts, timeout)
    rot = ad if "rotation" in ad.commands else BaselineRotation()
    trk = ad if "tracker" in ad.commands else NoTracks()
    return BackendSuite(ad, ad, ad, ad, ad, rot, trk, kind="adapter"), ad
