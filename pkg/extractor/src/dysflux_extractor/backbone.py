"""Speech backbone loading: 12-layer, 768-dim encoders producing per-block states."""

from __future__ import annotations

import numpy as np
import torch
from transformers import Wav2Vec2Config, Wav2Vec2Model

# Aliases for the two starting checkpoints; any local path or hub id of a
# compatible 12-layer/768-dim model is accepted as-is. "random-base" builds an
# untrained base-architecture encoder (offline tests, shape validation).
BACKBONE_ALIASES = {
    "english-asr-base": "facebook/wav2vec2-base-960h",
    "german-asr-base": "facebook/wav2vec2-base-10k-voxpopuli-ft-de",
}
RANDOM_BACKBONE = "random-base"

EXPECTED_LAYERS = 12
EXPECTED_DIM = 768


class Backbone:
    """Wraps the encoder; hidden_states() returns the 12 post-block outputs."""

    def __init__(self, model):
        self.model = model.eval()

    @classmethod
    def load(cls, name_or_path, seed=0):
        if name_or_path == RANDOM_BACKBONE:
            torch.manual_seed(seed)
            model = Wav2Vec2Model(Wav2Vec2Config())
        else:
            resolved = BACKBONE_ALIASES.get(name_or_path, name_or_path)
            model = Wav2Vec2Model.from_pretrained(resolved)
        config = model.config
        if (config.num_hidden_layers, config.hidden_size) != (EXPECTED_LAYERS, EXPECTED_DIM):
            raise ValueError(
                f"backbone must have {EXPECTED_LAYERS} layers x {EXPECTED_DIM} dims, "
                f"got {config.num_hidden_layers} x {config.hidden_size}"
            )
        return cls(model)

    def hidden_states(self, waveform):
        """L x T x D float32 array of all post-transformer-block states.

        The pre-transformer embedding (hidden_states[0]) is excluded: only the
        12 block outputs are part of the feature contract.
        """
        x = torch.from_numpy(np.asarray(waveform, dtype=np.float32))[None, :]
        with torch.no_grad():
            out = self.model(x, output_hidden_states=True)
        stacked = torch.stack(out.hidden_states[1:], dim=0)[:, 0]  # (L, T, D)
        values = stacked.numpy()
        if not np.all(np.isfinite(values)):
            raise RuntimeError("backbone produced non-finite hidden states")
        return values
