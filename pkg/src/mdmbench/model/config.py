"""Architecture hyperparameters for the joint RGB-D network."""

import json
from dataclasses import asdict, dataclass


@dataclass
class ModelConfig:
    patch: int = 14
    image_h: int = 224
    image_w: int = 224
    embed_dim: int = 128
    encoder_layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_stages: int = 4
    decoder_channels: tuple = None  # default: embed_dim halved per stage
    decoder_blocks: int = 1  # residual blocks stacked per pyramid scale
    head_hidden: int = 32
    depth_scale: float = 10.0  # meters; depth inputs are divided by this

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.decoder_stages < 1:
            raise ValueError("decoder_stages must be >= 1")
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be >= 1")
        if self.encoder_layers < 0:
            raise ValueError("encoder_layers must be >= 0")
        if self.decoder_channels is not None:
            self.decoder_channels = tuple(self.decoder_channels)
            if len(self.decoder_channels) != self.decoder_stages + 1:
                raise ValueError(
                    "decoder_channels must list the base scale plus one entry per stage"
                )

    @property
    def grid_h(self):
        return self.image_h // self.patch

    @property
    def grid_w(self):
        return self.image_w // self.patch

    @property
    def num_tokens(self):
        return self.grid_h * self.grid_w

    def neck_channels(self):
        if self.decoder_channels is not None:
            return self.decoder_channels
        return tuple(
            max(self.embed_dim >> s, 8) for s in range(self.decoder_stages + 1)
        )

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("decoder_channels") is not None:
            doc["decoder_channels"] = tuple(doc["decoder_channels"])
        return cls(**doc)


# Configuration reported for the full-scale model; kept as data for
# reference, not a training target at desk scale.
FULL_SCALE = dict(
    patch=14,
    embed_dim=1024,
    encoder_layers=24,
    heads=16,
    mlp_ratio=4.0,
    decoder_stages=4,
)


def toy_config(image_h=224, image_w=224, **overrides):
    """CPU-sized defaults used by the command-line trainer."""
    kwargs = dict(
        patch=14,
        image_h=image_h,
        image_w=image_w,
        embed_dim=128,
        encoder_layers=4,
        heads=4,
        decoder_stages=4,
        head_hidden=32,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)
