"""Model assembly for the four architectures and checkpoint I/O.

Variants share one construction path driven by ModelConfig toggles:
  attention=none                           -> UNet-FV
  attention=gated                          -> AGUNet (gates at every decoder level)
  attention=dual                           -> DAUNet (dual attention at the bottom)
  attention=dual_guided                    -> DAGUNet (AFMs propagated up the decoder)
plus multiscale_input and deep_supervision toggles.

Toggle purity: optional components contribute additively through their own
parameters (e.g. the multi-scale branch is a separate kernel summed into the
encoder convolution), so disabling a component removes exactly its parameters
and every shared parameter keeps its shape, name, and seeded initial value.
"""

import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (AttentionGate, AttentionGateSpec, ConvBlock, ConvBlockSpec,
                     DeepSupervisionHeads, DualAttention, Upsampler,
                     instance_norm, multiscale_inputs)
from .params import ConfigurationError, ParamStore

ATTENTION_KINDS = ("none", "gated", "dual", "dual_guided")

CHECKPOINT_MAGIC = b"VSEGCKP1"


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "unet"
    levels: int = 5
    filters: tuple = (16, 32, 128, 256, 256)
    attention: str = "none"
    multiscale_input: bool = False
    deep_supervision: bool = False
    classes: int = 2
    input_shape: tuple = (128, 128, 144)
    convs_per_block: int = 1
    normalization: str = "instance"

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.backbone != "unet":
            raise ConfigurationError(f"unknown backbone: {self.backbone}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigurationError(f"unknown attention kind: {self.attention}")
        if len(self.filters) != self.levels:
            raise ConfigurationError(
                f"filters {self.filters} must have one entry per level ({self.levels})")
        divisor = 2 ** (self.levels - 1)
        for d in self.input_shape:
            if d % divisor != 0:
                raise ConfigurationError(
                    f"input dims {self.input_shape} must be divisible by {divisor}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def experiment_name(config, accumulation_steps=1, loss_kind="dice",
                    checkpoint_policy="total_loss"):
    """Concatenated component-abbreviation experiment name."""
    base = {"none": "UNet-FV", "gated": "AGUNet", "dual": "DAUNet",
            "dual_guided": "DAGUNet"}[config.attention]
    tags = []
    if config.multiscale_input:
        tags.append("MS")
    if config.deep_supervision:
        tags.append("DS")
    if accumulation_steps > 1:
        tags.append("AG")
    if loss_kind == "focal_tversky":
        tags.append("FTL")
    if checkpoint_policy == "top_level_loss":
        tags.append("Top")
    return "-".join([base] + tags)


class Model:
    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.store = ParamStore(seed=seed, dtype=dtype)
        self._build()

    # -- construction --------------------------------------------------------

    def _build(self):
        cfg = self.config
        L = cfg.levels
        f = cfg.filters
        store = self.store
        norm = cfg.normalization

        self.enc_blocks = []
        self.ms_kernels = []
        for i in range(L):
            cin = 1 if i == 0 else f[i - 1]
            spec = ConvBlockSpec(cin, f[i], convs_per_block=cfg.convs_per_block,
                                 normalization=norm)
            self.enc_blocks.append(ConvBlock(store, f"enc{i}", spec))
            if cfg.multiscale_input and i > 0:
                self.ms_kernels.append(
                    store.param(f"enc{i}.ms.kernel", (f[i], 1, 3, 3, 3), init="he_uniform"))
            else:
                self.ms_kernels.append(None)

        self.dual = None
        if cfg.attention in ("dual", "dual_guided"):
            self.dual = DualAttention(store, "dual", f[L - 1])

        self.dec_up = []
        self.dec_gate = []
        self.dec_merge = []
        self.afm_up = []
        self.afm_merge = []
        for i in range(L - 2, -1, -1):
            self.dec_up.append(Upsampler(store, f"dec{i}.up", f[i + 1], f[i]))
            if cfg.attention == "gated":
                spec = AttentionGateSpec(f[i], f[i], max(1, f[i] // 2))
                self.dec_gate.append(AttentionGate(store, f"dec{i}.gate", spec))
            else:
                self.dec_gate.append(None)
            mk = store.param(f"dec{i}.merge.kernel", (f[i], 2 * f[i], 1, 1, 1),
                             init="he_uniform")
            mb = store.param(f"dec{i}.merge.bias", (f[i],))
            if norm == "instance":
                mg = store.param(f"dec{i}.merge.norm.gamma", (f[i],), init="ones")
                mbe = store.param(f"dec{i}.merge.norm.beta", (f[i],))
            else:
                mg = mbe = None
            self.dec_merge.append((mk, mb, mg, mbe))
            if cfg.attention == "dual_guided":
                self.afm_up.append(Upsampler(store, f"dec{i}.afm_up", f[i + 1], f[i]))
                self.afm_merge.append(
                    store.param(f"dec{i}.afm_merge.kernel", (f[i], f[i], 1, 1, 1),
                                init="he_uniform"))
            else:
                self.afm_up.append(None)
                self.afm_merge.append(None)

        # resolution level i: 0 = full resolution, L-1 = bottom
        if cfg.deep_supervision:
            head_levels = list(range(L))
        else:
            head_levels = [0]
        self.head_levels = head_levels
        self._head_params = []
        for i in head_levels:
            k = store.param(f"head.level{i}.kernel", (cfg.classes, f[i], 1, 1, 1),
                            init="he_uniform")
            b = store.param(f"head.level{i}.bias", (cfg.classes,))
            self._head_params.append((i, k, b))

    # -- forward --------------------------------------------------------------

    def forward(self, x, training=False, rng=None):
        """Run the network; returns probability maps coarse-to-fine.

        Without deep supervision the list holds one full-resolution map.
        """
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.store.dtype))
        if x.ndim == 3:
            x = x.reshape((1, 1) + x.shape)
        elif x.ndim == 4:
            x = x.reshape((x.shape[0], 1) + x.shape[1:])
        if x.shape[2:] != cfg.input_shape:
            raise ValueError(
                f"input spatial dims {x.shape[2:]} do not match config {cfg.input_shape}")
        L = cfg.levels
        scales = multiscale_inputs(x, L) if cfg.multiscale_input else [None] * (L - 1)

        feats = x
        skips = []
        for i in range(L):
            if i > 0:
                feats = ad.max_pool3d(feats, kernel=2, stride=2)
            block = self.enc_blocks[i]
            if self.ms_kernels[i] is not None:
                # concat-then-conv expressed as a sum of two convolutions,
                # so the multi-scale branch owns its parameters exclusively
                h = ad.conv3d(feats, block.kernels[0], block.biases[0], padding=1)
                h = h + ad.conv3d(scales[i - 1], self.ms_kernels[i], padding=1)
                if block.spec.normalization == "instance":
                    h = instance_norm(h, *block.norms[0])
                feats = ad.relu(h)
                for j in range(1, block.spec.convs_per_block):
                    feats = ad.conv3d(feats, block.kernels[j], block.biases[j], padding=1)
                    if block.spec.normalization == "instance":
                        feats = instance_norm(feats, *block.norms[j])
                    feats = ad.relu(feats)
            else:
                feats = block(feats)
            skips.append(feats)

        bottom = skips[L - 1]
        if self.dual is not None:
            bottom = self.dual(bottom, training=training, rng=rng)

        level_feats = {L - 1: bottom}
        xdec = bottom
        afm = bottom
        for step, i in enumerate(range(L - 2, -1, -1)):
            g = self.dec_up[step](xdec)
            skip = skips[i]
            if self.dec_gate[step] is not None:
                skip = self.dec_gate[step](skip, g)
            mk, mb, mg, mbe = self.dec_merge[step]
            h = ad.conv3d(ad.concat_channels([g, skip]), mk, mb)
            if self.afm_up[step] is not None:
                afm = self.afm_up[step](afm)
                h = h + ad.conv3d(afm, self.afm_merge[step])
            if mg is not None:
                h = instance_norm(h, mg, mbe)
            xdec = ad.relu(h)
            level_feats[i] = xdec

        maps = []
        for i, k, b in sorted(self._head_params, key=lambda t: -t[0]):
            maps.append(ad.softmax_channel(ad.conv3d(level_feats[i], k, b)))
        return maps

    def predict_proba(self, x):
        """Inference: full-resolution foreground probability map(s)."""
        with ad.no_grad():
            maps = self.forward(x, training=False)
        return maps[-1].data

    # -- parameters -------------------------------------------------------------

    def param_count(self):
        return self.store.count()

    def parameters(self):
        return self.store.items()

    def state_dict(self):
        return self.store.state_dict()

    def load_state_dict(self, state):
        self.store.load_state_dict(state)


def build_model(config, seed=0, dtype=np.float32):
    return Model(config, seed=seed, dtype=dtype)


# -- checkpoint format ------------------------------------------------------
#
#   magic (8 bytes) | u32 header length | header JSON (utf-8) |
#   raw little-endian parameter payload | u32 crc32 of header+payload


def save_weights(model, path):
    names = model.store.names()
    header = {
        "version": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "dtype": model.store.dtype.name,
        "params": [{"name": n, "shape": list(model.store[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(
        np.ascontiguousarray(model.store[n].data, dtype="<" + model.store.dtype.char
                             + str(model.store.dtype.itemsize)).tobytes()
        for n in names)
    crc = zlib.crc32(hb + payload)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(len(hb)).astype("<u4").tobytes())
        fh.write(hb)
        fh.write(payload)
        fh.write(np.uint32(crc).astype("<u4").tobytes())


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a voxseg checkpoint")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    hb = raw[12: 12 + hlen]
    payload = raw[12 + hlen: -4]
    crc_stored = int(np.frombuffer(raw[-4:], dtype="<u4")[0])
    if zlib.crc32(hb + payload) != crc_stored:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, file corrupted")
    return json.loads(hb.decode()), payload


def load_weights(path, config=None):
    """Rebuild a model from a checkpoint; bit-exact round-trip.

    If `config` is given it must equal the embedded one; mismatched fields
    are named in the error.
    """
    header, payload = _read_checkpoint(path)
    stored_cfg = ModelConfig.from_dict(header["config"])
    if config is not None:
        diffs = [k for k, v in config.to_dict().items()
                 if stored_cfg.to_dict().get(k) != v]
        if diffs:
            raise ConfigurationError(
                f"checkpoint config mismatch on fields: {', '.join(sorted(diffs))}")
    dtype = np.dtype(header["dtype"])
    model = Model(stored_cfg, seed=header["seed"], dtype=dtype)
    le = np.dtype("<" + dtype.char + str(dtype.itemsize))
    state = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=le, count=n, offset=offset).reshape(shape)
        state[entry["name"]] = arr.astype(dtype)
        offset += n * dtype.itemsize
    model.load_state_dict(state)
    return model
