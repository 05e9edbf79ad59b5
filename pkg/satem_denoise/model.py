import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .blocks import VALID_PADDING, CoverEmbedding, DrBlock, LayerNorm, Linear, run_blocks
from .numerics import Component, Tensor, concat, no_grad, relu, reshape, tanh

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SATEMCKP"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig(object):
    """
    Architecture hyperparameters

    Parameters
    ----------
    n_blocks : int
        DR blocks in the encoder and in each decoder.
    channels : int
        Token width C.
    factor_dim : int, optional
        Width D of each factor; defaults to C // 2.
    cover_length : int
        Cover embedding window length.
    """

    n_blocks: int = 12
    channels: int = 64
    factor_dim: Optional[int] = None
    cover_length: int = 3
    padding: str = "zero"
    hidden_mult: int = 4
    club_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.factor_dim is None:
            self.factor_dim = max(1, self.channels // 2)
        if self.padding not in VALID_PADDING:
            raise ValueError(f"Invalid padding: {self.padding}, expected one of {VALID_PADDING}")
        for name in ("n_blocks", "channels", "factor_dim", "cover_length", "hidden_mult"):
            if getattr(self, name) < (0 if name == "n_blocks" else 1):
                raise ValueError(f"Invalid {name}: {getattr(self, name)}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class FactorPair(object):
    """
    Disentangled representation of one batch of signals

    Parameters
    ----------
    z_s : Tensor
        Content factors, (..., T, D).
    z_n : Tensor
        Context factors, (..., T, D).
    """

    z_s: Tensor
    z_n: Tensor

    def __post_init__(self):
        if self.z_s.shape != self.z_n.shape:
            raise ValueError(
                f"content and context factors differ in shape: {self.z_s.shape} vs {self.z_n.shape}"
            )


@dataclass
class Encoder(Component):
    """
    Cover embedding, DR stack and two linear factor heads on the shared trunk
    """

    embed: CoverEmbedding
    norm: LayerNorm
    blocks: List[DrBlock]
    head_s: Linear
    head_n: Linear

    @classmethod
    def initialize(cls, config: ModelConfig, rng):
        C, D = config.channels, config.factor_dim
        return cls(
            embed=CoverEmbedding.initialize(config.cover_length, C, rng, config.padding),
            norm=LayerNorm.initialize(C),
            blocks=[DrBlock.initialize(C, rng, config.hidden_mult) for _ in range(config.n_blocks)],
            head_s=Linear.initialize(C, D, rng),
            head_n=Linear.initialize(C, D, rng),
        )

    def __call__(self, x: np.ndarray) -> FactorPair:
        features = run_blocks(self.blocks, self.norm(self.embed(x)))
        return FactorPair(self.head_s(features), self.head_n(features))


@dataclass
class Decoder(Component):
    """
    Maps concatenated (content, context) factors back to one value per time step
    """

    proj: Linear
    blocks: List[DrBlock]
    norm: LayerNorm
    head: Linear

    @classmethod
    def initialize(cls, config: ModelConfig, rng):
        C, D = config.channels, config.factor_dim
        return cls(
            proj=Linear.initialize(2 * D, C, rng),
            blocks=[DrBlock.initialize(C, rng, config.hidden_mult) for _ in range(config.n_blocks)],
            norm=LayerNorm.initialize(C),
            head=Linear.initialize(C, 1, rng),
        )

    def __call__(self, z_s, z_n) -> Tensor:
        z_s, z_n = _as_factor(z_s), _as_factor(z_n)
        if z_s.shape != z_n.shape:
            raise ValueError(f"factor shapes differ: {z_s.shape} vs {z_n.shape}")
        h = run_blocks(self.blocks, self.proj(concat([z_s, z_n])))
        out = self.head(self.norm(h))
        return reshape(out, out.shape[:-1])


def _as_factor(z) -> Tensor:
    return z if isinstance(z, Tensor) else Tensor(z)


@dataclass
class ClubNet(Component):
    """
    Diagonal Gaussian q(z_n | z_s): a mean head and a tanh-bounded log-variance head
    """

    mu_hidden: Linear
    mu_out: Linear
    logvar_hidden: Linear
    logvar_out: Linear

    @classmethod
    def initialize(cls, factor_dim: int, hidden: int, rng):
        return cls(
            mu_hidden=Linear.initialize(factor_dim, hidden, rng),
            mu_out=Linear.initialize(hidden, factor_dim, rng),
            logvar_hidden=Linear.initialize(factor_dim, hidden, rng),
            logvar_out=Linear.initialize(hidden, factor_dim, rng),
        )

    def conditional(self, z_s) -> Tuple[Tensor, Tensor]:
        """mean and log-variance of q(z_n | z_s)"""
        mu = self.mu_out(relu(self.mu_hidden(z_s)))
        logvar = tanh(self.logvar_out(relu(self.logvar_hidden(z_s))))
        return mu, logvar


@dataclass
class DenoisingModel(Component):
    """
    Encoder E, denoising decoder G_s, representation decoder G_n and the CLUB net

    Parameters
    ----------
    config : ModelConfig
        Architecture.
    encoder : Encoder
    decoder_s : Decoder
        Reconstructs the clean signal.
    decoder_n : Decoder
        Reconstructs the signal a factor pair represents.
    club : ClubNet
    """

    config: ModelConfig
    encoder: Encoder
    decoder_s: Decoder
    decoder_n: Decoder
    club: ClubNet

    @classmethod
    def initialize(cls, config: Optional[ModelConfig] = None) -> "DenoisingModel":
        config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        return cls(
            config=config,
            encoder=Encoder.initialize(config, rng),
            decoder_s=Decoder.initialize(config, rng),
            decoder_n=Decoder.initialize(config, rng),
            club=ClubNet.initialize(config.factor_dim, config.club_hidden, rng),
        )

    def trainable(self) -> Dict[str, Tensor]:
        """parameters of the main objective (everything except the CLUB net)"""
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("club.")}

    def encode(self, x) -> FactorPair:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] == 0:
            raise ValueError("cannot encode an empty signal")
        return self.encoder(x)

    def decode_signal(self, z_s, z_n) -> Tensor:
        """G_s"""
        return self.decoder_s(z_s, z_n)

    def decode_repr(self, z_s, z_n) -> Tensor:
        """G_n"""
        return self.decoder_n(z_s, z_n)

    def denoise_infer(self, x_noisy, reference=None) -> np.ndarray:
        """denoise normalized signal(s)

        The context factor is the zero tensor unless a clean ``reference`` is
        given, in which case its encoded context factor is used.
        """
        with no_grad():
            factors = self.encode(x_noisy)
            if reference is None:
                z_n = np.zeros(factors.z_n.shape)
            else:
                z_n = self.encode(reference).z_n
            return self.decode_signal(factors.z_s, z_n).numpy()

    def clamp_mix(self):
        for decoder in (self.encoder, self.decoder_s, self.decoder_n):
            for block in decoder.blocks:
                block.clamp_mix()


# --------- checkpoints --------- #
def atomic_write_bytes(path: str, payload: bytes):
    """write via a temporary file in the target directory, then rename"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(
    model: DenoisingModel,
    path: str,
    extra_tensors: Optional[Dict[str, np.ndarray]] = None,
    meta: Optional[Dict[str, Any]] = None,
):
    """write parameters (and optional training state) to ``path``

    Layout: magic, format version, header length, JSON header (model config,
    metadata, manifest of named tensors with shapes), then every tensor as
    little-endian float64 in manifest order.
    """
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    for name, values in (extra_tensors or {}).items():
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name}")
        tensors[name] = np.asarray(values, dtype=np.float64)

    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "manifest": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    atomic_write_bytes(
        path, _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)) + blob + body
    )
    logger.info("wrote checkpoint %s (%d tensors)", path, len(tensors))


def read_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """header and named tensors of a checkpoint file"""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    start = _PREAMBLE.size + header_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[_PREAMBLE.size:start].decode("utf-8"))

    tensors = {}
    offset = start
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        tensors[entry["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, tensors


def load_checkpoint(path: str) -> DenoisingModel:
    """rebuild the model described by a checkpoint and load its parameters"""
    model, _, _ = load_training_state(path)
    return model


def load_training_state(
    path: str,
) -> Tuple[DenoisingModel, Dict[str, np.ndarray], Dict[str, Any]]:
    """model plus the non-parameter tensors and metadata stored alongside it"""
    header, tensors = read_checkpoint(path)
    model = DenoisingModel.initialize(ModelConfig(**header["config"]))
    params = model.named_parameters()

    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {tensors[name].shape}, config expects {p.shape}"
            )
        p.data[...] = tensors[name]
    extra = {k: v for k, v in tensors.items() if k not in params}
    return model, extra, header.get("meta", {})


def swap_decodings(model: DenoisingModel, clean, noisy) -> Dict[str, np.ndarray]:
    """decode both factor pairings with both decoders

    Superscript 1 marks factors of the noisy input, 2 those of the clean input.
    Keys are ``<decoder>_<pairing>`` with decoder in {gs, gn} and pairing in
    {s1n2, s2n1}.
    """
    with no_grad():
        noisy_f = model.encode(noisy)
        clean_f = model.encode(clean)
        pairings = {
            "s1n2": (noisy_f.z_s, clean_f.z_n),
            "s2n1": (clean_f.z_s, noisy_f.z_n),
        }
        out = {}
        for pairing, (z_s, z_n) in pairings.items():
            out[f"gs_{pairing}"] = model.decode_signal(z_s, z_n).numpy()
            out[f"gn_{pairing}"] = model.decode_repr(z_s, z_n).numpy()
    return out
