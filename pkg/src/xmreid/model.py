"""Feature extractor and domain classifiers.

A dual-stream residual backbone: stages 1-3 have independent parameters
per modality (colour=0, infrared=1), stage 4 is one shared parameter set.
The final feature map is cut into `n_parts` equal-height horizontal
stripes; each stripe gets its own embedding block (pool + fully connected)
and its own identity classifier. Pooled taps g_1..g_4 off each stage feed
the per-level domain discriminators during training and are discarded at
retrieval time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"XMRCKPT1"
CHECKPOINT_VERSION = 1

STAGE_STRIDES = (1, 2, 2, 2)  # net spatial reduction: /8


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


@dataclass(frozen=True)
class BackboneConfig:
    num_identities: int
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    input_hw: tuple[int, int] = (96, 48)
    in_channels: int = 3
    n_parts: int = 3
    part_dim: int = 64
    units_per_stage: int = 1
    discriminator_hidden: int = 64

    def __post_init__(self):
        h, w = self.input_hw
        if h % 8 or w % 8:
            raise ConfigError(f"input size {h}x{w} must be divisible by 8")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.num_identities < 2:
            raise ConfigError(f"need at least 2 identities, got {self.num_identities}")
        if self.part_dim < 1 or self.units_per_stage < 1:
            raise ConfigError("part_dim and units_per_stage must be positive")
        fh = h // 8
        if self.n_parts < 1 or fh % self.n_parts:
            raise ConfigError(
                f"n_parts={self.n_parts} must divide the final map height {fh}; "
                f"valid values: {_divisors(fh)}"
            )

    @property
    def final_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // 8, self.input_hw[1] // 8

    @property
    def stripe_height(self) -> int:
        return self.final_hw[0] // self.n_parts

    @property
    def descriptor_dim(self) -> int:
        return self.n_parts * self.part_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["input_hw"] = tuple(d["input_hw"])
        return cls(**d)


# -- building blocks ----------------------------------------------------------


class ConvBN:
    def __init__(self, rng, cin: int, cout: int, k: int):
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.gamma = Tensor(np.ones(cout), requires_grad=True)
        self.beta = Tensor(np.zeros(cout), requires_grad=True)
        self.running_mean = np.zeros(cout)
        self.running_var = np.ones(cout)
        self.k = k

    def __call__(self, x, stride: int, train: bool, update_stats: bool):
        h = T.conv2d(x, self.w, stride=stride, pad=self.k // 2)
        return T.batch_norm(
            h, self.gamma, self.beta, self.running_mean, self.running_var,
            training=train, update_stats=update_stats,
        )

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ResidualUnit:
    """conv-bn-relu-conv-bn plus identity (or 1x1 projected) skip."""

    def __init__(self, rng, cin: int, cout: int, stride: int):
        self.stride = stride
        self.conv1 = ConvBN(rng, cin, cout, 3)
        self.conv2 = ConvBN(rng, cout, cout, 3)
        self.proj = ConvBN(rng, cin, cout, 1) if (stride != 1 or cin != cout) else None

    def __call__(self, x, train: bool, update_stats: bool):
        h = T.relu(self.conv1(x, self.stride, train, update_stats))
        h = self.conv2(h, 1, train, update_stats)
        skip = self.proj(x, self.stride, train, update_stats) if self.proj else x
        return T.relu(T.add(h, skip))

    def named(self, prefix: str):
        blocks = {"conv1": self.conv1, "conv2": self.conv2}
        if self.proj:
            blocks["proj"] = self.proj
        for bname, block in blocks.items():
            yield f"{prefix}/{bname}", block


class Stage:
    def __init__(self, rng, cin: int, cout: int, stride: int, units: int):
        self.units = [ResidualUnit(rng, cin if i == 0 else cout, cout,
                                   stride if i == 0 else 1) for i in range(units)]

    def __call__(self, x, train: bool, update_stats: bool):
        for unit in self.units:
            x = unit(x, train, update_stats)
        return x

    def named(self, prefix: str):
        for i, unit in enumerate(self.units):
            yield from unit.named(f"{prefix}/unit{i}")


class PartHead:
    """Embedding block (FC to part_dim) and identity classifier matrix."""

    def __init__(self, rng, cin: int, dim: int, num_ids: int):
        self.embed_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / cin), size=(cin, dim)), requires_grad=True)
        self.embed_b = Tensor(np.zeros(dim), requires_grad=True)
        self.cls_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, num_ids)), requires_grad=True)

    def embed(self, pooled):
        return T.add(T.matmul(pooled, self.embed_w), self.embed_b)

    def classify(self, f):
        return T.matmul(f, self.cls_w)

    def params(self) -> dict[str, Tensor]:
        return {"embed_w": self.embed_w, "embed_b": self.embed_b, "cls_w": self.cls_w}


# -- forward records ----------------------------------------------------------


@dataclass
class BatchRecord:
    """Outputs of one batched forward pass; the unit the losses consume."""

    g: list[Tensor]                 # 4 tensors (M, stage_channels[j])
    parts: list[Tensor]             # n tensors (M, part_dim)
    logits: list[Tensor]            # n tensors (M, C)
    avg_distribution: np.ndarray    # (M, C), softmax of part-averaged logits
    entropy: np.ndarray             # (M,)
    modalities: np.ndarray          # (M,) in {0,1}

    @property
    def batch_size(self) -> int:
        return len(self.modalities)


@dataclass
class ForwardRecord:
    """Per-sample view of a forward pass (the single-image API)."""

    g: list[Tensor]                 # 4 tensors (stage_channels[j],)
    parts: list[Tensor]             # n tensors (part_dim,)
    logits: list[Tensor]            # n tensors (C,)
    avg_distribution: np.ndarray    # (C,)
    entropy: float
    modality: int


def softmax_values(x: np.ndarray) -> np.ndarray:
    """Plain-array softmax over the last axis (no graph)."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy_values(p: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis with 0*log(0) = 0."""
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


# -- the extractor -------------------------------------------------------------


class PartStripeExtractor:
    """Dual-stream backbone with stripe part heads."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        ch = config.stage_channels
        ins = (config.in_channels, ch[0], ch[1], ch[2])
        # Modality-specific stages 1..3, built in fixed order for
        # deterministic initialization.
        self.streams: dict[int, list[Stage]] = {}
        for m in (0, 1):
            self.streams[m] = [
                Stage(rng, ins[j], ch[j], STAGE_STRIDES[j], config.units_per_stage)
                for j in range(3)
            ]
        self.stage4 = Stage(rng, ins[3], ch[3], STAGE_STRIDES[3], config.units_per_stage)
        self.heads = [
            PartHead(rng, ch[3], config.part_dim, config.num_identities)
            for _ in range(config.n_parts)
        ]

    # -- parameter plumbing --

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m in (0, 1):
            for j, stage in enumerate(self.streams[m]):
                for prefix, block in stage.named(f"stream{m}/stage{j + 1}"):
                    for pname, p in block.params().items():
                        out[f"{prefix}/{pname}"] = p
        for prefix, block in self.stage4.named("shared/stage4"):
            for pname, p in block.params().items():
                out[f"{prefix}/{pname}"] = p
        for i, head in enumerate(self.heads):
            for pname, p in head.params().items():
                out[f"heads/part{i}/{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for m in (0, 1):
            for j, stage in enumerate(self.streams[m]):
                for prefix, block in stage.named(f"stream{m}/stage{j + 1}"):
                    for bname, b in block.buffers().items():
                        out[f"{prefix}/{bname}"] = b
        for prefix, block in self.stage4.named("shared/stage4"):
            for bname, b in block.buffers().items():
                out[f"{prefix}/{bname}"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def backbone_parameters(self) -> list[Tensor]:
        """Stages 1-4 (the pretrained-backbone analogue's learning-rate group)."""
        return [p for name, p in self.named_parameters().items()
                if name.startswith(("stream", "shared"))]

    def head_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters().items() if name.startswith("heads")]

    def stream_parameters(self, modality: int) -> list[Tensor]:
        return [p for name, p in self.named_parameters().items()
                if name.startswith(f"stream{modality}")]

    def stage4_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters().items() if name.startswith("shared")]

    # -- forward --

    def forward_batch(
        self,
        images: np.ndarray | Tensor,
        modalities: np.ndarray,
        train_mode: bool,
        update_stats: bool | None = None,
    ) -> BatchRecord:
        """Route each sample through its modality's stages 1-3, merge for the
        shared stage 4, and return stripe features in the original order."""
        x = T.as_tensor(images)
        modalities = np.asarray(modalities)
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, *cfg.input_hw):
            raise UsageError(
                f"expected images of shape (M, {cfg.in_channels}, "
                f"{cfg.input_hw[0]}, {cfg.input_hw[1]}), got {x.shape}"
            )
        if len(modalities) != x.shape[0] or not np.isin(modalities, (0, 1)).all():
            raise UsageError("modalities must be a vector over {0,1} matching the batch")
        if update_stats is None:
            update_stats = train_mode

        sub_h, sub_g = [], []          # per-modality stage-3 map, per-stage pooled taps
        order = []
        for m in (0, 1):
            idx = np.flatnonzero(modalities == m)
            if idx.size == 0:
                continue
            order.append(idx)
            h = T.take_rows(x, idx)
            gs = []
            for stage in self.streams[m]:
                h = stage(h, train_mode, update_stats)
                gs.append(T.global_avg_pool(h))
            sub_h.append(h)
            sub_g.append(gs)

        perm = np.concatenate(order)
        inv = np.argsort(perm)
        h = sub_h[0] if len(sub_h) == 1 else T.concat(sub_h, axis=0)
        h = self.stage4(h, train_mode, update_stats)
        g4 = T.global_avg_pool(h)
        g = []
        for j in range(3):
            gj = sub_g[0][j] if len(sub_g) == 1 else T.concat([gs[j] for gs in sub_g], axis=0)
            g.append(T.take_rows(gj, inv))
        g.append(T.take_rows(g4, inv))
        h = T.take_rows(h, inv)

        sh = cfg.stripe_height
        parts, logits = [], []
        for i, head in enumerate(self.heads):
            stripe = T.slice_axis(h, 2, i * sh, (i + 1) * sh)
            f = head.embed(T.global_avg_pool(stripe))
            parts.append(f)
            logits.append(head.classify(f))

        avg_logits = np.mean([lg.data for lg in logits], axis=0)
        dist = softmax_values(avg_logits)
        return BatchRecord(
            g=g, parts=parts, logits=logits,
            avg_distribution=dist, entropy=entropy_values(dist),
            modalities=modalities.copy(),
        )

    def forward(self, image, modality: int, train_mode: bool) -> ForwardRecord:
        if modality not in (0, 1):
            raise UsageError(f"modality must be 0 or 1, got {modality}")
        data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        batch = self.forward_batch(data[None], np.array([modality]), train_mode)
        return ForwardRecord(
            g=[T.reshape(gj, gj.shape[1:]) for gj in batch.g],
            parts=[T.reshape(f, f.shape[1:]) for f in batch.parts],
            logits=[T.reshape(lg, lg.shape[1:]) for lg in batch.logits],
            avg_distribution=batch.avg_distribution[0],
            entropy=float(batch.entropy[0]),
            modality=modality,
        )

    # -- descriptors --

    def raw_descriptors(self, record: BatchRecord) -> Tensor:
        """Concatenated part features, pre-normalization (triplet input)."""
        return T.concat(record.parts, axis=1)

    def descriptors(self, record: BatchRecord) -> Tensor:
        return T.l2_normalize(self.raw_descriptors(record))


def extract_descriptor(record: ForwardRecord) -> Tensor:
    """Retrieval-time descriptor: ordered part concatenation, L2-normalized.

    The g taps are not part of the descriptor; they exist only for training.
    """
    return T.l2_normalize(T.concat(record.parts, axis=0))


# -- domain classifiers ---------------------------------------------------------


class DomainClassifierBank:
    """Per-level two-layer discriminators D_1..D_4 plus a descriptor-level
    head used only by the deep-layers-only (vanilla) ablation.

    Final layers start at zero so every discriminator outputs exactly 0.5
    before training.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.levels: dict[int, dict[str, Tensor]] = {}
        hidden = config.discriminator_hidden
        for j, cin in enumerate(config.stage_channels, start=1):
            self.levels[j] = self._make_mlp(rng, cin, hidden)
        self.descriptor_head = self._make_mlp(rng, config.descriptor_dim, hidden)

    @staticmethod
    def _make_mlp(rng, cin: int, hidden: int) -> dict[str, Tensor]:
        return {
            "w1": Tensor(rng.normal(0.0, np.sqrt(2.0 / cin), size=(cin, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(np.zeros((hidden, 1)), requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }

    @staticmethod
    def _mlp_forward(mlp: dict[str, Tensor], x: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(x, mlp["w1"]), mlp["b1"]))
        out = T.add(T.matmul(h, mlp["w2"]), mlp["b2"])
        prob = T.sigmoid(T.reshape(out, (x.shape[0],)))
        # Keep the output strictly inside (0,1) so downstream logs are finite
        # even when the sigmoid saturates in float64.
        return T.clamp(prob, T.LOG_EPS, 1.0 - T.LOG_EPS)

    def discriminate(self, g, level: int) -> Tensor:
        """Probability that a pooled representation came from the infrared
        modality; (M, c_j) -> (M,) or (c_j,) -> scalar."""
        if level not in self.levels:
            raise UsageError(f"discriminator level must be in 1..4, got {level}")
        g = T.as_tensor(g)
        unbatched = g.data.ndim == 1
        if unbatched:
            g = T.reshape(g, (1, g.shape[0]))
        expect = self.config.stage_channels[level - 1]
        if g.shape[1] != expect:
            raise UsageError(
                f"level {level} discriminator expects dim {expect}, got {g.shape[1]}"
            )
        out = self._mlp_forward(self.levels[level], g)
        return T.reshape(out, ()) if unbatched else out

    def discriminate_descriptor(self, f) -> Tensor:
        f = T.as_tensor(f)
        unbatched = f.data.ndim == 1
        if unbatched:
            f = T.reshape(f, (1, f.shape[0]))
        if f.shape[1] != self.config.descriptor_dim:
            raise UsageError(
                f"descriptor discriminator expects dim {self.config.descriptor_dim}, "
                f"got {f.shape[1]}"
            )
        out = self._mlp_forward(self.descriptor_head, f)
        return T.reshape(out, ()) if unbatched else out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for j, mlp in self.levels.items():
            for pname, p in mlp.items():
                out[f"disc{j}/{pname}"] = p
        for pname, p in self.descriptor_head.items():
            out[f"disc_f/{pname}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad = trainable


# -- checkpoint container --------------------------------------------------------
#
# Single self-describing binary file:
#   magic (8 bytes) | header length (8-byte LE) | header JSON | raw array bytes
# The header lists arrays sorted by name with offsets into the payload.
# Writing is a pure function of the content, so save -> load -> save is
# byte-identical.


def write_container(path, config: dict, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    names = sorted(arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": config, "extra": extra or {}, "arrays": index},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise UsageError(f"{path}: unsupported format version {header['format_version']}")
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(entry["shape"]).copy()
    return header["config"], arrays, header["extra"]


def save_model(path, model: PartStripeExtractor, bank: DomainClassifierBank) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        arrays[f"model/{name}"] = p.data
    for name, b in model.named_buffers().items():
        arrays[f"model/{name}"] = b
    for name, p in bank.named_parameters().items():
        arrays[f"bank/{name}"] = p.data
    write_container(path, model.config.to_dict(), arrays)


def load_model(path) -> tuple[PartStripeExtractor, DomainClassifierBank]:
    config_dict, arrays, _ = read_container(path)
    config = BackboneConfig.from_dict(config_dict)
    # Structure first (any rng), then overwrite every array from the file.
    scratch = np.random.Generator(np.random.Philox(key=0))
    model = PartStripeExtractor(config, scratch)
    bank = DomainClassifierBank(config, scratch)
    targets: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        targets[f"model/{name}"] = p.data
    for name, b in model.named_buffers().items():
        targets[f"model/{name}"] = b
    for name, p in bank.named_parameters().items():
        targets[f"bank/{name}"] = p.data
    if set(targets) != set(arrays):
        missing = sorted(set(targets) ^ set(arrays))
        raise UsageError(f"{path}: checkpoint arrays do not match the model: {missing[:4]}...")
    for name, dst in targets.items():
        src = arrays[name]
        if dst.shape != src.shape:
            raise UsageError(f"{path}: shape mismatch for {name}: {src.shape} vs {dst.shape}")
        dst[...] = src
    return model, bank
