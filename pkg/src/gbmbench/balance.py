"""Training-split class balancing.

A small 3D autoencoder embeds the training volumes, SMOTE interpolates new
minority codes between same-class neighbours, and the decoder turns them
back into volumes. Everything here sees the fold's training patients only;
:class:`SamplePlan` carries the provenance needed to prove it.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import ClassTooSmall, InsufficientData, LeakageError
from .labels import CLASS_ORDER, Outcome
from .volume import Volume

log = logging.getLogger(__name__)

LATENT_DIM = 256


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

class AutoEncoder3D(nn.Module):
    """Four stride-2 conv blocks and a linear bottleneck, mirrored by the decoder."""

    def __init__(self, dims: tuple[int, int, int], latent_dim: int = LATENT_DIM, widths=(4, 8, 16, 32)):
        super().__init__()
        if any(d % 16 for d in dims):
            raise ValueError(f"autoencoder needs dims divisible by 16, got {dims}")
        self.dims = tuple(dims)
        self.latent_dim = latent_dim
        enc, cin = [], 1
        for w in widths:
            enc += [nn.Conv3d(cin, w, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            cin = w
        self.encoder = nn.Sequential(*enc)
        self.grid = tuple(d // 16 for d in dims)
        flat = cin * int(np.prod(self.grid))
        self.to_latent = nn.Linear(flat, latent_dim)
        self.from_latent = nn.Linear(latent_dim, flat)
        dec = []
        rev = list(widths[::-1]) + [widths[0]]
        for i in range(len(widths)):
            dec.append(nn.ConvTranspose3d(rev[i], rev[i + 1], 2, stride=2))
            dec.append(nn.LeakyReLU(0.1))
        self.decoder = nn.Sequential(*dec, nn.Conv3d(widths[0], 1, 1))
        self._top = widths[-1]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.encoder(x).flatten(1))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.from_latent(z).view(z.shape[0], self._top, *self.grid)
        return self.decoder(h)

    def forward(self, x):
        return self.decode(self.encode(x))


def _as_array(v: Volume | np.ndarray) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float32)


@dataclass
class TrainedAutoEncoder:
    model: AutoEncoder3D
    losses: list[float]

    def encode(self, volumes: Sequence[Volume | np.ndarray]) -> np.ndarray:
        x = torch.from_numpy(np.stack([_as_array(v) for v in volumes]))[:, None]
        self.model.eval()
        with torch.no_grad():
            return self.model.encode(x).double().numpy()

    def decode(self, codes: np.ndarray) -> np.ndarray:
        z = torch.as_tensor(np.asarray(codes), dtype=torch.float32)
        if z.ndim == 1:
            z = z[None]
        self.model.eval()
        with torch.no_grad():
            return self.model.decode(z)[:, 0].double().numpy()

    def reconstruct(self, volumes: Sequence[Volume | np.ndarray]) -> np.ndarray:
        return self.decode(self.encode(volumes))


def train_autoencoder(
    train_volumes: Sequence[Volume | np.ndarray],
    seed: int,
    epochs: int = 40,
    batch_size: int = 4,
    learning_rate: float = 1e-3,
    latent_dim: int = LATENT_DIM,
) -> TrainedAutoEncoder:
    """Fit the autoencoder with mean-squared reconstruction error."""
    if len(train_volumes) < 2:
        raise InsufficientData(f"autoencoder needs at least 2 training volumes, got {len(train_volumes)}")
    arrays = [_as_array(v) for v in train_volumes]
    dims = arrays[0].shape
    if any(a.shape != dims for a in arrays):
        raise InsufficientData("training volumes must share dimensions")
    x = torch.from_numpy(np.stack(arrays))[:, None]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AutoEncoder3D(dims, latent_dim)
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
        losses = []
        model.train()
        for _ in range(epochs):
            order = torch.randperm(len(arrays), generator=gen)
            total = 0.0
            for start in range(0, len(order), batch_size):
                batch = x[order[start:start + batch_size]]
                opt.zero_grad()
                loss = torch.mean((model(batch) - batch) ** 2)
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
            losses.append(total / len(arrays))
    return TrainedAutoEncoder(model=model, losses=losses)


# ---------------------------------------------------------------------------
# latent SMOTE
# ---------------------------------------------------------------------------

class CodeSource(str, enum.Enum):
    REAL = "REAL"
    SYNTHETIC = "SYNTHETIC"


@dataclass(frozen=True)
class LatentCode:
    sample_id: str
    label: Outcome
    vector: np.ndarray
    source: CodeSource = CodeSource.REAL
    # (patient_id_a, patient_id_b, lambda) for synthetic codes
    parents: tuple[str, str, float] | None = None

    def __post_init__(self):
        if self.source == CodeSource.REAL and self.parents is not None:
            raise ValueError("real codes have no parents")
        if self.source == CodeSource.SYNTHETIC:
            if self.parents is None or self.parents[0] == self.parents[1]:
                raise ValueError("synthetic codes need two distinct parents")
            if not 0.0 <= self.parents[2] <= 1.0:
                raise ValueError("interpolation weight must lie in [0, 1]")


def interpolate(za: np.ndarray, zb: np.ndarray, lam: float) -> np.ndarray:
    return za + lam * (zb - za)


@dataclass
class SamplePlan:
    real_refs: list[str]
    real_labels: dict[str, Outcome]
    synthetic: list[LatentCode]
    counts_before: dict[Outcome, int]
    counts_after: dict[Outcome, int]
    cap: int | None
    seed: int
    split: str = "train"
    fold: int | None = None
    stage: str | None = None
    fallbacks: list[str] = field(default_factory=list)

    def parent_patients(self) -> set[str]:
        out = set()
        for code in self.synthetic:
            out.update(code.parents[:2])
        return out

    def validate(self) -> None:
        """Internal consistency: every synthetic parent is a real training sample of the same class."""
        refs = set(self.real_refs)
        for code in self.synthetic:
            a, b, _ = code.parents
            if a not in refs or b not in refs:
                raise LeakageError(f"synthetic sample {code.sample_id} has a parent outside the plan's real set")
            if self.real_labels[a] != code.label or self.real_labels[b] != code.label:
                raise LeakageError(f"synthetic sample {code.sample_id} mixes classes")

    def check_training_split(self, train_patients: Sequence[str], split: str = "train") -> None:
        """Refuse the plan unless it belongs to a training split made of ``train_patients``."""
        if split != "train" or self.split != "train":
            raise LeakageError(f"sample plans only attach to training splits (got {split!r}/{self.split!r})")
        allowed = set(train_patients)
        outside = (set(self.real_refs) | self.parent_patients()) - allowed
        if outside:
            raise LeakageError(f"plan references non-training patients: {sorted(outside)}")
        self.validate()

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "stage": self.stage,
            "split": self.split,
            "seed": self.seed,
            "cap": self.cap,
            "real_refs": list(self.real_refs),
            "real_labels": {p: self.real_labels[p].value for p in self.real_refs},
            "counts_before": {c.value: self.counts_before[c] for c in CLASS_ORDER},
            "counts_after": {c.value: self.counts_after[c] for c in CLASS_ORDER},
            "fallbacks": list(self.fallbacks),
            "synthetic": [
                {"sample_id": s.sample_id, "label": s.label.value, "parent_a": s.parents[0],
                 "parent_b": s.parents[1], "lambda": s.parents[2]}
                for s in self.synthetic
            ],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def from_dict(cls, d: dict, codes: Mapping[str, np.ndarray] | None = None) -> "SamplePlan":
        """Rebuild a plan; synthetic vectors are recomputed when real ``codes`` are given."""
        synthetic = []
        for s in d["synthetic"]:
            a, b, lam = s["parent_a"], s["parent_b"], float(s["lambda"])
            vec = interpolate(codes[a], codes[b], lam) if codes is not None else np.empty(0)
            synthetic.append(LatentCode(s["sample_id"], Outcome(s["label"]), vec, CodeSource.SYNTHETIC, (a, b, lam)))
        return cls(
            real_refs=list(d["real_refs"]),
            real_labels={p: Outcome(v) for p, v in d["real_labels"].items()},
            synthetic=synthetic,
            counts_before={Outcome(k): v for k, v in d["counts_before"].items()},
            counts_after={Outcome(k): v for k, v in d["counts_after"].items()},
            cap=d["cap"],
            seed=d["seed"],
            split=d.get("split", "train"),
            fold=d.get("fold"),
            stage=d.get("stage"),
            fallbacks=list(d.get("fallbacks", [])),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SamplePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def nearest_neighbours(vectors: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest rows to row ``i`` (Euclidean, excluding ``i``, ties by index)."""
    d = np.linalg.norm(vectors - vectors[i], axis=1)
    d[i] = np.inf
    order = np.lexsort((np.arange(len(d)), d))
    return order[: min(k, len(d) - 1)]


def latent_smote(
    codes: Sequence[LatentCode],
    target_counts: Mapping[Outcome, int] | None = None,
    k: int = 5,
    cap: int | None = None,
    seed: int = 0,
) -> SamplePlan:
    """Oversample minority classes in latent space.

    Each class is topped up to ``min(target, cap)``; the default target is the
    majority count. Synthetic sample ``j`` of class ``c`` draws from its own
    generator seeded by ``(seed, c, j)``, so generation order does not matter.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    real = [c for c in codes if c.source == CodeSource.REAL]
    ids = [c.sample_id for c in real]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate real sample ids")
    by_class = {cls: [c for c in real if c.label == cls] for cls in CLASS_ORDER}
    before = {cls: len(v) for cls, v in by_class.items()}
    if target_counts is None:
        majority = max(before.values())
        target_counts = {cls: majority for cls in CLASS_ORDER}

    synthetic: list[LatentCode] = []
    fallbacks: list[str] = []
    after = dict(before)
    for cls in CLASS_ORDER:
        members = by_class[cls]
        goal = target_counts.get(cls, before[cls])
        if cap is not None:
            goal = min(goal, cap)
        need = goal - before[cls]
        if need <= 0 or not members:
            continue
        if len(members) < 2:
            err = ClassTooSmall(f"class {cls.value} has a single training sample; augmentation only")
            log.warning("%s", err)
            fallbacks.append(str(err))
            continue
        vectors = np.stack([m.vector for m in members]).astype(np.float64)
        for j in range(need):
            rng = np.random.default_rng([seed, cls.index, j])
            a = int(rng.integers(len(members)))
            neigh = nearest_neighbours(vectors, a, k)
            b = int(neigh[rng.integers(len(neigh))])
            lam = float(rng.uniform(0.0, 1.0))
            za, zb = vectors[a], vectors[b]
            synthetic.append(LatentCode(
                sample_id=f"syn_{cls.value}_{j:03d}",
                label=cls,
                vector=interpolate(za, zb, lam),
                source=CodeSource.SYNTHETIC,
                parents=(members[a].sample_id, members[b].sample_id, lam),
            ))
        after[cls] = goal
    plan = SamplePlan(
        real_refs=ids,
        real_labels={c.sample_id: c.label for c in real},
        synthetic=synthetic,
        counts_before=before,
        counts_after=after,
        cap=cap,
        seed=seed,
        fallbacks=fallbacks,
    )
    plan.validate()
    return plan


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 5.0
    max_translation_vox: int = 4
    noise_sigma: float = 0.02
    probability: float = 0.5

    def __post_init__(self):
        if min(self.max_rotation_deg, self.max_translation_vox, self.noise_sigma) < 0:
            raise ValueError("augmentation bounds must be nonnegative")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")


def augment(v: Volume | np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> Volume | np.ndarray:
    """Random small rigid motion and additive Gaussian noise.

    The rigid part and the noise are each applied with ``cfg.probability``.
    Rotation is about the grid centre; uncovered voxels become 0.
    """
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    out = data
    if rng.uniform() < cfg.probability and (cfg.max_rotation_deg > 0 or cfg.max_translation_vox > 0):
        angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
        shift = rng.uniform(-cfg.max_translation_vox, cfg.max_translation_vox, size=3)
        rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
        centre = (np.array(data.shape) - 1) / 2.0
        # output voxel o samples input at rot^T (o - centre - shift) + centre
        inv = rot.T
        offset = centre - inv @ (centre + shift)
        out = ndimage.affine_transform(out, inv, offset=offset, order=1, mode="constant", cval=0.0)
    if rng.uniform() < cfg.probability and cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    if out is data:
        out = data.copy()
    if isinstance(v, Volume):
        return v.with_(data=out)
    return out
