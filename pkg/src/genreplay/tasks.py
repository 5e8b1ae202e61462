"""Datasets, class-split protocols and the global-id <-> head-column bookkeeping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, LookupFailure, MissingClassesError

PROTOCOLS = ("equal-phase", "half-then-equal", "explicit")


@dataclass
class LabeledSet:
    """Images in [-1, 1] (N, C, H, W) with global integer labels (N,)."""

    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on example count")
        self.labels = self.labels.long()

    def __len__(self):
        return int(self.labels.shape[0])

    def classes(self) -> list:
        return sorted(int(c) for c in torch.unique(self.labels))

    def subset(self, class_ids) -> "LabeledSet":
        mask = torch.isin(self.labels, torch.as_tensor(list(class_ids), dtype=torch.long))
        return LabeledSet(self.images[mask], self.labels[mask])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.detach().cpu().contiguous().numpy().tobytes())
        h.update(self.labels.cpu().numpy().astype(np.int64).tobytes())
        return h.hexdigest()

    @staticmethod
    def concat(sets) -> "LabeledSet":
        sets = list(sets)
        return LabeledSet(torch.cat([s.images for s in sets]), torch.cat([s.labels for s in sets]))


@dataclass
class Dataset:
    name: str
    train: LabeledSet
    eval: LabeledSet
    class_names: list

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train.images.shape[1:])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(self.train.digest().encode())
        h.update(self.eval.digest().encode())
        return h.hexdigest()


@dataclass
class TaskSpec:
    task_index: int
    class_set: tuple
    train: Optional[LabeledSet] = None
    eval: Optional[LabeledSet] = None

    def __post_init__(self):
        self.class_set = tuple(int(c) for c in self.class_set)
        if not self.class_set:
            raise ConfigurationError(f"task {self.task_index} has an empty class set")
        if len(set(self.class_set)) != len(self.class_set):
            raise ConfigurationError(f"task {self.task_index} has duplicate classes")
        allowed = set(self.class_set)
        for split in (self.train, self.eval):
            if split is not None and not set(split.classes()) <= allowed:
                raise ConfigurationError(f"task {self.task_index} holds labels outside its class set")

    @property
    def num_classes(self) -> int:
        return len(self.class_set)


@dataclass
class TaskSequence:
    tasks: list
    protocol_name: str
    seed: int
    dataset_digest: str = ""

    def __post_init__(self):
        seen = set()
        for t in self.tasks:
            overlap = seen & set(t.class_set)
            if overlap:
                raise ConfigurationError(f"classes {sorted(overlap)} appear in more than one task")
            seen |= set(t.class_set)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i) -> TaskSpec:
        return self.tasks[i]

    @property
    def class_sets(self) -> list:
        return [list(t.class_set) for t in self.tasks]

    def seen_classes(self, upto: int) -> list:
        """Classes of tasks 0..upto inclusive, in task order."""
        return [c for t in self.tasks[: upto + 1] for c in t.class_set]

    def seen_eval(self, upto: int) -> LabeledSet:
        return LabeledSet.concat(t.eval for t in self.tasks[: upto + 1])

    def label_map(self, upto: Optional[int] = None) -> "LabelMap":
        upto = len(self.tasks) - 1 if upto is None else upto
        return LabelMap.from_class_sets(self.class_sets[: upto + 1])

    def manifest(self) -> dict:
        return {
            "protocol": self.protocol_name,
            "seed": self.seed,
            "dataset_digest": self.dataset_digest,
            "tasks": [{"task_index": t.task_index, "classes": list(t.class_set)} for t in self.tasks],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"

    def write_manifest(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.manifest_json())
        return path


def split_classes(num_classes: int, protocol: str, seed: int, phases: int = 5,
                  classes: Optional[Sequence[int]] = None) -> TaskSequence:
    """Shuffle the class universe with ``seed`` and cut it into contiguous task sets.

    ``equal-phase`` gives ``phases`` equal sets; ``half-then-equal`` gives half
    the classes first and the rest in ``phases`` equal parts (5 in the usual
    6-phase protocol).
    """
    universe = list(range(num_classes)) if classes is None else [int(c) for c in classes]
    n = len(universe)
    if phases < 1 or (protocol == "equal-phase" and phases < 2):
        raise ConfigurationError(f"{protocol}: need at least 2 tasks")
    if protocol == "equal-phase":
        if n % phases:
            raise ConfigurationError(f"equal-phase({phases}): {n} classes are not divisible by {phases}")
        sizes = [n // phases] * phases
    elif protocol == "half-then-equal":
        if n % 2 or (n // 2) % phases:
            raise ConfigurationError(
                f"half-then-equal({phases}): {n} classes cannot be halved and the rest split in {phases}"
            )
        sizes = [n // 2] + [n // 2 // phases] * phases
    else:
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    order = np.random.default_rng(seed).permutation(np.asarray(universe)).tolist()
    tasks, start = [], 0
    for i, k in enumerate(sizes):
        tasks.append(TaskSpec(i, order[start:start + k]))
        start += k
    name = f"{protocol}({phases})"
    return TaskSequence(tasks, name, seed)


def explicit_sequence(class_sets, seed: int = 0) -> TaskSequence:
    """Skeleton from hand-picked class sets (used for diagnostic settings)."""
    return TaskSequence([TaskSpec(i, cs) for i, cs in enumerate(class_sets)], "explicit", seed)


def materialize_tasks(dataset: Dataset, skeleton: TaskSequence) -> TaskSequence:
    wanted = {c for t in skeleton.tasks for c in t.class_set}
    have_train = set(dataset.train.classes())
    have_eval = set(dataset.eval.classes())
    missing = wanted - (have_train & have_eval)
    if missing:
        raise MissingClassesError(missing)
    tasks = [
        TaskSpec(t.task_index, t.class_set, dataset.train.subset(t.class_set), dataset.eval.subset(t.class_set))
        for t in skeleton.tasks
    ]
    return TaskSequence(tasks, skeleton.protocol_name, skeleton.seed, dataset.digest())


@dataclass
class LabelMap:
    global_to_head: dict = field(default_factory=dict)
    head_offsets: list = field(default_factory=list)
    _order: list = field(default_factory=list, repr=False)

    @classmethod
    def from_class_sets(cls, class_sets) -> "LabelMap":
        m = cls()
        for cs in class_sets:
            m.register(cs)
        return m

    def register(self, class_set):
        t = len(self.head_offsets)
        self.head_offsets.append(len(self._order))
        for off, c in enumerate(class_set):
            c = int(c)
            if c in self.global_to_head:
                raise ConfigurationError(f"class {c} already registered")
            self.global_to_head[c] = (t, off)
            self._order.append(c)

    @property
    def num_classes(self) -> int:
        return len(self._order)

    def map_label(self, global_id: int) -> tuple:
        try:
            return self.global_to_head[int(global_id)]
        except KeyError:
            raise LookupFailure(f"class {global_id} is not registered") from None

    def global_id(self, task_index: int, offset: int) -> int:
        return self._order[self.head_offsets[task_index] + offset]

    def column(self, global_id: int) -> int:
        t, off = self.map_label(global_id)
        return self.head_offsets[t] + off

    def columns(self, class_ids) -> list:
        return [self.column(c) for c in class_ids]

    def column_classes(self) -> list:
        return list(self._order)

    def to_columns(self, labels: torch.Tensor) -> torch.Tensor:
        lut = {c: i for i, c in enumerate(self._order)}
        try:
            return torch.tensor([lut[int(c)] for c in labels], dtype=torch.long)
        except KeyError as e:
            raise LookupFailure(f"class {e.args[0]} is not registered") from None

    def to_head_offsets(self, labels: torch.Tensor, task_index: int) -> torch.Tensor:
        """Within-head indices for labels that all belong to ``task_index``."""
        out = []
        for c in labels:
            t, off = self.map_label(int(c))
            if t != task_index:
                raise ConfigurationError(f"class {int(c)} belongs to task {t}, not {task_index}")
            out.append(off)
        return torch.tensor(out, dtype=torch.long)


# -- data sources -------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, shape, coarse: int) -> torch.Tensor:
    c, h, w = shape
    z = torch.from_numpy(rng.standard_normal((1, c, coarse, coarse)).astype(np.float32))
    f = F.interpolate(z, size=(h, w), mode="bicubic", align_corners=False)[0]
    return f / f.std()


def make_synthetic_dataset(num_classes: int = 10, train_per_class: int = 100, eval_per_class: int = 50,
                           image_shape=(3, 16, 16), seed: int = 0, confusable_groups=(),
                           confusable_spread: float = 0.35, noise: float = 0.45,
                           name: Optional[str] = None) -> Dataset:
    """Class-prototype images plus amplitude jitter, one-pixel shifts and pixel noise.

    Classes listed together in ``confusable_groups`` share a base pattern and
    differ only by a detail of relative size ``confusable_spread``.
    """
    rng = np.random.default_rng(seed)
    protos = [_smooth_field(rng, image_shape, 4) for _ in range(num_classes)]
    for group in confusable_groups:
        base = _smooth_field(rng, image_shape, 4)
        for c in group:
            detail = _smooth_field(rng, image_shape, 4)
            protos[c] = (base + confusable_spread * detail) / (1 + confusable_spread ** 2) ** 0.5

    name = name or f"synthetic-{num_classes}c-{image_shape[1]}px-s{seed}"
    return _draw_dataset(rng, protos, train_per_class, eval_per_class, image_shape, noise, name)


def make_fine_grained_dataset(num_new: int = 4, train_per_class: int = 100, eval_per_class: int = 100,
                              image_shape=(3, 16, 16), seed: int = 0, confusable_spread: float = 0.12,
                              noise: float = 0.45) -> Dataset:
    """Old task {0, 1, 2, 3} and new classes 4..(4 + num_new - 1).

    Classes 0 and 1 share a base pattern and differ by a small detail; 2 and 3
    are unrelated. Every new-class prototype contains the shared base (so new
    images look alike to 0 and 1) plus a varying blend of the 2 and 3 patterns
    (so they look different to 2 and 3).
    """
    rng = np.random.default_rng(seed)
    base = _smooth_field(rng, image_shape, 4)
    s1, s2 = _smooth_field(rng, image_shape, 4), _smooth_field(rng, image_shape, 4)
    protos = [
        (base + confusable_spread * _smooth_field(rng, image_shape, 4)) / (1 + confusable_spread ** 2) ** 0.5,
        (base + confusable_spread * _smooth_field(rng, image_shape, 4)) / (1 + confusable_spread ** 2) ** 0.5,
        s1,
        s2,
    ]
    for k in range(num_new):
        a = k / max(1, num_new - 1)
        own = _smooth_field(rng, image_shape, 4)
        p = 0.5 * base + 0.6 * ((1 - a) * s1 + a * s2) + 0.8 * own
        protos.append(p / p.std())
    return _draw_dataset(rng, protos, train_per_class, eval_per_class, image_shape, noise,
                         f"finegrained-{num_new}new-{image_shape[1]}px-s{seed}")


def _draw_dataset(rng, protos, train_per_class, eval_per_class, image_shape, noise, name) -> Dataset:
    def draw(count):
        xs, ys = [], []
        for c, proto in enumerate(protos):
            amp = torch.from_numpy(rng.uniform(0.5, 0.8, size=(count, 1, 1, 1)).astype(np.float32))
            eps = torch.from_numpy(rng.standard_normal((count, *image_shape)).astype(np.float32))
            x = amp * proto + noise * eps
            shifts = rng.integers(-1, 2, size=(count, 2))
            x = torch.stack([torch.roll(xi, (int(a), int(b)), dims=(1, 2)) for xi, (a, b) in zip(x, shifts)])
            xs.append(x.clamp(-1, 1))
            ys.append(torch.full((count,), c, dtype=torch.long))
        return LabeledSet(torch.cat(xs), torch.cat(ys))

    train = draw(train_per_class)
    evals = draw(eval_per_class)
    return Dataset(name, train, evals, [f"class{c:03d}" for c in range(len(protos))])


def _to_uint8(images: torch.Tensor) -> np.ndarray:
    return ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).numpy()


def _from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)) / 127.5 - 1.0


def write_binary_dataset(dataset: Dataset, root) -> Path:
    """``images.bin`` (uint8, N x C x H x W, train then eval) plus ``index.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits, offset, chunks = {}, 0, []
    for split in ("train", "eval"):
        s = getattr(dataset, split)
        splits[split] = {"offset": offset, "count": len(s), "labels": s.labels.tolist()}
        offset += len(s)
        chunks.append(_to_uint8(s.images))
    np.concatenate(chunks).tofile(root / "images.bin")
    index = {
        "name": dataset.name,
        "classes": dataset.class_names,
        "image_shape": list(dataset.image_shape),
        "dtype": "uint8",
        "splits": splits,
    }
    (root / "index.json").write_text(json.dumps(index, indent=2))
    return root


def load_binary_dataset(root) -> Dataset:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    shape = tuple(index["image_shape"])
    raw = np.fromfile(root / "images.bin", dtype=np.uint8).reshape(-1, *shape)
    out = {}
    for split in ("train", "eval"):
        meta = index["splits"][split]
        arr = raw[meta["offset"]: meta["offset"] + meta["count"]]
        out[split] = LabeledSet(_from_uint8(arr), torch.tensor(meta["labels"], dtype=torch.long))
    return Dataset(index["name"], out["train"], out["eval"], list(index["classes"]))


def write_folder_dataset(dataset: Dataset, root) -> Path:
    """``manifest.json`` plus ``<split>/<class name>/<n>.png``."""
    from PIL import Image

    root = Path(root)
    for split in ("train", "eval"):
        s = getattr(dataset, split)
        arr = _to_uint8(s.images)
        counters = {}
        for img, lab in zip(arr, s.labels.tolist()):
            d = root / split / dataset.class_names[lab]
            d.mkdir(parents=True, exist_ok=True)
            n = counters.get(lab, 0)
            counters[lab] = n + 1
            pix = img.transpose(1, 2, 0)
            Image.fromarray(pix[:, :, 0] if pix.shape[2] == 1 else pix).save(d / f"{n:05d}.png")
    manifest = {"name": dataset.name, "classes": dataset.class_names, "image_shape": list(dataset.image_shape)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_folder_dataset(root) -> Dataset:
    from PIL import Image

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    c, h, w = manifest["image_shape"]
    mode = "L" if c == 1 else "RGB"
    out = {}
    for split in ("train", "eval"):
        arrs, labels = [], []
        for lab, cname in enumerate(manifest["classes"]):
            d = root / split / cname
            if not d.is_dir():
                continue
            for f in sorted(d.iterdir()):
                if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                    continue
                img = Image.open(f).convert(mode)
                if img.size != (w, h):
                    img = img.resize((w, h), Image.BILINEAR)
                a = np.asarray(img, dtype=np.uint8)
                arrs.append(a[None] if c == 1 else a.transpose(2, 0, 1))
                labels.append(lab)
        images = _from_uint8(np.stack(arrs)) if arrs else torch.empty(0, c, h, w)
        out[split] = LabeledSet(images, torch.tensor(labels, dtype=torch.long))
    return Dataset(manifest["name"], out["train"], out["eval"], list(manifest["classes"]))


def load_dataset(kind: str, path: str = "", **synthetic) -> Dataset:
    if kind == "synthetic":
        return make_synthetic_dataset(**synthetic)
    if kind == "folder":
        return load_folder_dataset(path)
    if kind == "binary":
        return load_binary_dataset(path)
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


def augment(images: torch.Tensor, rng: torch.Generator, pad: int = 0, flip: bool = False) -> torch.Tensor:
    """Random crop after zero padding and random horizontal flip."""
    if pad:
        n, _, h, w = images.shape
        padded = F.pad(images, (pad, pad, pad, pad), value=-1.0)
        offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=rng)
        images = torch.stack([p[:, a:a + h, b:b + w] for p, (a, b) in zip(padded, offs.tolist())])
    if flip:
        mask = torch.rand(images.shape[0], generator=rng) < 0.5
        images = torch.where(mask[:, None, None, None], images.flip(3), images)
    return images
