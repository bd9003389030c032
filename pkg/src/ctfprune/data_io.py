"""Skeleton sequences: CSV I/O, temporal resampling, synthetic data, splits.

CSV schema (header required, one row per joint per frame)::

    sample_id,frame,joint,x,y,z,label

Lines starting with ``#`` are comments; a synthetic set stores its generator
parameters in one such line so the file documents how it was produced.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InputError

COLUMNS = ("sample_id", "frame", "joint", "x", "y", "z", "label")


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # frames x joints x 3
    label: int
    sample_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise InputError(f"frames must be F x J x 3, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise InputError(f"sample {self.sample_id!r} has non-finite coordinates")

    @property
    def joints(self):
        return self.frames.shape[1]


@dataclass
class Dataset:
    sequences: list
    classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for seq in self.sequences:
            if not 0 <= seq.label < self.classes:
                raise InputError(f"label {seq.label} outside [0, {self.classes})")
        if len({seq.joints for seq in self.sequences}) > 1:
            raise InputError("sequences disagree on the joint count")

    def __len__(self):
        return len(self.sequences)

    @property
    def labels(self):
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    @property
    def joints(self):
        return self.sequences[0].joints if self.sequences else 0


def resample(frames, T):
    """Linearly interpolate an F x ... sequence onto T evenly spaced frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if T < 1:
        raise ConfigError(f"T must be at least 1, got {T}")
    if frames.shape[0] == 0:
        raise InputError("cannot resample an empty sequence")
    F = frames.shape[0]
    if F == T:
        return frames.copy()
    if F == 1:
        return np.repeat(frames, T, axis=0)
    pos = np.linspace(0.0, F - 1, T)
    lo = np.minimum(np.floor(pos).astype(int), F - 2)
    w = (pos - lo).reshape((T,) + (1,) * (frames.ndim - 1))
    return frames[lo] * (1.0 - w) + frames[lo + 1] * w


def normalize_frames(frames):
    """Center each frame on its joint centroid and scale to unit RMS radius."""
    centered = frames - frames.mean(axis=1, keepdims=True)
    radius = np.sqrt((centered ** 2).sum(axis=2).mean(axis=1, keepdims=True))
    return centered / np.where(radius > 0, radius, 1.0)[..., None]


def to_signals(dataset, T):
    """N x s x n node-signal array with s = 3T; feature t*3 + d is axis d at frame t."""
    out = []
    for seq in dataset.sequences:
        fr = normalize_frames(resample(seq.frames, T))  # T x J x 3
        out.append(fr.transpose(0, 2, 1).reshape(3 * T, seq.joints))
    return np.array(out)


def synth_generate(classes=2, samples_per_class=20, J=6, T=8, noise=0.05, seed=0):
    """Per class and joint a smooth sinusoidal trajectory; samples add Gaussian noise."""
    if min(classes, samples_per_class, J, T) < 1:
        raise ConfigError("classes, samples_per_class, J and T must be positive")
    if noise < 0:
        raise ConfigError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    rest = rng.normal(size=(J, 3))
    t = np.linspace(0.0, 1.0, T)[:, None, None]
    seqs = []
    for c in range(classes):
        amp = rng.uniform(0.2, 0.6, size=(J, 3))
        freq = rng.uniform(0.5, 2.0, size=(J, 3))
        phase = rng.uniform(0.0, 2 * np.pi, size=(J, 3))
        prototype = rest + amp * np.sin(2 * np.pi * freq * t + phase)
        for i in range(samples_per_class):
            frames = prototype + noise * rng.normal(size=prototype.shape)
            seqs.append(SkeletonSequence(frames, c, f"c{c}_{i:04d}"))
    meta = {"generator": "synth", "classes": classes, "samples_per_class": samples_per_class,
            "J": J, "T": T, "noise": noise, "seed": seed}
    return Dataset(seqs, classes, meta)


def split(dataset, fraction=0.5, seed=0):
    """Stratified (train, test) split; each class contributes round(fraction * count) to train."""
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    train_idx, test_idx = [], []
    for c in range(dataset.classes):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise InputError(f"class {c} has {len(members)} sample(s); need at least 2 to split")
        members = rng.permutation(members)
        k = min(max(int(round(fraction * len(members))), 1), len(members) - 1)
        train_idx.extend(members[:k])
        test_idx.extend(members[k:])
    pick = lambda idx: Dataset([dataset.sequences[i] for i in sorted(idx)], dataset.classes, dict(dataset.meta))
    return pick(train_idx), pick(test_idx)


def _manifest_line(meta):
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items())


def _parse_manifest(line):
    meta = {}
    for token in line.lstrip("#").split():
        if "=" in token:
            k, v = token.split("=", 1)
            meta[k] = _number(v)
    return meta


def _number(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def save_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        if dataset.meta:
            fh.write(_manifest_line(dataset.meta) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for seq in dataset.sequences:
            for f, frame in enumerate(seq.frames):
                for j, (x, y, z) in enumerate(frame):
                    w.writerow((seq.sample_id, f, j, repr(float(x)), repr(float(y)), repr(float(z)), seq.label))


def load_csv(path, classes=None):
    """Group rows into frame-ordered sequences; ``classes`` defaults to max label + 1."""
    meta, samples, order = {}, {}, []
    with open(path, newline="") as fh:
        lines = iter(enumerate(fh, start=1))
        header = None
        for lineno, line in lines:
            if line.startswith("#"):
                meta.update(_parse_manifest(line))
                continue
            if line.strip():
                header = next(csv.reader([line]))
                break
        if header is None:
            raise FormatError(f"{path}: missing header")
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in COLUMNS]
        if unknown:
            raise FormatError(f"{path}: unknown column(s) {unknown}; expected {list(COLUMNS)}")
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise FormatError(f"{path}: missing column(s) {missing}")
        pos = [header.index(c) for c in COLUMNS]
        for lineno, line in lines:
            if not line.strip() or line.startswith("#"):
                continue
            row = next(csv.reader([line]))
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid, frame, joint, x, y, z, label = (row[p] for p in pos)
            try:
                key = (int(frame), int(joint))
                value = (float(x), float(y), float(z))
                label = int(label)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from None
            if sid not in samples:
                samples[sid] = {"label": label, "cells": {}, "line": lineno}
                order.append(sid)
            entry = samples[sid]
            if entry["label"] != label:
                raise FormatError(f"{path}:{lineno}: sample {sid!r} changes label")
            if key in entry["cells"]:
                raise FormatError(f"{path}:{lineno}: duplicate frame/joint {key} in sample {sid!r}")
            entry["cells"][key] = (value, lineno)
    seqs, joint_count = [], None
    for sid in order:
        cells = samples[sid]["cells"]
        frames = sorted({f for f, _ in cells})
        if frames != list(range(len(frames))):
            raise FormatError(f"{path}:{samples[sid]['line']}: sample {sid!r} frame indices {frames} are not 0..F-1")
        for f in frames:
            joints = sorted(j for ff, j in cells if ff == f)
            if joint_count is None:
                joint_count = len(joints)
            if joints != list(range(joint_count)):
                first = min(cells[(f, j)][1] for j in joints)
                raise FormatError(f"{path}:{first}: sample {sid!r} frame {f} has joints {joints}, "
                                  f"expected 0..{joint_count - 1}")
        arr = np.array([[cells[(f, j)][0] for j in range(joint_count)] for f in frames])
        seqs.append(SkeletonSequence(arr, samples[sid]["label"], sid))
    if not seqs:
        raise FormatError(f"{path}: no samples")
    n_classes = classes if classes is not None else int(meta.get("classes", 0)) or max(s.label for s in seqs) + 1
    try:
        return Dataset(seqs, n_classes, meta)
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from None
