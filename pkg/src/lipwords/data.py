"""Clip datasets: on-disk formats, preprocessing, augmentation, synthesis.

Dataset directory layout:

    <root>/manifest.txt          line-oriented manifest (see below)
    <root>/clips/<id>.clip       one binary record per clip

Clip record (integers little-endian):

    magic   4 bytes  b"CLIP"
    T,H,W   u32 each
    label   u32      word index
    frames  T*H*W bytes, 8-bit grayscale, row-major

The record deliberately carries nothing else: in particular no word
boundary information, which the models never get to see.

Manifest format, one token-separated statement per line ("#" comments):

    lipwords-manifest 1
    frames 31
    height 122
    width 122
    mean 0.41237...
    std 0.20512...
    word <index> <string>
    clip <split> <id> <label>

Frames are stored 10 pixels larger than the model's input on each side
pair (122 stored -> 112 consumed) so that +-5 pixel training crops never
need padding; evaluation takes the center crop.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError, ContractError, DataError, Tensor

CLIP_MAGIC = b"CLIP"
MOUTH_LANDMARKS = slice(48, 66)  # mouth points of the 66-landmark layout
CROP_MARGIN = 10  # stored size minus consumed size (2 * max offset)


# ---------------------------------------------------------------- clip files

def write_clip(path, frames, label):
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.dtype != np.uint8:
        raise ContractError("clip frames must be a [T, H, W] uint8 array")
    t, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<IIII", t, h, w, int(label)))
        fh.write(frames.tobytes(order="C"))


def read_clip(path):
    try:
        with open(path, "rb") as fh:
            head = fh.read(20)
            if len(head) != 20 or head[:4] != CLIP_MAGIC:
                raise DataError(f"{path} is not a clip record")
            t, h, w, label = struct.unpack("<IIII", head[4:])
            raw = fh.read(t * h * w)
            if len(raw) != t * h * w or fh.read(1):
                raise DataError(f"{path} is truncated or oversized")
    except OSError as exc:
        raise DataError(f"cannot read clip {path}: {exc}") from exc
    frames = np.frombuffer(raw, dtype=np.uint8).reshape(t, h, w)
    return frames, label


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    frames: int
    height: int
    width: int
    mean: float
    std: float
    vocab: list
    splits: dict = field(default_factory=dict)  # split -> list of (clip id, label)

    def validate(self):
        if self.std <= 0:
            raise DataError("manifest global std must be positive")
        seen = set()
        for split, entries in self.splits.items():
            for clip_id, label in entries:
                if clip_id in seen:
                    raise DataError(f"clip {clip_id} appears in more than one split")
                seen.add(clip_id)
                if not 0 <= label < len(self.vocab):
                    raise DataError(f"clip {clip_id} has label {label} outside the vocabulary")
        return self

    def crop_size(self):
        return self.height - CROP_MARGIN, self.width - CROP_MARGIN


def write_manifest(path, manifest):
    lines = ["# lipwords dataset", "lipwords-manifest 1",
             f"frames {manifest.frames}", f"height {manifest.height}",
             f"width {manifest.width}", f"mean {manifest.mean!r}", f"std {manifest.std!r}"]
    for i, word in enumerate(manifest.vocab):
        lines.append(f"word {i} {word}")
    for split in sorted(manifest.splits):
        for clip_id, label in manifest.splits[split]:
            lines.append(f"clip {split} {clip_id} {label}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    fields = {}
    vocab = {}
    splits = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "lipwords-manifest":
                if parts[1] != "1":
                    raise DataError(f"unsupported manifest version {parts[1]}")
            elif parts[0] in ("frames", "height", "width"):
                fields[parts[0]] = int(parts[1])
            elif parts[0] in ("mean", "std"):
                fields[parts[0]] = float(parts[1])
            elif parts[0] == "word":
                vocab[int(parts[1])] = parts[2]
            elif parts[0] == "clip":
                splits.setdefault(parts[1], []).append((parts[2], int(parts[3])))
            else:
                raise DataError(f"unknown manifest statement {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise DataError(f"malformed manifest line {ln}: {line!r}") from exc
    missing = {"frames", "height", "width", "mean", "std"} - set(fields)
    if missing:
        raise DataError(f"manifest is missing fields: {sorted(missing)}")
    words = [vocab[i] for i in range(len(vocab))] if sorted(vocab) == list(range(len(vocab))) else None
    if words is None:
        raise DataError("manifest vocabulary indices are not dense from 0")
    manifest = DatasetManifest(fields["frames"], fields["height"], fields["width"],
                               fields["mean"], fields["std"], words, splits)
    return manifest.validate()


class ClipDataset:
    """A manifest plus the directory of clip records it references."""

    def __init__(self, root):
        self.root = str(root)
        self.manifest = read_manifest(os.path.join(self.root, "manifest.txt"))

    def clip_path(self, clip_id):
        return os.path.join(self.root, "clips", clip_id + ".clip")

    def load(self, clip_id):
        frames, label = read_clip(self.clip_path(clip_id))
        m = self.manifest
        if frames.shape != (m.frames, m.height, m.width):
            raise DataError(f"clip {clip_id} has shape {frames.shape}, manifest says "
                            f"{(m.frames, m.height, m.width)}")
        return frames, label

    def split(self, name):
        try:
            return self.manifest.splits[name]
        except KeyError:
            raise DataError(f"unknown split {name!r}") from None


# ------------------------------------------------------- landmarks and crop

def read_landmarks(path):
    """Landmark text file: per frame a blank-line-separated block of 66
    "x y" lines.  Returns [T, 66, 2] float coordinates."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read landmarks {path}: {exc}") from exc
    blocks = [b for b in text.split("\n\n") if b.strip()]
    frames = []
    for block in blocks:
        rows = [line.split() for line in block.splitlines() if line.strip()]
        if len(rows) != 66 or any(len(r) != 2 for r in rows):
            raise DataError(f"{path}: each frame needs exactly 66 'x y' lines")
        frames.append([[float(x), float(y)] for x, y in rows])
    if not frames:
        raise DataError(f"{path}: no landmark frames")
    return np.asarray(frames, dtype=np.float64)


def _bilinear_resize(frames, out_h, out_w, top, left, bottom, right):
    """Sample a window [top:bottom, left:right] of every frame onto an
    out_h x out_w grid with bilinear interpolation and edge clamping."""
    t, h, w = frames.shape
    ys = np.linspace(top, bottom, out_h)
    xs = np.linspace(left, right, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    f = frames.astype(np.float64)
    top_row = f[:, y0][:, :, x0] * (1 - wx) + f[:, y0][:, :, x1] * wx
    bot_row = f[:, y1][:, :, x0] * (1 - wx) + f[:, y1][:, :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def crop_mouth(frames, landmarks, out_size=122, margin=1.3):
    """Crop the mouth region identically in all frames and resize.

    The window is the median (over frames) bounding box of the mouth
    landmarks, scaled by ``margin`` and squared to its longer side; using
    medians keeps single-frame landmark glitches from moving the crop.
    """
    frames = np.asarray(frames)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if frames.ndim != 3 or len(landmarks) != len(frames):
        raise ContractError("need [T, H, W] frames and landmarks for every frame")
    if landmarks.shape[1:] != (66, 2):
        raise DataError(f"expected 66 (x, y) landmarks per frame, got {landmarks.shape[1:]}")
    median = np.median(landmarks, axis=0)  # [66, 2]
    mouth = median[MOUTH_LANDMARKS]
    x_min, y_min = mouth.min(axis=0)
    x_max, y_max = mouth.max(axis=0)
    if x_max <= x_min or y_max <= y_min:
        raise DataError("mouth landmark box has zero area")
    side = max(x_max - x_min, y_max - y_min) * margin
    cx, cy = (x_min + x_max) / 2.0, (y_min + y_max) / 2.0
    half = side / 2.0
    window = _bilinear_resize(frames, out_size, out_size,
                              cy - half, cx - half, cy + half, cx + half)
    return np.clip(np.rint(window), 0, 255).astype(np.uint8)


# ------------------------------------------------- normalization, augment

def normalize_clip(frames, manifest):
    """(pixel/255 - mean) / std with the train-split statistics."""
    if manifest.std <= 0:
        raise DataError("manifest std must be positive")
    scaled = frames.astype(np.float32) / np.float32(255.0)
    return (scaled - np.float32(manifest.mean)) / np.float32(manifest.std)


@dataclass(frozen=True)
class AugmentSpec:
    max_offset: int = 5
    flip_probability: float = 0.5
    enabled: bool = True


def augment(frames, rng, spec=AugmentSpec()):
    """Crop (and maybe flip) a whole clip consistently.

    One integer offset pair and one flip decision are drawn per clip and
    applied to all of its frames.  With augmentation disabled (or no
    rng), this is the deterministic center crop.
    """
    t, h, w = frames.shape
    crop_h, crop_w = h - 2 * spec.max_offset, w - 2 * spec.max_offset
    if crop_h < 1 or crop_w < 1:
        raise DataError(f"stored frames {h}x{w} are too small for +-{spec.max_offset} crops")
    dy = dx = 0
    flip = False
    if spec.enabled and rng is not None:
        dy, dx = (int(v) for v in rng.integers(-spec.max_offset, spec.max_offset + 1, size=2))
        flip = bool(rng.random() < spec.flip_probability)
    top = spec.max_offset + dy
    left = spec.max_offset + dx
    out = frames[:, top:top + crop_h, left:left + crop_w]
    if flip:
        out = out[:, :, ::-1]
    return out


# ---------------------------------------------------------------- batching

def load_batches(dataset, split, batch_size, rng=None, augment_spec=None, dtype=np.float32):
    """Yield (clips Tensor [N, 1, T, h, w], labels int array) over a split.

    Training (an rng plus augment spec) shuffles per epoch and augments;
    a trailing single-clip batch is dropped there because train-mode
    batch norm needs at least two rows.  Evaluation keeps the manifest
    order, center-crops, and emits every clip.
    """
    entries = list(dataset.split(split))
    training = augment_spec is not None and augment_spec.enabled
    if training:
        if rng is None:
            raise ConfigError("training batches need an rng for shuffling and augmentation")
        order = rng.permutation(len(entries))
        entries = [entries[i] for i in order]
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        if training and len(chunk) < 2:
            break  # documented: drop a trailing singleton in train mode
        clips, labels = [], []
        for clip_id, label in chunk:
            frames, file_label = dataset.load(clip_id)
            if file_label != label:
                raise DataError(f"clip {clip_id}: file label {file_label} != manifest label {label}")
            cropped = augment(frames, rng if training else None,
                              augment_spec or AugmentSpec(enabled=False))
            clips.append(normalize_clip(cropped, dataset.manifest))
            labels.append(label)
        batch = np.stack(clips)[:, None].astype(dtype, copy=False)
        yield Tensor(batch), np.asarray(labels, dtype=np.int64)


# ------------------------------------------------------ synthetic corpus

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _word_strings(rng, count):
    words = []
    seen = set()
    while len(words) < count:
        syllables = rng.integers(2, 4)
        word = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                       for _ in range(syllables))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


@dataclass
class _Shape:
    """A reusable stroke template: two oriented bars plus a blob.

    Several words share one template, so single frames look alike across
    those words; what separates them is motion (see _Glyph).  This keeps
    per-frame appearance weakly informative and short-term dynamics
    strongly informative."""

    angles: np.ndarray   # [2] initial orientation per stroke
    centers: np.ndarray  # [2, 2] start position in unit coords
    widths: np.ndarray   # [2] stroke widths in unit coords
    blob: np.ndarray     # [2] blob start


@dataclass
class _Glyph:
    """One word's frame sequence: a shape template plus word-specific
    motion (spin, drift, traversal direction)."""

    shape: _Shape
    length: int
    spins: np.ndarray       # [2] radians over the whole sequence
    drifts: np.ndarray      # [2, 2] position drift over the sequence
    blob_drift: np.ndarray  # [2]
    reverse: bool           # traverse the trajectory backwards
    marker: bool = False    # extra "suffix" frame appended to the sequence


def _draw_shape(rng):
    return _Shape(
        angles=rng.uniform(0, np.pi, 2),
        centers=rng.uniform(0.3, 0.7, (2, 2)),
        widths=rng.uniform(0.045, 0.08, 2),
        blob=rng.uniform(0.25, 0.75, 2),
    )


def _draw_glyph(rng, shape, length=None):
    return _Glyph(
        shape=shape,
        length=int(length if length is not None else rng.integers(8, 17)),
        spins=rng.uniform(1.2, 2.8, 2) * rng.choice([-1.0, 1.0], 2),
        drifts=rng.uniform(0.18, 0.4, (2, 2)) * rng.choice([-1.0, 1.0], (2, 2)),
        blob_drift=rng.uniform(0.15, 0.45, 2) * rng.choice([-1.0, 1.0], 2),
        reverse=bool(rng.random() < 0.5),
    )


def _render_glyph(glyph, size):
    """Render the whole sequence at ``size`` pixels; float frames in [0, 1]."""
    n = glyph.length + (1 if glyph.marker else 0)
    grid = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    frames = np.zeros((n, size, size))
    shape = glyph.shape
    for k in range(glyph.length):
        phase = k / max(glyph.length - 1, 1)
        if glyph.reverse:
            phase = 1.0 - phase
        img = np.zeros((size, size))
        for s in range(2):
            angle = shape.angles[s] + glyph.spins[s] * (phase - 0.5)
            cy, cx = shape.centers[s] + glyph.drifts[s] * (phase - 0.5)
            dist = np.abs((xx - cx) * np.sin(angle) - (yy - cy) * np.cos(angle))
            along = np.abs((xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle))
            img += np.exp(-(dist / shape.widths[s]) ** 2) * (along < 0.3)
        by, bx = shape.blob + glyph.blob_drift * (phase - 0.5)
        img += 0.8 * np.exp(-(((yy - by) ** 2 + (xx - bx) ** 2) / 0.01))
        frames[k] = img
    if glyph.marker:
        # plural-style suffix: a distinct bright double bar
        img = np.zeros((size, size))
        img += (np.abs(yy - 0.2) < 0.05) * 0.9
        img += (np.abs(yy - 0.4) < 0.05) * 0.9
        frames[-1] = img
    return np.clip(frames, 0.0, 1.2) / 1.2


def _assemble_clip(rng, target_frames, total_frames, distractors, size, noise):
    """Embed the target at a random offset, fill around it with distractor
    frames, add pixel noise, and quantize to uint8."""
    length = len(target_frames)
    if length > total_frames:
        raise ConfigError(f"word of {length} frames cannot fit a {total_frames}-frame clip")
    offset = int(rng.integers(0, total_frames - length + 1))
    clip = np.empty((total_frames, size, size))
    filler_idx = 0
    filler = []
    while len(filler) < total_frames:
        pick = distractors[int(rng.integers(0, len(distractors)))]
        filler.extend(pick)
    for i in range(total_frames):
        if offset <= i < offset + length:
            clip[i] = target_frames[i - offset]
        else:
            clip[i] = filler[filler_idx]
            filler_idx += 1
    clip = clip + rng.normal(0.0, noise, clip.shape)
    return np.clip(np.rint(clip * 255), 0, 255).astype(np.uint8)


def gen_synthetic(out_dir, vocab_size, clips_per_word, seed, frames=31,
                  frame_size=122, noise=0.06):
    """Generate a deterministic word-in-utterance corpus on disk.

    Each word owns a seeded glyph sequence of 8-16 frames; each clip
    embeds that sequence at a random temporal offset among distractor
    sequences drawn from an out-of-vocabulary pool, with pixel noise.
    The last vocabulary word is a planted near-duplicate of its
    predecessor: same glyphs plus one extra suffix frame, the visual
    analog of a singular/plural word pair.  Splits give each word
    roughly 1/12 of its clips to val and test each (50 train / 5 val /
    5 test at 60 clips per word).

    Same seed, same arguments -> byte-identical dataset.
    """
    if vocab_size < 2:
        raise ConfigError("need at least 2 words")
    if clips_per_word < 2:
        raise ConfigError("need at least 2 clips per word")
    name_seq, glyph_seq, clip_seq = np.random.SeedSequence(seed).spawn(3)
    name_rng = np.random.default_rng(name_seq)
    glyph_rng = np.random.default_rng(glyph_seq)

    words = _word_strings(name_rng, vocab_size - 1)
    words.append(words[-1] + "s")  # planted minimal pair

    # words share stroke templates; their motion parameters are private,
    # so discriminating them leans on short-term dynamics
    templates = [_draw_shape(glyph_rng) for _ in range(max(2, vocab_size // 3))]
    glyphs = [_draw_glyph(glyph_rng, templates[i % len(templates)])
              for i in range(vocab_size - 1)]
    twin = _Glyph(**vars(glyphs[-1]))
    twin.marker = True
    glyphs.append(twin)
    oov_count = max(4, vocab_size // 2)
    oov = [_render_glyph(_draw_glyph(glyph_rng, templates[i % len(templates)]), frame_size)
           for i in range(oov_count)]
    rendered = [_render_glyph(g, frame_size) for g in glyphs]

    os.makedirs(os.path.join(out_dir, "clips"), exist_ok=True)
    n_val = max(1, clips_per_word // 12)
    n_test = n_val
    n_train = clips_per_word - n_val - n_test
    splits = {"train": [], "val": [], "test": []}
    train_sum, train_sqsum, train_pixels = 0.0, 0.0, 0
    stream = iter(clip_seq.spawn(vocab_size * clips_per_word))

    for label, word in enumerate(words):
        for k in range(clips_per_word):
            rng = np.random.default_rng(next(stream))
            clip = _assemble_clip(rng, rendered[label], frames, oov, frame_size, noise)
            clip_id = f"{word}_{k:04d}"
            write_clip(os.path.join(out_dir, "clips", clip_id + ".clip"), clip, label)
            split = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
            splits[split].append((clip_id, label))
            if split == "train":
                scaled = clip.astype(np.float64) / 255.0
                train_sum += scaled.sum()
                train_sqsum += (scaled * scaled).sum()
                train_pixels += scaled.size

    if train_pixels == 0:
        raise ConfigError("no training clips were generated; increase clips_per_word")
    mean = train_sum / train_pixels
    var = train_sqsum / train_pixels - mean * mean
    if var <= 1e-12:
        raise DataError("degenerate corpus: training pixels have (near-)zero variance")
    manifest = DatasetManifest(frames, frame_size, frame_size, float(mean),
                               float(np.sqrt(var)), words, splits).validate()
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return ClipDataset(out_dir)


def dataset_digest(root):
    """SHA-256 over the manifest and every clip record (determinism checks)."""
    digest = hashlib.sha256()
    with open(os.path.join(root, "manifest.txt"), "rb") as fh:
        digest.update(fh.read())
    clips_dir = os.path.join(root, "clips")
    for name in sorted(os.listdir(clips_dir)):
        with open(os.path.join(clips_dir, name), "rb") as fh:
            digest.update(name.encode())
            digest.update(fh.read())
    return digest.hexdigest()
