"""Synthetic pseudo-speech corpora with known word boundaries.

Each utterance is a token sequence rendered to frames: token v contributes
`duration` copies of a fixed prototype vector plus Gaussian noise, so the
gold boundary of a token is the last frame of its run. Translations are
derived from the transcription by a seeded rule. Target ids reserve 0 for
end-of-sequence, so content tokens map into 1..target_vocab; the blank id
on the source side is source_vocab (one past the content ids).
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusError

FEATURE_MAGIC = b"ADFT"
FEATURE_VERSION = 1
EOS_ID = 0  # reserved on the target side; also used as decoder start symbol

TRANSLATION_RULES = ("identity", "dictionary", "reverse")


@dataclass(frozen=True)
class SynthSpec:
    source_vocab: int = 32
    target_vocab: int = 32
    train_utterances: int = 2000
    test_utterances: int = 200
    tokens_min: int = 4
    tokens_max: int = 10
    duration_min: int = 4
    duration_max: int = 12
    d_feat: int = 16
    noise: float = 0.3
    rule: str = "dictionary"
    seed: int = 0

    def validate(self) -> None:
        if self.source_vocab < 2 or self.target_vocab < 2:
            raise ConfigError("vocab sizes must be >= 2")
        if self.target_vocab < self.source_vocab:
            raise ConfigError(
                "target_vocab must cover the source vocabulary "
                f"({self.target_vocab} < {self.source_vocab})"
            )
        if self.duration_min > self.duration_max or self.duration_min < 1:
            raise ConfigError(
                f"bad duration range [{self.duration_min}, {self.duration_max}]"
            )
        if self.tokens_min > self.tokens_max or self.tokens_min < 1:
            raise ConfigError(f"bad token range [{self.tokens_min}, {self.tokens_max}]")
        if self.noise < 0:
            raise ConfigError("noise scale must be >= 0")
        if self.rule not in TRANSLATION_RULES:
            raise ConfigError(f"unknown translation rule {self.rule!r}")


@dataclass
class Utterance:
    uid: str
    frames: np.ndarray  # (T, d_feat)
    transcription: np.ndarray  # source content ids
    translation: np.ndarray  # target ids, ends with EOS_ID
    gold_boundaries: np.ndarray  # last frame index of each token run

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]
    source_vocab: int
    target_vocab: int
    d_feat: int

    @property
    def blank_id(self) -> int:
        return self.source_vocab

    def split(self, prefix: str) -> list[Utterance]:
        return [u for u in self.utterances if u.uid.startswith(prefix)]


def _translate(tokens: np.ndarray, mapping: np.ndarray, rule: str) -> np.ndarray:
    content = mapping[tokens]
    if rule == "reverse":
        content = content[::-1]
    return np.concatenate([content, [EOS_ID]]).astype(np.int64)


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Generate the corpus; all randomness splits off the single seed."""
    spec.validate()
    total = spec.train_utterances + spec.test_utterances
    root = np.random.SeedSequence(spec.seed)
    proto_seq, map_seq, *utt_seqs = root.spawn(2 + total)
    prototypes = np.random.default_rng(proto_seq).normal(
        size=(spec.source_vocab, spec.d_feat)
    )
    if spec.rule == "identity":
        mapping = np.arange(spec.source_vocab, dtype=np.int64) + 1
    else:
        perm = np.random.default_rng(map_seq).permutation(spec.source_vocab)
        mapping = perm.astype(np.int64) + 1  # content target ids are 1-based

    utterances = []
    for i, seq in enumerate(utt_seqs):
        rng = np.random.default_rng(seq)
        split_name = "train" if i < spec.train_utterances else "test"
        index = i if i < spec.train_utterances else i - spec.train_utterances
        n_tok = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
        tokens = rng.integers(0, spec.source_vocab, size=n_tok)
        durations = rng.integers(spec.duration_min, spec.duration_max + 1, size=n_tok)
        frames = np.repeat(prototypes[tokens], durations, axis=0)
        if spec.noise > 0:
            frames = frames + rng.normal(scale=spec.noise, size=frames.shape)
        utterances.append(
            Utterance(
                uid=f"{split_name}-{index:05d}",
                frames=frames,
                transcription=tokens.astype(np.int64),
                translation=_translate(tokens, mapping, spec.rule),
                gold_boundaries=np.cumsum(durations) - 1,
            )
        )
    return Corpus(
        utterances=utterances,
        source_vocab=spec.source_vocab,
        target_vocab=spec.target_vocab,
        d_feat=spec.d_feat,
    )


# ---------------------------------------------------------------- file formats


def _ids(arr: np.ndarray) -> str:
    return " ".join(str(int(v)) for v in arr)


def save_corpus(corpus: Corpus, out_dir) -> list[str]:
    """Write manifest.tsv, features.bin, and the two vocabulary files."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    features_path = os.path.join(out_dir, "features.bin")
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        for u in corpus.utterances:
            writer.writerow(
                [u.uid, u.num_frames, _ids(u.transcription), _ids(u.translation),
                 _ids(u.gold_boundaries)]
            )
    with open(features_path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_VERSION))
        for u in corpus.utterances:
            uid = u.uid.encode("utf-8")
            fh.write(struct.pack("<I", len(uid)))
            fh.write(uid)
            fh.write(struct.pack("<II", u.num_frames, corpus.d_feat))
            fh.write(u.frames.astype("<f4").tobytes())
    src_path = os.path.join(out_dir, "vocab.src.txt")
    with open(src_path, "w") as fh:
        fh.write(f"# source ids 0..{corpus.source_vocab - 1}; blank = {corpus.source_vocab}\n")
        for i in range(corpus.source_vocab + 1):
            fh.write(f"{i}\n")
    tgt_path = os.path.join(out_dir, "vocab.tgt.txt")
    with open(tgt_path, "w") as fh:
        fh.write(f"# target ids 1..{corpus.target_vocab}; end-of-sequence = {EOS_ID}\n")
        for i in range(corpus.target_vocab + 1):
            fh.write(f"{i}\n")
    return [manifest_path, features_path, src_path, tgt_path]


def _read_vocab(path) -> int:
    """Number of content ids in a vocabulary file (one reserved id per file)."""
    count = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                count += 1
    if count < 2:
        raise CorpusError(f"vocabulary file {path} lists too few ids")
    return count - 1


def load_corpus(in_dir) -> Corpus:
    manifest_path = os.path.join(in_dir, "manifest.tsv")
    features_path = os.path.join(in_dir, "features.bin")
    rows = []
    with open(manifest_path, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            rows.append(row)

    blob = open(features_path, "rb").read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CorpusError(f"truncated features file: needed {what} at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != FEATURE_MAGIC:
        raise CorpusError("bad magic in features file at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FEATURE_VERSION:
        raise CorpusError(f"unsupported features version {version} at byte 4")
    features: dict[str, np.ndarray] = {}
    d_feat = None
    while off < len(blob):
        (nlen,) = struct.unpack("<I", take(4, "id length"))
        uid = take(nlen, "utterance id").decode("utf-8")
        t, d = struct.unpack("<II", take(8, "frame header"))
        payload = take(4 * t * d, f"frames of {uid}")
        features[uid] = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float64)
        if d_feat is None:
            d_feat = d
        elif d_feat != d:
            raise CorpusError(f"inconsistent feature dim for {uid} at byte {off}")

    if len(rows) != len(features):
        raise CorpusError(
            f"manifest lists {len(rows)} utterances, features file has {len(features)}"
        )

    utterances = []
    for row in rows:
        uid, t_str, trans, transl, gold = row
        if uid not in features:
            raise CorpusError(f"utterance {uid} missing from features file")
        frames = features[uid]
        if frames.shape[0] != int(t_str):
            raise CorpusError(f"frame count mismatch for {uid}")
        utterances.append(
            Utterance(
                uid=uid,
                frames=frames,
                transcription=_parse_ids(trans),
                translation=_parse_ids(transl),
                gold_boundaries=_parse_ids(gold),
            )
        )
    return Corpus(
        utterances=utterances,
        source_vocab=_read_vocab(os.path.join(in_dir, "vocab.src.txt")),
        target_vocab=_read_vocab(os.path.join(in_dir, "vocab.tgt.txt")),
        d_feat=int(d_feat) if d_feat is not None else 0,
    )


def _parse_ids(text: str) -> np.ndarray:
    return np.array([int(v) for v in text.split()], dtype=np.int64)


# -------------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: list[str]
    frames: np.ndarray  # (B, T, d_feat) zero-padded
    frame_mask: np.ndarray  # (B, T) 1.0 on valid frames
    transcriptions: list[np.ndarray]
    targets: np.ndarray  # (B, T_y) padded with EOS_ID
    target_mask: np.ndarray  # (B, T_y)
    gold_boundaries: list[np.ndarray] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.ids)


def _pack(utts: list[Utterance]) -> Batch:
    b = len(utts)
    t_max = max(u.num_frames for u in utts)
    d = utts[0].frames.shape[1]
    frames = np.zeros((b, t_max, d))
    mask = np.zeros((b, t_max))
    ty_max = max(len(u.translation) for u in utts)
    targets = np.full((b, ty_max), EOS_ID, dtype=np.int64)
    tmask = np.zeros((b, ty_max))
    for i, u in enumerate(utts):
        frames[i, : u.num_frames] = u.frames
        mask[i, : u.num_frames] = 1.0
        targets[i, : len(u.translation)] = u.translation
        tmask[i, : len(u.translation)] = 1.0
    return Batch(
        ids=[u.uid for u in utts],
        frames=frames,
        frame_mask=mask,
        transcriptions=[u.transcription for u in utts],
        targets=targets,
        target_mask=tmask,
        gold_boundaries=[u.gold_boundaries for u in utts],
    )


def make_batches(
    utterances: list[Utterance], max_frames_per_batch: int, seed: int, epoch: int = 0
) -> list[Batch]:
    """Length-bucketed, frame-budget-capped batches in seeded order.

    The budget caps B * max(T) per batch, i.e. the padded frame count.
    """
    if not utterances:
        return []
    longest = max(utterances, key=lambda u: u.num_frames)
    if longest.num_frames > max_frames_per_batch:
        raise CorpusError(
            f"utterance {longest.uid} has {longest.num_frames} frames, "
            f"over the {max_frames_per_batch}-frame budget"
        )
    ordered = sorted(utterances, key=lambda u: (u.num_frames, u.uid))
    groups: list[list[Utterance]] = []
    current: list[Utterance] = []
    for u in ordered:
        # sorted ascending, so u.num_frames is the padded length if added
        if current and (len(current) + 1) * u.num_frames > max_frames_per_batch:
            groups.append(current)
            current = []
        current.append(u)
    if current:
        groups.append(current)
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(groups))
    return [_pack(groups[i]) for i in order]
