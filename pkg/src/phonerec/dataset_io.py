"""On-disk dataset format.

manifest.tsv   one row per utterance:
               id, feature_file, prompted_phones, read_phones, task, domain
miscues.tsv    one row per miscue: id, kind, position, detail ("-" when absent)
feats/*.bin    little-endian binary: uint32 T, uint32 F, then T*F float32
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .corpus import FeatureSequence, MiscueRecord, Utterance
from .phones import PhoneAlphabet, PhoneSequence

MANIFEST_COLUMNS = 6
MANIFEST_NAME = "manifest.tsv"
MISCUES_NAME = "miscues.tsv"
FEATURE_DIR = "feats"


class DatasetFormatError(ValueError):
    pass


def write_feature_matrix(path, matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2D, got shape {matrix.shape}")
    t, f = matrix.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", t, f))
        fh.write(matrix.astype("<f4", copy=False).tobytes())


def read_feature_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DatasetFormatError(f"{path}: truncated feature header")
        t, f = struct.unpack("<II", header)
        payload = fh.read(4 * t * f)
        if len(payload) != 4 * t * f:
            raise DatasetFormatError(f"{path}: truncated feature payload")
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after feature payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, f).astype(np.float32)


def write_dataset(utterances, directory, alphabet: PhoneAlphabet):
    directory = Path(directory)
    (directory / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    miscue_rows = []
    for utt in utterances:
        rel = f"{FEATURE_DIR}/{utt.id}.bin"
        write_feature_matrix(directory / rel, utt.features.frames)
        manifest_rows.append("\t".join([
            utt.id, rel,
            " ".join(utt.prompted.symbols(alphabet)),
            " ".join(utt.read.symbols(alphabet)),
            utt.task, utt.domain,
        ]))
        for m in utt.miscues:
            detail = alphabet.symbol_of(m.detail) if m.detail is not None else "-"
            miscue_rows.append("\t".join([utt.id, m.kind, str(m.position), detail]))
    (directory / MANIFEST_NAME).write_text(
        "".join(r + "\n" for r in manifest_rows), encoding="utf-8")
    (directory / MISCUES_NAME).write_text(
        "".join(r + "\n" for r in miscue_rows), encoding="utf-8")


def _parse_phones(alphabet, text, where):
    try:
        return PhoneSequence.from_symbols(alphabet, text.split())
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{where}: {exc}")


def read_dataset(directory, alphabet: PhoneAlphabet):
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetFormatError(f"{manifest}: missing manifest")
    miscues = _read_miscues(directory / MISCUES_NAME, alphabet)
    utterances = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != MANIFEST_COLUMNS:
                raise DatasetFormatError(
                    f"{manifest} line {lineno}: expected {MANIFEST_COLUMNS} columns, got {len(cols)}")
            utt_id, rel, prompted, read, task, domain = cols
            where = f"{manifest} line {lineno}"
            try:
                utt = Utterance(
                    id=utt_id,
                    features=FeatureSequence(read_feature_matrix(directory / rel)),
                    prompted=_parse_phones(alphabet, prompted, where),
                    read=_parse_phones(alphabet, read, where),
                    task=task, domain=domain,
                    miscues=miscues.get(utt_id, []))
            except ValueError as exc:
                raise DatasetFormatError(f"{where}: {exc}")
            utterances.append(utt)
    return utterances


def _read_miscues(path, alphabet):
    records: dict[str, list] = {}
    if not Path(path).exists():
        return records
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DatasetFormatError(
                    f"{path} line {lineno}: expected 4 columns, got {len(cols)}")
            utt_id, kind, position, detail = cols
            try:
                rec = MiscueRecord(
                    kind, int(position),
                    None if detail == "-" else alphabet.id_of(detail))
            except (KeyError, ValueError) as exc:
                raise DatasetFormatError(f"{path} line {lineno}: {exc}")
            records.setdefault(utt_id, []).append(rec)
    return records


def dataset_roundtrip(utterances, directory, alphabet: PhoneAlphabet):
    """Write then read back; the caller asserts structural equality."""
    write_dataset(utterances, directory, alphabet)
    return read_dataset(directory, alphabet)
