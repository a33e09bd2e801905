"""Deterministic synthetic fashion corpus: products, rendered images, captions.

Products are attribute tuples (category, color, pattern, sleeve, neckline)
drawn without duplicates from the 864-tuple space. Every attribute has a
dedicated visual encoding in the 24x24 rendering and a dedicated slot in the
caption grammar, so all four tasks are solvable by construction:

* background level encodes category (with slight per-quadrant shading),
* the body block carries the palette color, with a pattern-free center
  swatch so color survives mean pooling,
* stripes / dots encode pattern inside the body block,
* a left-edge bar of category-independent brightness encodes sleeve length,
* fixed glyph blocks encode neckline and pattern level.

The tokenizer is a whitespace tokenizer over a closed 120-word vocabulary
plus PAD/SOS/EOS/UNK.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

TASKS = ("xmr", "tgir", "scr", "fic")

CATEGORIES = ("dress", "shirt", "toptee", "pants")
COLORS = ("black", "white", "red", "blue", "green", "yellow", "purple", "orange")
PATTERNS = ("solid", "striped", "dotted")
SLEEVES = ("no", "short", "long")
NECKLINES = ("crew", "v", "collar")

ATTR_SPACE = len(CATEGORIES) * len(COLORS) * len(PATTERNS) * len(SLEEVES) * len(NECKLINES)

NUM_CLASSES = len(CATEGORIES) * len(PATTERNS)  # subcategory label = category x pattern

IMAGE_SIZE = 24

# one bit per channel (0.15 / 0.85): any split on a channel cleanly halves the
# color set, so a depth-3 greedy tree always separates all eight colors
PALETTE = {
    "black": (0.15, 0.15, 0.15),
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.85, 0.15),
    "blue": (0.15, 0.15, 0.85),
    "yellow": (0.85, 0.85, 0.15),
    "purple": (0.85, 0.15, 0.85),
    "orange": (0.15, 0.85, 0.85),
    "white": (0.85, 0.85, 0.85),
}

PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
NUM_SPECIALS = 4
NUM_WORDS = 120


class DataError(ValueError):
    """Infeasible sizes, unknown splits, malformed files."""


@dataclass(frozen=True)
class Product:
    pid: int
    category: str
    color: str
    pattern: str
    sleeve: str
    neckline: str

    @property
    def attrs(self) -> tuple:
        return (self.category, self.color, self.pattern, self.sleeve, self.neckline)

    @property
    def label(self) -> int:
        return CATEGORIES.index(self.category) * len(PATTERNS) + PATTERNS.index(self.pattern)


# ---------------------------------------------------------------------------
# vocabulary and tokenizer
# ---------------------------------------------------------------------------


def _build_word_list() -> list:
    words = list(CATEGORIES) + list(COLORS) + list(PATTERNS) + list(SLEEVES) + list(NECKLINES)
    words += ["sleeve", "sleeves", "neckline", "pattern", "in", "with",
              "is", "has", "instead", "of", "and", "."]
    # reserved headroom keeps the vocabulary at its designed size; never emitted
    words += [f"filler{i:02d}" for i in range(NUM_WORDS - len(words))]
    assert len(words) == NUM_WORDS
    return words


class Vocab:
    """Closed-vocabulary whitespace tokenizer. ids: PAD=0 SOS=1 EOS=2 UNK=3, words from 4."""

    def __init__(self):
        self.words = _build_word_list()
        self.word_to_id = {w: NUM_SPECIALS + i for i, w in enumerate(self.words)}
        self.size = NUM_SPECIALS + NUM_WORDS

    def tokenize(self, text: str) -> list:
        return [self.word_to_id.get(w, UNK_ID) for w in text.split()]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            if i < NUM_SPECIALS:
                raise DataError(f"cannot detokenize special id {i}")
            out.append(self.words[i - NUM_SPECIALS])
        return " ".join(out)

    def encode_words(self, words, max_len: int) -> list:
        """[SOS] + word ids + [EOS], padded to max_len with PAD."""
        ids = [SOS_ID] + [self.word_to_id[w] for w in words] + [EOS_ID]
        if len(ids) > max_len:
            raise DataError(f"sequence of {len(ids)} tokens exceeds max length {max_len}")
        return ids + [PAD_ID] * (max_len - len(ids))

    def strip_sentinels(self, ids) -> list:
        """Word list from a decoded id sequence (drops SOS/EOS/PAD, stops at EOS)."""
        out = []
        for i in ids:
            if i == SOS_ID or i == PAD_ID:
                continue
            if i == EOS_ID:
                break
            if i == UNK_ID:
                out.append("<unk>")
            else:
                out.append(self.words[i - NUM_SPECIALS])
        return out


VOCAB = Vocab()


# ---------------------------------------------------------------------------
# caption grammar
# ---------------------------------------------------------------------------


def caption_words(product: Product, template: int) -> list:
    """One of two surface templates; every attribute mentioned exactly once."""
    p = product
    if template == 0:
        return [p.sleeve, "sleeve", p.pattern, p.category, "in", p.color, ".",
                p.neckline, "neckline", "."]
    return [p.color, p.category, "with", p.pattern, "pattern", ".",
            p.sleeve, "sleeve", ".", p.neckline, "neckline", "."]


def caption(product: Product, rng: np.random.Generator) -> list:
    return caption_words(product, int(rng.integers(0, 2)))


def parse_caption(words) -> tuple | None:
    """Recover the attribute tuple, or None when the words fit neither template."""
    words = list(words)
    for template in (0, 1):
        if template == 0:
            if len(words) != 10:
                continue
            sleeve, kw1, pattern, category, kw2, color, dot1, neckline, kw3, dot2 = words
            if (kw1, kw2, kw3, dot1, dot2) != ("sleeve", "in", "neckline", ".", "."):
                continue
        else:
            if len(words) != 12:
                continue
            (color, category, kw1, pattern, kw2, dot1,
             sleeve, kw3, dot2, neckline, kw4, dot3) = words
            if (kw1, kw2, kw3, kw4) != ("with", "pattern", "sleeve", "neckline"):
                continue
            if (dot1, dot2, dot3) != (".", ".", "."):
                continue
        if (category in CATEGORIES and color in COLORS and pattern in PATTERNS
                and sleeve in SLEEVES and neckline in NECKLINES):
            return (category, color, pattern, sleeve, neckline)
    return None


def is_grammatical(words) -> bool:
    return parse_caption(words) is not None


MUTABLE_ATTRS = ("color", "pattern", "sleeve", "neckline")


def modifier_words(delta) -> list:
    """Clause per changed attribute, joined with 'and'; always carries old and new."""
    clauses = []
    for attr, old, new in delta:
        if attr == "color" or attr == "pattern":
            clauses.append(["is", new, "instead", "of", old])
        elif attr == "sleeve":
            clauses.append(["has", new, "sleeves", "instead", "of", old])
        elif attr == "neckline":
            clauses.append(["has", new, "neckline", "instead", "of", old])
        else:
            raise DataError(f"attribute {attr!r} cannot appear in a modifier")
    out = []
    for i, c in enumerate(clauses):
        if i:
            out.append("and")
        out.extend(c)
    return out


def parse_modifier(words) -> tuple:
    """Inverse of modifier_words; raises on anything off-grammar."""
    words = list(words)
    clauses, cur = [], []
    for w in words:
        if w == "and":
            clauses.append(cur)
            cur = []
        else:
            cur.append(w)
    clauses.append(cur)
    delta = []
    for c in clauses:
        if len(c) == 5 and c[0] == "is" and c[2:4] == ["instead", "of"]:
            new, old = c[1], c[4]
            if new in COLORS and old in COLORS:
                delta.append(("color", old, new))
            elif new in PATTERNS and old in PATTERNS:
                delta.append(("pattern", old, new))
            else:
                raise DataError(f"unparseable clause {c}")
        elif len(c) == 6 and c[0] == "has" and c[3:5] == ["instead", "of"]:
            new, old = c[1], c[5]
            if c[2] == "sleeves" and new in SLEEVES and old in SLEEVES:
                delta.append(("sleeve", old, new))
            elif c[2] == "neckline" and new in NECKLINES and old in NECKLINES:
                delta.append(("neckline", old, new))
            else:
                raise DataError(f"unparseable clause {c}")
        else:
            raise DataError(f"unparseable clause {c}")
    return tuple(delta)


def apply_delta(attrs: tuple, delta) -> tuple:
    out = dict(zip(("category", "color", "pattern", "sleeve", "neckline"), attrs))
    for attr, old, new in delta:
        if out[attr] != old:
            raise DataError(f"delta expects {attr}={old!r}, product has {out[attr]!r}")
        out[attr] = new
    return tuple(out[k] for k in ("category", "color", "pattern", "sleeve", "neckline"))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

BODY = slice(6, 18)
SWATCH = slice(12, 15)  # pattern-free center block, aligned to one 3x3 pooling cell
SLEEVE_BAR_LEN = {"no": 4, "short": 12, "long": 22}
NECKLINE_LEVEL = {"crew": 0.15, "v": 0.50, "collar": 0.85}
PATTERN_LEVEL = {"solid": 0.20, "striped": 0.50, "dotted": 0.80}
QUADRANT_SHADE = ((0.00, 0.03), (0.06, 0.09))  # (top/bottom, left/right) offsets


def render_image(product: Product) -> np.ndarray:
    """(24, 24, 3) float image in [0, 1], a pure function of the attributes."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    base = 0.10 + 0.15 * CATEGORIES.index(product.category)
    half = IMAGE_SIZE // 2
    for qi, rows in enumerate((slice(0, half), slice(half, IMAGE_SIZE))):
        for qj, cols in enumerate((slice(0, half), slice(half, IMAGE_SIZE))):
            img[rows, cols, :] = base + QUADRANT_SHADE[qi][qj]

    img[BODY, BODY, :] = PALETTE[product.color]
    if product.pattern == "striped":
        for r in range(BODY.start, BODY.stop, 3):
            if not SWATCH.start <= r < SWATCH.stop:
                img[r, BODY, :] = 1.0
    elif product.pattern == "dotted":
        for r in range(7, BODY.stop, 4):
            for c in range(7, BODY.stop, 4):
                if not (SWATCH.start <= r < SWATCH.stop and SWATCH.start <= c < SWATCH.stop):
                    img[r, c, :] = 0.0

    img[:SLEEVE_BAR_LEN[product.sleeve], 0:2, :] = (1.0, 0.0, 0.0)
    img[0:3, 9:15, :] = (0.0, 0.0, NECKLINE_LEVEL[product.neckline])
    img[0:3, 21:24, :] = (0.0, PATTERN_LEVEL[product.pattern], 0.0)
    return img


def pooled_cells(image: np.ndarray, grid: int = 8) -> np.ndarray:
    """Mean-pool to a (grid, grid, C) cell grid, flattened to one feature row."""
    h, w, c = image.shape
    ch, cw = h // grid, w // grid
    cells = image.reshape(grid, ch, grid, cw, c).mean(axis=(1, 3))
    return cells.reshape(-1)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


class Catalog:
    """Seeded product set with disjoint train/val/test splits and cached renders."""

    def __init__(self, seed: int, products: list, split_of: dict):
        self.seed = seed
        self.products = products
        self.split_of = split_of
        self.by_pid = {p.pid: p for p in products}
        self._image_cache = {}

    def products_in(self, split: str) -> list:
        if split not in ("train", "val", "test"):
            raise DataError(f"unknown split {split!r}")
        return [p for p in self.products if self.split_of[p.pid] == split]

    def image(self, pid: int) -> np.ndarray:
        img = self._image_cache.get(pid)
        if img is None:
            img = self._image_cache[pid] = render_image(self.by_pid[pid])
        return img

    def images(self, pids) -> np.ndarray:
        return np.stack([self.image(pid) for pid in pids])


def _all_attr_tuples() -> list:
    out = []
    for cat in CATEGORIES:
        for col in COLORS:
            for pat in PATTERNS:
                for slv in SLEEVES:
                    for nck in NECKLINES:
                        out.append((cat, col, pat, slv, nck))
    return out


def gen_catalog(seed: int, n_products: int) -> Catalog:
    """Duplicate-free attribute sampling with an 80/10/10 split."""
    if n_products < 1:
        raise DataError("need at least one product")
    if n_products > ATTR_SPACE:
        raise DataError(f"{n_products} products exceed the {ATTR_SPACE}-tuple attribute space")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA7A)))
    order = rng.permutation(ATTR_SPACE)[:n_products]
    tuples = _all_attr_tuples()
    products = [Product(pid, *tuples[idx]) for pid, idx in enumerate(order)]
    n_train = int(n_products * 0.8)
    n_val = int(n_products * 0.1)
    split_of = {}
    for i, p in enumerate(products):
        split_of[p.pid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return Catalog(seed, products, split_of)


# ---------------------------------------------------------------------------
# task datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairRecord:
    pid: int
    words: tuple
    label: int


@dataclass(frozen=True)
class TgirTriplet:
    ref_pid: int
    target_pid: int
    delta: tuple
    words: tuple


@dataclass
class TaskDatasets:
    split: str
    records: dict  # task -> list

    def sizes(self) -> dict:
        return {task: len(recs) for task, recs in self.records.items()}


def _pair_records(products, size, rng) -> list:
    recs = []
    n = len(products)
    for i in range(size):
        p = products[i % n] if size <= n else products[int(rng.integers(0, n))]
        recs.append(PairRecord(p.pid, tuple(caption(p, rng)), p.label))
    return recs


def _eligible_tgir_pairs(products) -> list:
    """All ordered same-category pairs whose attribute delta has size 1 or 2."""
    by_cat = {}
    for p in products:
        by_cat.setdefault(p.category, []).append(p)
    pairs = []
    for cat in CATEGORIES:
        for ref in by_cat.get(cat, ()):
            for tgt in by_cat.get(cat, ()):
                if ref.pid == tgt.pid:
                    continue
                delta = tuple((attr, getattr(ref, attr), getattr(tgt, attr))
                              for attr in MUTABLE_ATTRS
                              if getattr(ref, attr) != getattr(tgt, attr))
                if 1 <= len(delta) <= 2:
                    pairs.append((ref, tgt, delta))
    return pairs


def _tgir_triplets(products, size, rng, allow_fewer: bool = False) -> list:
    pairs = _eligible_tgir_pairs(products)
    if not pairs:
        raise DataError("infeasible sizes: no same-category pair differs in 1-2 attributes")
    if size > len(pairs):
        if not allow_fewer:
            raise DataError(f"infeasible sizes: {size} triplets requested, "
                            f"only {len(pairs)} eligible pairs exist")
        size = len(pairs)
    picked = rng.permutation(len(pairs))[:size]
    return [TgirTriplet(pairs[i][0].pid, pairs[i][1].pid, pairs[i][2],
                        tuple(modifier_words(pairs[i][2]))) for i in map(int, picked)]


def build_task_datasets(catalog: Catalog, sizes: dict, split: str = "train",
                        seed_salt: int = 0, allow_fewer_triplets: bool = False) -> TaskDatasets:
    """Per-task record lists; xmr/scr/fic share the split's (image, caption) pool.

    ``allow_fewer_triplets`` caps the tgir size at the number of eligible
    same-category pairs instead of raising (used for small eval splits).
    """
    unknown = set(sizes) - set(TASKS)
    if unknown:
        raise DataError(f"unknown task sizes: {sorted(unknown)}")
    products = catalog.products_in(split)
    if not products:
        raise DataError(f"split {split!r} is empty")
    records = {}
    for task in TASKS:
        size = sizes.get(task, 0)
        rng = np.random.default_rng(
            np.random.SeedSequence((catalog.seed, seed_salt, TASKS.index(task),
                                    ("train", "val", "test").index(split))))
        if task == "tgir":
            records[task] = (_tgir_triplets(products, size, rng, allow_fewer_triplets)
                             if size else [])
        else:
            records[task] = _pair_records(products, size, rng) if size else []
    return TaskDatasets(split, records)


def eval_sizes(catalog: Catalog, split: str) -> dict:
    """One pair per product; as many triplets as products (capped by feasibility)."""
    n = len(catalog.products_in(split))
    return {"xmr": n, "tgir": n, "scr": n, "fic": n}


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class XmrBatch:
    images: np.ndarray
    tokens: np.ndarray
    pids: np.ndarray


@dataclass
class TgirBatch:
    ref_images: np.ndarray
    tokens: np.ndarray
    target_images: np.ndarray
    target_pids: np.ndarray


@dataclass
class ScrBatch:
    images: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray


@dataclass
class FicBatch:
    images: np.ndarray
    prefix: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray


def pad_token_matrix(word_seqs, max_len: int) -> np.ndarray:
    width = max(len(w) for w in word_seqs) + 2
    if width > max_len:
        raise DataError(f"needed width {width} exceeds max length {max_len}")
    return np.asarray([VOCAB.encode_words(w, width) for w in word_seqs], dtype=np.int64)


def _distinct_by(records, key, count, rng) -> list:
    """Sample ``count`` records with pairwise-distinct ``key`` (for in-batch negatives)."""
    order = rng.permutation(len(records))
    picked, seen = [], set()
    for idx in order:
        r = records[int(idx)]
        k = key(r)
        if k in seen:
            continue
        seen.add(k)
        picked.append(r)
        if len(picked) == count:
            return picked
    raise DataError(f"cannot draw {count} records with distinct identities "
                    f"({len(picked)} available)")


def make_batch(task: str, dataset: TaskDatasets, catalog: Catalog,
               rng: np.random.Generator, batch_size: int, max_len: int):
    recs = dataset.records[task]
    if not recs:
        raise DataError(f"no records for task {task!r}")
    if task == "xmr":
        picked = _distinct_by(recs, lambda r: r.pid, min(batch_size, len(recs)), rng)
        return XmrBatch(catalog.images([r.pid for r in picked]),
                        pad_token_matrix([r.words for r in picked], max_len),
                        np.asarray([r.pid for r in picked]))
    if task == "tgir":
        picked = _distinct_by(recs, lambda r: r.target_pid, min(batch_size, len(recs)), rng)
        return TgirBatch(catalog.images([r.ref_pid for r in picked]),
                         pad_token_matrix([r.words for r in picked], max_len),
                         catalog.images([r.target_pid for r in picked]),
                         np.asarray([r.target_pid for r in picked]))
    if task == "scr":
        idx = rng.integers(0, len(recs), size=min(batch_size, len(recs)))
        picked = [recs[int(i)] for i in idx]
        return ScrBatch(catalog.images([r.pid for r in picked]),
                        pad_token_matrix([r.words for r in picked], max_len),
                        np.asarray([r.label for r in picked]))
    if task == "fic":
        idx = rng.integers(0, len(recs), size=min(batch_size, len(recs)))
        picked = [recs[int(i)] for i in idx]
        return fic_batch_from_records(picked, catalog, max_len)
    raise DataError(f"unknown task {task!r}")


def fic_batch_from_records(records, catalog: Catalog, max_len: int) -> FicBatch:
    full = pad_token_matrix([r.words for r in records], max_len)
    prefix = full[:, :-1]
    targets = full[:, 1:]
    mask = (targets != PAD_ID).astype(np.float64)
    return FicBatch(catalog.images([r.pid for r in records]), prefix, targets, mask)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_catalog(catalog: Catalog, out_dir: str):
    """JSON manifest plus a raw little-endian float64 image blob in pid order."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "seed": catalog.seed,
        "n_products": len(catalog.products),
        "image_size": IMAGE_SIZE,
        "products": [[p.pid, *p.attrs] for p in catalog.products],
        "splits": {s: [p.pid for p in catalog.products_in(s)]
                   for s in ("train", "val", "test")},
    }
    with open(os.path.join(out_dir, "catalog.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    blob = np.stack([render_image(p) for p in catalog.products]).astype("<f8")
    with open(os.path.join(out_dir, "images.bin"), "wb") as fh:
        fh.write(blob.tobytes())


def load_catalog(in_dir: str) -> Catalog:
    path = os.path.join(in_dir, "catalog.json")
    if not os.path.exists(path):
        raise DataError(f"missing catalog manifest {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    products = [Product(int(row[0]), *row[1:]) for row in manifest["products"]]
    split_of = {}
    for split, pids in manifest["splits"].items():
        for pid in pids:
            split_of[pid] = split
    return Catalog(manifest["seed"], products, split_of)


def save_datasets(datasets: TaskDatasets, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    for task, recs in datasets.records.items():
        path = os.path.join(out_dir, f"{datasets.split}_{task}.jsonl")
        with open(path, "w") as fh:
            for r in recs:
                if task == "tgir":
                    row = {"ref_pid": r.ref_pid, "target_pid": r.target_pid,
                           "delta": [list(d) for d in r.delta], "words": list(r.words)}
                else:
                    row = {"pid": r.pid, "words": list(r.words), "label": r.label}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_datasets(in_dir: str, split: str) -> TaskDatasets:
    records = {}
    for task in TASKS:
        path = os.path.join(in_dir, f"{split}_{task}.jsonl")
        if not os.path.exists(path):
            raise DataError(f"missing dataset file {path}")
        recs = []
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                if task == "tgir":
                    recs.append(TgirTriplet(row["ref_pid"], row["target_pid"],
                                            tuple(tuple(d) for d in row["delta"]),
                                            tuple(row["words"])))
                else:
                    recs.append(PairRecord(row["pid"], tuple(row["words"]), row["label"]))
        records[task] = recs
    return TaskDatasets(split, records)
