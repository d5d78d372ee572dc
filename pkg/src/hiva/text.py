"""AU description encoding: tokens -> token embeddings -> sentence matrix -> contextual matrix."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
PAD_ID = 0


def default_vocab_path() -> Path:
    return Path(str(resources.files("hiva") / "resources" / "vocab.txt"))


def default_descriptions_path() -> Path:
    return Path(str(resources.files("hiva") / "resources" / "au_descriptions.txt"))


def build_vocab(texts: Sequence[str]) -> list[str]:
    """Whole words from ``texts`` plus single-character pieces so that any
    lowercase alphanumeric word can still be segmented."""
    words = sorted({w for t in texts for w in re.findall(r"[a-z0-9]+", t.lower())})
    chars = list("abcdefghijklmnopqrstuvwxyz0123456789")
    punct = list(".,;:!?'\"()-/")
    pieces = chars + [f"##{c}" for c in chars] + punct
    vocab = list(SPECIAL_TOKENS)
    for tok in pieces + words:
        if tok not in vocab:
            vocab.append(tok)
    return vocab


def write_vocab(vocab: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab) + "\n", encoding="utf-8")


@dataclass
class TokenSequence:
    token_ids: list[int]
    au_index: int = 0
    variant_index: int = 0


class WordPieceTokenizer:
    """Greedy longest-match WordPiece over a one-token-per-line vocabulary."""

    def __init__(self, vocab_path: str | Path | None = None):
        from tokenizers import Tokenizer, models, normalizers, pre_tokenizers

        self.vocab_path = Path(vocab_path) if vocab_path else default_vocab_path()
        self._tok = Tokenizer(models.WordPiece.from_file(str(self.vocab_path), unk_token="[UNK]"))
        self._tok.normalizer = normalizers.BertNormalizer(lowercase=True)
        self._tok.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
        self.vocab_size = self._tok.get_vocab_size()

    def tokens(self, text: str) -> list[str]:
        return self._tok.encode(text, add_special_tokens=False).tokens

    def ids(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False).ids


def tokenize(description: str, vocab: WordPieceTokenizer, max_len: int,
             au_index: int = 0, variant_index: int = 0) -> TokenSequence:
    if not description or not description.strip():
        raise ValueError("cannot tokenize an empty description")
    ids = vocab.ids(description)[:max_len]
    if not ids:
        ids = [vocab._tok.token_to_id("[UNK]")]
    return TokenSequence(token_ids=ids, au_index=au_index, variant_index=variant_index)


def pad_sequences(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into ``ids [N, L]`` and a validity mask ``[N, L]``."""
    length = max(len(s.token_ids) for s in seqs)
    ids = torch.full((len(seqs), length), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), length), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s.token_ids)] = torch.tensor(s.token_ids)
        mask[i, :len(s.token_ids)] = True
    return ids, mask


class TokenizedDescriptions:
    """All variants of every AU description, tokenized once."""

    def __init__(self, descriptions, tokenizer: WordPieceTokenizer, max_len: int):
        self.au_ids = list(descriptions.au_ids)
        self.seqs = [
            [tokenize(t, tokenizer, max_len, i, v) for v, t in enumerate(texts)]
            for i, texts in enumerate(descriptions.variants)
        ]

    @property
    def num_variants(self) -> list[int]:
        return [len(v) for v in self.seqs]

    def select(self, variant_idx: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        return pad_sequences([self.seqs[i][v] for i, v in enumerate(variant_idx)])

    def canonical(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.select([0] * len(self.seqs))

    def sample(self, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        return self.select([int(rng.integers(n)) for n in self.num_variants])


class TextEncoder(nn.Module):
    """Small BERT-style encoder: word + segment + position embeddings and a
    post-norm transformer stack. Only the last ``trainable_layers`` layers
    receive gradients."""

    def __init__(self, vocab_size: int, width: int = 64, layers: int = 4, heads: int = 4,
                 max_len: int = 32, trainable_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        self.word = nn.Embedding(vocab_size, width, padding_idx=PAD_ID)
        self.position = nn.Embedding(max_len, width)
        self.segment = nn.Embedding(2, width)
        self.norm = nn.LayerNorm(width)
        self.layers = nn.ModuleList([
            nn.TransformerEncoderLayer(width, heads, dim_feedforward=4 * width, dropout=dropout,
                                       activation="gelu", batch_first=True)
            for _ in range(layers)
        ])
        self.trainable_layers = trainable_layers
        self.freeze()

    def freeze(self) -> None:
        n_frozen = len(self.layers) - self.trainable_layers
        frozen = [self.word, self.position, self.segment, self.norm, *self.layers[:max(n_frozen, 0)]]
        for m in frozen:
            for p in m.parameters():
                p.requires_grad_(False)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.word(ids) + self.position(pos)[None] + self.segment(torch.zeros_like(ids))
        x = self.norm(x)
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=~mask)
        return x * mask[..., None]


def encode_tokens(seq: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    """Token embeddings ``[L, d']`` for a single sequence."""
    ids, mask = pad_sequences([seq])
    return encoder(ids, mask)[0]


def pool_sentences(tokens: torch.Tensor | Sequence[torch.Tensor], mask: torch.Tensor | None = None) -> torch.Tensor:
    """Unweighted mean over each description's valid tokens.

    Accepts a padded ``[N, L, d']`` tensor with a ``[N, L]`` mask, or a list of
    per-AU ``[L_i, d']`` tensors.
    """
    if mask is None:
        if isinstance(tokens, torch.Tensor):
            return tokens.mean(dim=-2)
        return torch.stack([t.mean(dim=0) for t in tokens])
    m = mask.to(tokens.dtype)[..., None]
    return (tokens * m).sum(dim=-2) / m.sum(dim=-2)


def diff_loss(H: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the row-normalized Gram matrix from identity."""
    norms = H.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("diff_loss: zero-norm row in sentence matrix")
    Hn = H / norms
    n = H.shape[0]
    gram = Hn @ Hn.T
    return ((gram - torch.eye(n, dtype=H.dtype, device=H.device)) ** 2).sum() / n ** 2


class Contextualizer(nn.Module):
    """Input projection followed by a transformer encoder over the AU rows.

    No positional encoding is added, so the map is permutation-equivariant.
    """

    def __init__(self, in_width: int, width: int = 64, layers: int = 3, heads: int = 8,
                 dropout: float = 0.0):
        super().__init__()
        self.proj = nn.Linear(in_width, width)
        layer = nn.TransformerEncoderLayer(width, heads, dim_feedforward=4 * width, dropout=dropout,
                                           activation="gelu", batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.proj(H)[None])[0]


def contextualize(H: torch.Tensor, contextualizer: Contextualizer) -> torch.Tensor:
    return contextualizer(H)


@dataclass
class TextFeatures:
    tokens: torch.Tensor  # [N, L, d'] token embeddings
    mask: torch.Tensor  # [N, L]
    sentences: torch.Tensor  # [N, d']
    context: torch.Tensor  # [N, d]


class TextBranch(nn.Module):
    """Token encoder plus contextualizer; produces everything the
    interaction module needs from one choice of description variants."""

    def __init__(self, vocab_size: int, text_width: int, width: int, layers: int, heads: int,
                 max_len: int, trainable_layers: int, context_layers: int, context_heads: int,
                 dropout: float = 0.0):
        super().__init__()
        self.encoder = TextEncoder(vocab_size, text_width, layers, heads, max_len, trainable_layers, dropout)
        self.contextualizer = Contextualizer(text_width, width, context_layers, context_heads, dropout)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> TextFeatures:
        tokens = self.encoder(ids, mask)
        H = pool_sentences(tokens, mask)
        return TextFeatures(tokens=tokens, mask=mask, sentences=H, context=self.contextualizer(H))


# ---------------------------------------------------------------------------
# cache


CACHE_VARIANT_POLICY = "canonical-variant-0"


def cache_text_features(descriptions: TokenizedDescriptions, text_branch: TextBranch, checkpoint_hash: str,
                        cache_dir: str | Path | None = None) -> TextFeatures:
    """Return canonical-variant text features, reusing ``cache_dir`` when its
    manifest matches ``checkpoint_hash`` and recomputing (and rewriting) otherwise."""
    if cache_dir is not None:
        cached = load_text_cache(cache_dir, checkpoint_hash)
        if cached is not None:
            return cached
    was_training = text_branch.training
    text_branch.eval()
    with torch.no_grad():
        feats = text_branch(*descriptions.canonical())
    text_branch.train(was_training)
    if cache_dir is not None:
        save_text_cache(feats, cache_dir, checkpoint_hash)
    return feats


def save_text_cache(feats: TextFeatures, cache_dir: str | Path, checkpoint_hash: str) -> None:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_file({
        "tokens": feats.tokens.contiguous(), "mask": feats.mask.contiguous(),
        "sentences": feats.sentences.contiguous(), "context": feats.context.contiguous(),
    }, str(cache_dir / "text_cache.safetensors"))
    manifest = {
        "checkpoint_hash": checkpoint_hash,
        "N": feats.context.shape[0],
        "d": feats.context.shape[1],
        "variant_policy": CACHE_VARIANT_POLICY,
    }
    (cache_dir / "text_cache.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_text_cache(cache_dir: str | Path, checkpoint_hash: str) -> TextFeatures | None:
    cache_dir = Path(cache_dir)
    manifest_path = cache_dir / "text_cache.json"
    if not manifest_path.is_file():
        return None
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("checkpoint_hash") != checkpoint_hash or manifest.get("variant_policy") != CACHE_VARIANT_POLICY:
        return None
    t = load_file(str(cache_dir / "text_cache.safetensors"))
    return TextFeatures(tokens=t["tokens"], mask=t["mask"], sentences=t["sentences"], context=t["context"])
