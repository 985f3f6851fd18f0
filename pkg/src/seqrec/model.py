"""Bidirectional transformer over item sequences, with a causal variant.

Internal item ids run 1..num_items. Id 0 is the padding token and id
num_items + 1 is the mask token, so the embedding table has num_items + 2
rows; output scores cover exactly the item rows. Inputs are padded on the
left, which keeps the most recent position (and the appended mask token at
prediction time) at index max_len - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

PAD_ID = 0

ATTENTION_MODES = ("bidirectional", "causal")


@dataclass
class ModelConfig:
    num_items: int
    hidden_dim: int = 64
    num_heads: int = 2
    num_layers: int = 2
    max_len: int = 50
    dropout_p: float = 0.1
    mask_proportion: float = 0.2
    attention_mode: str = "bidirectional"
    ln_eps: float = 1e-12
    use_positional_embedding: bool = True
    use_pffn: bool = True
    use_layer_norm: bool = True
    use_residual: bool = True
    use_dropout: bool = True

    @property
    def mask_id(self) -> int:
        return self.num_items + 1

    @property
    def vocab_rows(self) -> int:
        return self.num_items + 2

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def ffn_dim(self) -> int:
        return 4 * self.hidden_dim

    def validate(self) -> None:
        if self.num_items < 1:
            raise ConfigError(f"num_items must be >= 1, got {self.num_items}")
        if self.hidden_dim < 1 or self.num_heads < 1:
            raise ConfigError(
                f"hidden_dim and num_heads must be positive, got "
                f"{self.hidden_dim} and {self.num_heads}"
            )
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not (0.0 < self.mask_proportion < 1.0):
            raise ConfigError(
                f"mask_proportion must be in (0, 1), got {self.mask_proportion}"
            )
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class LayerParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ModelParams:
    item_embeddings: Tensor
    positional_embeddings: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    out_w: Tensor = None
    out_b: Tensor = None
    item_bias: Tensor = None

    def named(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping used by the optimizer and checkpoints."""
        out = {
            "item_embeddings": self.item_embeddings,
            "positional_embeddings": self.positional_embeddings,
        }
        for i, lp in enumerate(self.layers):
            prefix = f"layer{i}."
            for h, t in enumerate(lp.wq):
                out[prefix + f"head{h}.wq"] = t
            for h, t in enumerate(lp.wk):
                out[prefix + f"head{h}.wk"] = t
            for h, t in enumerate(lp.wv):
                out[prefix + f"head{h}.wv"] = t
            out[prefix + "wo"] = lp.wo
            out[prefix + "ffn.w1"] = lp.ffn_w1
            out[prefix + "ffn.b1"] = lp.ffn_b1
            out[prefix + "ffn.w2"] = lp.ffn_w2
            out[prefix + "ffn.b2"] = lp.ffn_b2
            out[prefix + "ln1.gain"] = lp.ln1_gain
            out[prefix + "ln1.bias"] = lp.ln1_bias
            out[prefix + "ln2.gain"] = lp.ln2_gain
            out[prefix + "ln2.bias"] = lp.ln2_bias
        out["output.w"] = self.out_w
        out["output.b"] = self.out_b
        out["output.item_bias"] = self.item_bias
        return out


def build_attention_mask(mode: str, pad_flags) -> np.ndarray:
    """Additive (n, n) mask: 0.0 where attention is allowed, -inf where blocked.

    Pad columns are blocked for everyone; causal mode also blocks columns to
    the right of the query row. Pad rows keep their own diagonal entry open
    so no row is fully blocked.
    """
    pad = np.asarray(pad_flags, dtype=bool)
    if pad.ndim != 1:
        raise ContractError(f"pad_flags must be 1-d, got shape {pad.shape}")
    return _mask_batch(mode, pad[None, :])[0]


def _mask_batch(mode: str, pad: np.ndarray) -> np.ndarray:
    if mode not in ATTENTION_MODES:
        raise ConfigError(f"unknown attention_mode {mode!r}")
    b, n = pad.shape
    allowed = np.broadcast_to(~pad[:, None, :], (b, n, n)).copy()
    if mode == "causal":
        allowed &= np.tril(np.ones((n, n), dtype=bool))
    # pad query rows attend only to themselves; their states are never read
    allowed[pad] = False
    diag = np.arange(n)
    allowed[:, diag, diag] |= pad
    mask = np.zeros((b, n, n))
    mask[~allowed] = T.NEG_INF
    return mask


class TransformerRecommender:
    """Stacked self-attention encoder scoring the next (or masked) item."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        config.validate()
        self.config = config
        self.params = params

    # ----- forward ---------------------------------------------------------

    def forward(self, ids, training: bool = False, rng=None) -> Tensor:
        """Final hidden states (max_len, hidden_dim) for one id sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ContractError(f"forward takes one sequence, got shape {ids.shape}")
        h, _ = self.forward_ids(ids[None, :], training=training, rng=rng)
        return Tensor(h.data[0])

    def forward_ids(
        self,
        ids: np.ndarray,
        training: bool = False,
        rng=None,
        collect_attention: bool = False,
    ):
        """Hidden states (batch, max_len, hidden_dim) for a batch of id rows.

        Returns (hidden, attention) where attention is a list of
        num_layers lists of per-head (batch, n, n) weight arrays when
        collect_attention is set, else None.
        """
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != cfg.max_len:
            raise ContractError(
                f"expected ids of shape (batch, {cfg.max_len}), got {ids.shape}"
            )
        pad = ids == PAD_ID
        mask = _mask_batch(cfg.attention_mode, pad)
        h = self._embed(ids)
        maps: list[list[np.ndarray]] | None = [] if collect_attention else None
        for lp in self.params.layers:
            h = self._layer(h, mask, lp, training, rng, maps)
        return h, maps

    def _embed(self, ids: np.ndarray) -> Tensor:
        h = T.embedding_lookup(self.params.item_embeddings, ids)
        if self.config.use_positional_embedding:
            h = T.add(h, self.params.positional_embeddings)
        return h

    def _dropout(self, x: Tensor, training: bool, rng) -> Tensor:
        cfg = self.config
        p = cfg.dropout_p if cfg.use_dropout else 0.0
        return T.dropout(x, p, training, rng)

    def _attention(self, h: Tensor, mask: np.ndarray, lp: LayerParams,
                   maps: list | None) -> Tensor:
        cfg = self.config
        temperature = 1.0 / math.sqrt(cfg.head_dim)
        heads = []
        head_maps = []
        for i in range(cfg.num_heads):
            q = T.matmul(h, lp.wq[i])
            k = T.matmul(h, lp.wk[i])
            v = T.matmul(h, lp.wv[i])
            scores = T.scale(T.matmul(q, T.transpose_last2(k)), temperature)
            probs = T.softmax_masked(scores, mask)
            heads.append(T.matmul(probs, v))
            if maps is not None:
                head_maps.append(probs.data.copy())
        if maps is not None:
            maps.append(head_maps)
        return T.matmul(T.concat_last(heads), lp.wo)

    def _pffn(self, h: Tensor, lp: LayerParams) -> Tensor:
        inner = T.gelu(T.add(T.matmul(h, lp.ffn_w1), lp.ffn_b1))
        return T.add(T.matmul(inner, lp.ffn_w2), lp.ffn_b2)

    def _layer(self, h: Tensor, mask: np.ndarray, lp: LayerParams,
               training: bool, rng, maps: list | None) -> Tensor:
        cfg = self.config
        sub = self._dropout(self._attention(h, mask, lp, maps), training, rng)
        a = T.add(h, sub) if cfg.use_residual else sub
        if cfg.use_layer_norm:
            a = T.layer_norm(a, lp.ln1_gain, lp.ln1_bias, cfg.ln_eps)
        if not cfg.use_pffn:
            return a
        sub2 = self._dropout(self._pffn(a, lp), training, rng)
        out = T.add(a, sub2) if cfg.use_residual else sub2
        if cfg.use_layer_norm:
            out = T.layer_norm(out, lp.ln2_gain, lp.ln2_bias, cfg.ln_eps)
        return out

    # ----- scoring ---------------------------------------------------------

    def output_logits(self, hidden: Tensor) -> Tensor:
        """Scores over the num_items catalog for (rows, hidden_dim) states.

        Projects, applies gelu, then multiplies by the transposed item rows
        of the shared embedding table: column j scores internal item j + 1.
        """
        p = self.params
        x = T.gelu(T.add(T.matmul(hidden, p.out_w), p.out_b))
        item_rows = T.slice_rows(p.item_embeddings, 1, self.config.num_items + 1)
        return T.add(T.matmul(x, T.transpose_last2(item_rows)), p.item_bias)

    def _prediction_input(self, history: list[int]) -> np.ndarray:
        cfg = self.config
        ids = list(history)[-(cfg.max_len - 1):] + [cfg.mask_id]
        row = np.full(cfg.max_len, PAD_ID, dtype=np.int64)
        row[cfg.max_len - len(ids):] = ids
        return row

    def score_histories(self, histories: list[list[int]], chunk: int = 256) -> np.ndarray:
        """Catalog logits (len(histories), num_items) at the appended mask slot."""
        cfg = self.config
        for hist in histories:
            if not hist:
                raise ContractError("cannot score an empty history")
        rows = np.stack([self._prediction_input(h) for h in histories])
        out = np.empty((len(histories), cfg.num_items))
        last = cfg.max_len - 1
        for start in range(0, len(histories), chunk):
            h, _ = self.forward_ids(rows[start:start + chunk])
            hidden = Tensor(h.data[:, last, :])
            out[start:start + chunk] = self.output_logits(hidden).data
        return out

    def predict_next(self, history: list[int], top_k: int = 10) -> list[tuple[int, float]]:
        """Top-k (item, probability) continuations, best first.

        Ties in probability break toward the smaller item id.
        """
        if not history:
            raise ContractError("predict_next needs a non-empty history")
        if top_k < 1:
            raise ContractError(f"top_k must be >= 1, got {top_k}")
        logits = self.score_histories([history])[0]
        shifted = logits - logits.max()
        exp = np.exp(shifted)
        probs = exp / exp.sum()
        items = np.arange(1, self.config.num_items + 1)
        order = np.lexsort((items, -probs))
        k = min(top_k, self.config.num_items)
        return [(int(items[i]), float(probs[i])) for i in order[:k]]

    def attention_maps(self, ids) -> list[list[np.ndarray]]:
        """Per-layer, per-head (max_len, max_len) attention weights, eval mode."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ContractError(f"attention_maps takes one sequence, got {ids.shape}")
        _, maps = self.forward_ids(ids[None, :], collect_attention=True)
        return [[head[0] for head in layer] for layer in maps]
