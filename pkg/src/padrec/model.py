"""Triple-expert sequential recommender.

Four item representations share one vocabulary:
  collab_rec     learnable table for the recommendation-specific expert
  collab_align   learnable table for the alignment expert
  mlp_align(text)  projection of the frozen text matrix (alignment expert)
  mlp_llm(text)    projection of the frozen text matrix (LLM expert)

Each expert encodes the behavior sequence with its own encoder (causal
self-attention or GRU) and scores a target by dot product. A gate network
conditioned on the target's training-frequency bucket mixes the three
expert logits on the probability simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EXPERTS = ("id", "align", "llm")
NEG_INF = -1e9


@dataclass
class ModelConfig:
    d_c: int = 64
    d_t: int = 256
    encoder: str = "attention"  # or "gru"
    layers: int = 2
    heads: int = 2
    max_len: int = 23
    dropout: float = 0.1
    n_buckets: int = 10
    bucket_dim: int = 8
    gate_hidden: int = 16
    mlp_hidden: int = 128
    experts: tuple[str, ...] = EXPERTS
    gating: str = "frequency_aware"  # or "global_learned"

    def __post_init__(self):
        if self.encoder not in ("attention", "gru"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "attention" and self.d_c % self.heads != 0:
            raise ValueError("d_c must be divisible by heads")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.gating not in ("frequency_aware", "global_learned"):
            raise ValueError(f"unknown gating {self.gating!r}")
        bad = [e for e in self.experts if e not in EXPERTS]
        if bad:
            raise ValueError(f"unknown experts {bad}")
        if not self.experts:
            raise ValueError("at least one expert is required")


@dataclass
class FrequencyBucketMap:
    """Item -> bucket id in [1, n_buckets]; bucket 1 is warmest."""

    assignments: np.ndarray
    n_buckets: int

    def bucket_of(self, item_ids: np.ndarray) -> np.ndarray:
        return self.assignments[np.asarray(item_ids)]


def bucketize(train_frequencies: np.ndarray, n_buckets: int) -> FrequencyBucketMap:
    """Equal-count buckets over items sorted by (frequency desc, id asc).

    Items never seen in training land in the coldest bucket regardless of
    their quantile position.
    """
    freqs = np.asarray(train_frequencies)
    n_items = freqs.shape[0]
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    if n_buckets > n_items:
        raise ValueError(
            f"n_buckets ({n_buckets}) exceeds number of items ({n_items})")
    order = np.lexsort((np.arange(n_items), -freqs))
    assignments = np.empty(n_items, dtype=np.int64)
    ranks = np.arange(n_items)
    assignments[order] = ranks * n_buckets // n_items + 1
    assignments[freqs == 0] = n_buckets
    return FrequencyBucketMap(assignments, n_buckets)


# ---------------------------------------------------------------------------
# parameter init


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data.astype(ad.get_default_dtype()), requires_grad=True)


class AttentionEncoder:
    """Causal self-attention stack (pre-norm) with learned positions."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, L = cfg.d_c, cfg.max_len
        self.cfg = cfg
        self.params: dict[str, Tensor] = {
            "pos": _param(rng.normal(0.0, 0.02, size=(L, d)))
        }
        for i in range(cfg.layers):
            p = f"l{i}."
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                self.params[p + name] = _param(_xavier(rng, d, d))
            # no key bias: softmax rows are shift-invariant, it would be inert
            for name in ("bq", "bv", "bo", "b1", "b2"):
                self.params[p + name] = _param(np.zeros(d))
            for ln in ("ln1", "ln2"):
                self.params[p + ln + ".g"] = _param(np.ones(d))
                self.params[p + ln + ".b"] = _param(np.zeros(d))
        self.params["ln_f.g"] = _param(np.ones(d))
        self.params["ln_f.b"] = _param(np.zeros(d))
        causal = np.triu(np.full((L, L), NEG_INF), k=1)
        self._mask = causal[None, None, :, :]

    def forward(self, x: Tensor, lengths: np.ndarray, *, training: bool,
                rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        B, L, d = x.data.shape
        h, dh = cfg.heads, cfg.d_c // cfg.heads
        pm = self.params
        x = ad.scale(x, float(np.sqrt(d)))
        x = ad.add(x, ad.slice_rows(pm["pos"], 0, L))
        x = ad.dropout(x, cfg.dropout, rng, training)
        mask = Tensor(self._mask[:, :, :L, :L].astype(x.data.dtype))
        for i in range(cfg.layers):
            p = f"l{i}."
            a = ad.layernorm(x, pm[p + "ln1.g"], pm[p + "ln1.b"])
            q = ad.add(ad.matmul(a, pm[p + "wq"]), pm[p + "bq"])
            k = ad.matmul(a, pm[p + "wk"])
            v = ad.add(ad.matmul(a, pm[p + "wv"]), pm[p + "bv"])
            def heads(t):
                t = ad.reshape(t, (B, L, h, dh))
                return ad.transpose(t, (0, 2, 1, 3))
            q, k, v = heads(q), heads(k), heads(v)
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                              1.0 / np.sqrt(dh))
            probs = ad.softmax(ad.add(scores, mask), axis=-1)
            probs = ad.dropout(probs, cfg.dropout, rng, training)
            ctx = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
            ctx = ad.reshape(ctx, (B, L, d))
            ctx = ad.add(ad.matmul(ctx, pm[p + "wo"]), pm[p + "bo"])
            x = ad.add(x, ad.dropout(ctx, cfg.dropout, rng, training))
            f = ad.layernorm(x, pm[p + "ln2.g"], pm[p + "ln2.b"])
            f = ad.relu(ad.add(ad.matmul(f, pm[p + "w1"]), pm[p + "b1"]))
            f = ad.add(ad.matmul(f, pm[p + "w2"]), pm[p + "b2"])
            x = ad.add(x, ad.dropout(f, cfg.dropout, rng, training))
        x = ad.layernorm(x, pm["ln_f.g"], pm["ln_f.b"])
        return ad.select_position(x, lengths - 1)


class GruEncoder:
    """Stacked GRU; the user representation is the state at the last valid step."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_c
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        for i in range(cfg.layers):
            p = f"l{i}."
            for name in ("wr", "wz", "wn"):
                self.params[p + name] = _param(_xavier(rng, d, d))
            for name in ("ur", "uz", "un"):
                self.params[p + name] = _param(_xavier(rng, d, d))
            for name in ("br", "bz", "bn_x", "bn_h"):
                self.params[p + name] = _param(np.zeros(d))

    def forward(self, x: Tensor, lengths: np.ndarray, *, training: bool,
                rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        B, L, d = x.data.shape
        pm = self.params
        x = ad.dropout(x, cfg.dropout, rng, training)
        for i in range(cfg.layers):
            p = f"l{i}."
            state = Tensor(np.zeros((B, d), dtype=x.data.dtype))
            steps = []
            for t in range(L):
                xt = ad.select_time(x, t)
                r = ad.sigmoid(ad.add(ad.add(ad.matmul(xt, pm[p + "wr"]),
                                             ad.matmul(state, pm[p + "ur"])),
                                      pm[p + "br"]))
                z = ad.sigmoid(ad.add(ad.add(ad.matmul(xt, pm[p + "wz"]),
                                             ad.matmul(state, pm[p + "uz"])),
                                      pm[p + "bz"]))
                n = ad.tanh(ad.add(
                    ad.add(ad.matmul(xt, pm[p + "wn"]), pm[p + "bn_x"]),
                    ad.mul(r, ad.add(ad.matmul(state, pm[p + "un"]),
                                     pm[p + "bn_h"]))))
                one = Tensor(np.ones_like(z.data))
                state = ad.add(ad.mul(ad.sub(one, z), n), ad.mul(z, state))
                steps.append(state)
            x = ad.stack_time(steps)
        return ad.select_position(x, lengths - 1)


def _make_encoder(cfg: ModelConfig, rng: np.random.Generator):
    return AttentionEncoder(cfg, rng) if cfg.encoder == "attention" \
        else GruEncoder(cfg, rng)


# ---------------------------------------------------------------------------
# the model


@dataclass
class EmbeddingBank:
    collab_rec: Tensor
    collab_align: Tensor
    text: Tensor  # frozen, requires_grad False
    mlp: dict[str, Tensor] = field(default_factory=dict)


class PadModel:
    """Embedding bank + three experts + frequency-aware gate."""

    def __init__(self, n_items: int, text_matrix: np.ndarray, cfg: ModelConfig,
                 seed: int):
        if text_matrix.shape[0] != n_items:
            raise ValueError("text matrix row count must equal item count")
        cfg.d_t = int(text_matrix.shape[1])
        self.cfg = cfg
        self.n_items = n_items
        rng = ad.make_rng(seed, "init")
        dt, dc, H = cfg.d_t, cfg.d_c, cfg.mlp_hidden

        self.bank = EmbeddingBank(
            collab_rec=_param(rng.normal(0.0, 0.1, size=(n_items, dc))),
            collab_align=_param(rng.normal(0.0, 0.1, size=(n_items, dc))),
            text=Tensor(text_matrix.astype(ad.get_default_dtype())),
        )
        for prefix in ("mlp_align", "mlp_llm"):
            self.bank.mlp[f"{prefix}.w1"] = _param(_xavier(rng, dt, H))
            self.bank.mlp[f"{prefix}.b1"] = _param(np.zeros(H))
            self.bank.mlp[f"{prefix}.w2"] = _param(_xavier(rng, H, dc))
            self.bank.mlp[f"{prefix}.b2"] = _param(np.zeros(dc))
        self.fuse_w = _param(_xavier(rng, 2 * dc, dc))
        self.fuse_b = _param(np.zeros(dc))

        self.encoders = {e: _make_encoder(cfg, rng) for e in EXPERTS}

        gh, db = cfg.gate_hidden, cfg.bucket_dim
        self.gate: dict[str, Tensor] = {
            "buckets": _param(rng.normal(0.0, 0.1, size=(cfg.n_buckets, db))),
            "global": _param(np.zeros(len(EXPERTS))),
        }
        for e in EXPERTS:
            self.gate[f"{e}.w1"] = _param(_xavier(rng, db + 2 * dc, gh))
            self.gate[f"{e}.b1"] = _param(np.zeros(gh))
            # zero head: all experts start at equal weight
            self.gate[f"{e}.w2"] = _param(np.zeros((gh, 1)))
            self.gate[f"{e}.b2"] = _param(np.zeros(1))

        self.buckets: FrequencyBucketMap | None = None
        self.text_checksum = text_checksum(self.bank.text.data)

    # -- parameter registry -------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = {
            "collab_rec": self.bank.collab_rec,
            "collab_align": self.bank.collab_align,
            "fuse.w": self.fuse_w,
            "fuse.b": self.fuse_b,
        }
        out.update(self.bank.mlp)
        for e, enc in self.encoders.items():
            for k, v in enc.params.items():
                out[f"enc_{e}.{k}"] = v
        for k, v in self.gate.items():
            out[f"gate.{k}"] = v
        return out

    def trainable(self, phase: str, *, freeze_collab: bool = False,
                  experts: tuple[str, ...] | None = None) -> dict[str, Tensor]:
        """Parameter subset updated by the given phase."""
        experts = experts or self.cfg.experts
        all_params = self.params()
        if phase == "pretrain":
            keys = ["collab_rec"] + [k for k in all_params if k.startswith("enc_id.")]
        elif phase == "align":
            keys = [k for k in all_params
                    if k.startswith(("mlp_align.", "enc_align.")) or
                    k in ("fuse.w", "fuse.b")]
            if not freeze_collab:
                keys.append("collab_align")
        elif phase == "finetune":
            keys = []
            if "id" in experts:
                keys += ["collab_rec"] + [k for k in all_params
                                          if k.startswith("enc_id.")]
            if "align" in experts:
                keys += ["collab_align", "fuse.w", "fuse.b"] + [
                    k for k in all_params
                    if k.startswith(("mlp_align.", "enc_align."))]
            if "llm" in experts:
                keys += [k for k in all_params
                         if k.startswith(("mlp_llm.", "enc_llm."))]
            if len(experts) > 1:
                if self.cfg.gating == "global_learned":
                    keys.append("gate.global")
                else:
                    keys.append("gate.buckets")
                    keys += [f"gate.{e}.{w}" for e in experts
                             for w in ("w1", "b1", "w2", "b2")]
        else:
            raise ValueError(f"unknown phase {phase!r}")
        return {k: all_params[k] for k in sorted(set(keys))}

    # -- per-expert item embeddings ------------------------------------------

    def _mlp(self, prefix: str, t: Tensor) -> Tensor:
        m = self.bank.mlp
        hidden = ad.relu(ad.add(ad.matmul(t, m[f"{prefix}.w1"]),
                                m[f"{prefix}.b1"]))
        return ad.add(ad.matmul(hidden, m[f"{prefix}.w2"]), m[f"{prefix}.b2"])

    def item_embedding(self, expert: str, ids: np.ndarray) -> Tensor:
        """Per-item input representation of one expert, any id shape."""
        if expert == "id":
            return ad.gather(self.bank.collab_rec, ids)
        text_rows = ad.stop_gradient(ad.gather(self.bank.text, ids))
        if expert == "llm":
            return self._mlp("mlp_llm", text_rows)
        proj = self._mlp("mlp_align", text_rows)
        collab = ad.gather(self.bank.collab_align, ids)
        fused = ad.concat([proj, collab], axis=-1)
        return ad.add(ad.matmul(fused, self.fuse_w), self.fuse_b)

    # -- encoding -------------------------------------------------------------

    def encode(self, expert: str, ids: np.ndarray, lengths: np.ndarray, *,
               training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        lengths = np.asarray(lengths)
        if np.any(lengths < 1) or np.any(lengths > self.cfg.max_len):
            raise ValueError(
                f"encode: lengths must lie in [1, {self.cfg.max_len}]")
        x = self.item_embedding(expert, ids)
        return self.encoders[expert].forward(x, lengths, training=training,
                                             rng=rng)

    def pooled(self, expert: str, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Mean of the expert's behavior-item embeddings over valid positions."""
        x = self.item_embedding(expert, ids)
        L = ids.shape[1]
        mask = (np.arange(L)[None, :] < lengths[:, None]).astype(x.data.dtype)
        summed = ad.tsum(ad.mul(x, Tensor(mask[:, :, None])), axis=1)
        recip = Tensor((1.0 / lengths)[:, None].astype(x.data.dtype))
        return ad.mul(summed, recip)

    # -- logits ----------------------------------------------------------------

    @staticmethod
    def score(user_repr: Tensor, item_emb: Tensor) -> Tensor:
        """Dot-product logit between matching (..., d) representations."""
        if user_repr.data.shape[-1] != item_emb.data.shape[-1]:
            raise ValueError("score: dimension mismatch")
        return ad.tsum(ad.mul(user_repr, item_emb), axis=-1)

    def expert_logit(self, expert: str, ids: np.ndarray, lengths: np.ndarray,
                     targets: np.ndarray, *, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        u = self.encode(expert, ids, lengths, training=training, rng=rng)
        return self.score(u, self.item_embedding(expert, targets))

    def _gate_logit(self, expert: str, bucket_emb: Tensor, pooled: Tensor,
                    target_emb: Tensor) -> Tensor:
        """Two-layer scorer on [bucket emb | pooled behaviors | target emb].

        The first layer is applied blockwise (an exact decomposition of the
        concatenated matmul), which also vectorizes over whole catalogs.
        """
        g = self.gate
        db, dc = self.cfg.bucket_dim, self.cfg.d_c
        w1 = g[f"{expert}.w1"]
        blocks = [
            ad.matmul(bucket_emb, ad.slice_rows(w1, 0, db)),
            ad.matmul(pooled, ad.slice_rows(w1, db, db + dc)),
            ad.matmul(target_emb, ad.slice_rows(w1, db + dc, db + 2 * dc)),
        ]
        h = ad.relu(ad.add(ad.add(ad.add(blocks[0], blocks[1]), blocks[2]),
                           g[f"{expert}.b1"]))
        return ad.add(ad.matmul(h, g[f"{expert}.w2"]), g[f"{expert}.b2"])

    def gate_weights(self, targets: np.ndarray, pooled: dict[str, Tensor],
                     target_embs: dict[str, Tensor],
                     experts: tuple[str, ...]) -> Tensor:
        """Simplex weights over the active experts, shape (B, n_experts)."""
        if self.cfg.gating == "global_learned":
            idx = np.array([EXPERTS.index(e) for e in experts])
            logits = ad.reshape(ad.gather(
                ad.reshape(self.gate["global"], (-1, 1)), idx), (1, -1))
            B = targets.shape[0]
            zeros = Tensor(np.zeros((B, 1), dtype=logits.data.dtype))
            return ad.softmax(ad.add(logits, zeros), axis=-1)
        if self.buckets is None:
            raise ValueError("frequency-aware gating requires a bucket map")
        bucket_ids = self.buckets.bucket_of(targets) - 1
        bucket_emb = ad.gather(self.gate["buckets"], bucket_ids)
        logits = ad.concat(
            [self._gate_logit(e, bucket_emb, pooled[e], target_embs[e])
             for e in experts], axis=-1)
        return ad.softmax(logits, axis=-1)

    def fused_logit(self, ids: np.ndarray, lengths: np.ndarray,
                    targets: np.ndarray, *, training: bool = False,
                    rng: np.random.Generator | None = None,
                    experts: tuple[str, ...] | None = None,
                    reprs: dict[str, Tensor] | None = None
                    ) -> tuple[Tensor, Tensor]:
        """Gated mixture logit; also returns the gate weights for diagnostics."""
        experts = experts or self.cfg.experts
        if reprs is None:
            reprs = {e: self.encode(e, ids, lengths, training=training, rng=rng)
                     for e in experts}
        target_embs = {e: self.item_embedding(e, targets) for e in experts}
        if len(experts) == 1:
            e = experts[0]
            phi = self.score(reprs[e], target_embs[e])
            ones = Tensor(np.ones((targets.shape[0], 1), dtype=phi.data.dtype))
            return phi, ones
        pooled = {e: self.pooled(e, ids, lengths) for e in experts}
        weights = self.gate_weights(targets, pooled, target_embs, experts)
        logits = ad.concat(
            [ad.reshape(self.score(reprs[e], target_embs[e]), (-1, 1))
             for e in experts], axis=-1)
        phi = ad.tsum(ad.mul(weights, logits), axis=-1)
        return phi, weights

    # -- whole-catalog scoring (eval mode) -------------------------------------

    def item_matrix(self, expert: str) -> np.ndarray:
        with ad.no_grad():
            return self.item_embedding(expert, np.arange(self.n_items)).data

    def score_all(self, ids: np.ndarray, lengths: np.ndarray,
                  experts: tuple[str, ...] | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
        """Fused logits for every catalog item: (B, V) plus gate weights (B, V, E)."""
        experts = experts or self.cfg.experts
        with ad.no_grad():
            mats = {e: self.item_matrix(e) for e in experts}
            users = {e: self.encode(e, ids, lengths).data for e in experts}
            raw = np.stack([users[e] @ mats[e].T for e in experts], axis=-1)
            if len(experts) == 1:
                weights = np.ones_like(raw)
            elif self.cfg.gating == "global_learned":
                idx = [EXPERTS.index(e) for e in experts]
                logits = self.gate["global"].data[idx]
                w = np.exp(logits - logits.max())
                w /= w.sum()
                weights = np.broadcast_to(
                    w, raw.shape[:2] + (len(experts),)).copy()
            else:
                if self.buckets is None:
                    raise ValueError(
                        "frequency-aware gating requires a bucket map")
                pooled = {e: self.pooled(e, ids, lengths).data for e in experts}
                weights = self._gate_weights_all(pooled, mats, experts)
            phi = (raw * weights).sum(axis=-1)
        return phi, weights

    def _gate_weights_all(self, pooled: dict[str, np.ndarray],
                          mats: dict[str, np.ndarray],
                          experts: tuple[str, ...]) -> np.ndarray:
        db, dc = self.cfg.bucket_dim, self.cfg.d_c
        bucket_ids = self.buckets.assignments - 1
        bemb = self.gate["buckets"].data[bucket_ids]  # (V, db)
        logits = []
        for e in experts:
            w1 = self.gate[f"{e}.w1"].data
            h = (bemb @ w1[:db]
                 + pooled[e][:, None, :] @ w1[db:db + dc]
                 + mats[e] @ w1[db + dc:]
                 + self.gate[f"{e}.b1"].data)
            h = np.maximum(h, 0.0)
            logits.append(h @ self.gate[f"{e}.w2"].data
                          + self.gate[f"{e}.b2"].data)
        stacked = np.concatenate(logits, axis=-1)  # (B, V, E)
        stacked -= stacked.max(axis=-1, keepdims=True)
        w = np.exp(stacked)
        w /= w.sum(axis=-1, keepdims=True)
        return w

    def score_all_single(self, expert: str, ids: np.ndarray,
                         lengths: np.ndarray) -> np.ndarray:
        """(B, V) logits of one expert alone, eval mode."""
        with ad.no_grad():
            u = self.encode(expert, ids, lengths).data
            return u @ self.item_matrix(expert).T


def text_checksum(matrix: np.ndarray) -> str:
    """Stable fingerprint used to verify the text matrix never changes."""
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(matrix).tobytes()).hexdigest()
