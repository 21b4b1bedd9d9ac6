"""The full operator transformer.

Query coordinates and each heterogeneous input are embedded by dedicated
MLPs; a stack of blocks then updates the query stream.  Each block runs two
attention sublayers (cross over the input embeddings and/or self over the
query stream, per the configured wiring), each followed by a feed-forward
update that mixes several expert MLPs with weights produced by a gate
network reading the raw geometric coordinates of the query points - a soft
domain decomposition.  A pointwise decoder maps the final stream to the
output channels.

The cross sublayer computes, per head,

    z_t = q~_t + (1/L) sum_l (q~_t . S_l) / (q~_t . s_l),
    S_l = sum_i k~_il (x) v_il,   s_l = sum_i k~_il,

i.e. the linear-cost normalized attention aggregated over input slots with
an identity skip on the normalized query.  Every slot has its own key/value
projections; the self sublayer wraps the same attention kernel in a
conventional residual.  All sublayers apply per-token layer normalization
to their input stream.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import merge_heads, normalized_attention_factored, split_heads
from .data import batch_from_samples
from .encoding import SlotSpec
from .errors import ConfigError, ContractError
from .layers import MLP, LayerNorm, Tensor, glorot_uniform
from .tensor import no_grad, softmax_lastdim

BLOCK_ORDERS = {
    "cross+self": ("cross", "self"),
    "self+cross": ("self", "cross"),
    "cross+cross": ("cross", "cross"),
}

DENOM_FLOOR = 1e-12

HANDCRAFTED_GATES = {}


def _project(x, w):
    # flatten leading axes so the projection is a single large matmul
    if x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    return x @ w


def register_handcrafted_gate(name, fn):
    """Register a fixed score function coords [..., d] -> scores [..., K]."""
    HANDCRAFTED_GATES[name] = fn


def indicator_scores(member_index, num_experts):
    """One-hot routing scores: 0 for the owner, -1e9 (softmax-underflows to
    exactly zero weight) for everyone else."""
    scores = np.full(member_index.shape + (num_experts,), -1e9)
    np.put_along_axis(scores, member_index[..., None], 0.0, axis=-1)
    return scores


def _split_at_half(coords):
    # two experts split at x = 0.5 along the first coordinate
    owner = (coords[..., 0] >= 0.5).astype(np.int64)
    return indicator_scores(owner, 2)


register_handcrafted_gate("split_at_half", _split_at_half)


@dataclass
class ModelConfig:
    coord_dim: int
    out_dim: int
    slots: list
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 3
    num_experts: int = 1
    expert_hidden: int = 0          # 0 means 2 * embed_dim
    encoder_layers: int = 3
    gate_hidden: int = 32
    block_order: str = "cross+self"
    gate_mode: str = "learned"
    seed: int = 0

    def __post_init__(self):
        self.slots = [s if isinstance(s, SlotSpec) else SlotSpec(*s) for s in self.slots]
        if not self.slots:
            raise ConfigError("slots: at least one input slot is required")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads: embed_dim {self.embed_dim} not divisible by {self.num_heads}"
            )
        if self.num_experts < 1:
            raise ConfigError(f"num_experts: must be >= 1, got {self.num_experts}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks: must be >= 1, got {self.num_blocks}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(
                f"block_order: '{self.block_order}' not one of {sorted(BLOCK_ORDERS)}"
            )
        if self.gate_mode != "learned" and not self.gate_mode.startswith("handcrafted:"):
            raise ConfigError(f"gate_mode: '{self.gate_mode}' (learned or handcrafted:<name>)")
        if self.expert_hidden == 0:
            self.expert_hidden = 2 * self.embed_dim

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "slots"}
        d["slots"] = [[s.kind, s.channels] for s in self.slots]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["slots"] = [SlotSpec(kind, channels) for kind, channels in d["slots"]]
        return cls(**d)


class GateNetwork:
    """Maps raw query coordinates to expert mixture weights on the simplex."""

    def __init__(self, rng, coord_dim, num_experts, hidden, mode):
        self.mode = mode
        self.num_experts = num_experts
        self.mlp = None
        self.fn = None
        if mode == "learned":
            # zero-init final layer: the initial mixture is uniform 1/K
            self.mlp = MLP(rng, [coord_dim, hidden, num_experts], zero_init_last=True)
        else:
            name = mode.split(":", 1)[1]
            if name not in HANDCRAFTED_GATES:
                raise ConfigError(f"gate_mode: no handcrafted gate named '{name}'")
            self.fn = HANDCRAFTED_GATES[name]

    def scores(self, coords):
        if self.mlp is not None:
            return self.mlp(Tensor(np.asarray(coords, dtype=np.float64)))
        raw = np.asarray(self.fn(coords), dtype=np.float64)
        if raw.shape[-1] != self.num_experts:
            raise ConfigError(
                f"handcrafted gate produced {raw.shape[-1]} scores for "
                f"{self.num_experts} experts"
            )
        return Tensor(raw)

    def weights(self, coords):
        return softmax_lastdim(self.scores(coords))

    def parameters(self, prefix):
        return self.mlp.parameters(f"{prefix}.gate") if self.mlp is not None else []


def gate_weights(gate, coords):
    """Expert mixture weights for the given coordinates (always a simplex)."""
    return gate.weights(coords)


class CrossAttention:
    """Normalized linear cross-attention over all input slots, with the
    identity skip on the normalized query and a 1/L mean over slots."""

    kind = "cross"

    def __init__(self, rng, embed_dim, num_heads, num_slots):
        self.ln = LayerNorm(embed_dim)
        self.num_heads = num_heads
        self.Wq = Tensor(glorot_uniform(rng, embed_dim, embed_dim), requires_grad=True)
        self.slot_keys = []
        self.slot_values = []
        for _ in range(num_slots):
            self.slot_keys.append(Tensor(glorot_uniform(rng, embed_dim, embed_dim), requires_grad=True))
            self.slot_values.append(Tensor(glorot_uniform(rng, embed_dim, embed_dim), requires_grad=True))

    def __call__(self, z, embeddings, slot_masks=None):
        num_slots = len(self.slot_keys)
        if len(embeddings) != num_slots:
            raise ConfigError(f"slots: block has {num_slots} slots, got {len(embeddings)} embeddings")
        h = self.ln(z)
        qn = softmax_lastdim(split_heads(_project(h, self.Wq), self.num_heads))  # [B,H,N,dh]
        acc = None
        for l in range(num_slots):
            kh = split_heads(_project(embeddings[l], self.slot_keys[l]), self.num_heads)
            vh = split_heads(_project(embeddings[l], self.slot_values[l]), self.num_heads)
            kn = softmax_lastdim(kh)
            mask = None if slot_masks is None else slot_masks[l]
            if mask is not None:
                m = np.asarray(mask, dtype=np.float64)
                if not np.all(m.sum(axis=-1) >= 1):
                    raise ContractError("every sequence needs at least one unmasked key")
                kn = kn * Tensor(m[:, np.newaxis, :, np.newaxis])
            summary = kn.swap_last() @ vh                     # [B,H,dh,dh]
            key_total = kn.sum(axis=-2, keepdims=True)        # [B,H,1,dh]
            numer = qn @ summary
            denom = (qn * key_total).sum(axis=-1, keepdims=True)
            term = numer / denom.clip_min(DENOM_FLOOR)
            acc = term if acc is None else acc + term
        out = qn + acc * (1.0 / num_slots)
        return merge_heads(out)

    def parameters(self, prefix):
        out = self.ln.parameters(f"{prefix}.ln") + [(f"{prefix}.Wq", self.Wq)]
        for l, (wk, wv) in enumerate(zip(self.slot_keys, self.slot_values)):
            out.append((f"{prefix}.slot{l}.Wk", wk))
            out.append((f"{prefix}.slot{l}.Wv", wv))
        return out


class SelfAttention:
    """Residual-wrapped normalized self-attention over the query stream."""

    kind = "self"

    def __init__(self, rng, embed_dim, num_heads):
        self.ln = LayerNorm(embed_dim)
        self.num_heads = num_heads
        self.Wq = Tensor(glorot_uniform(rng, embed_dim, embed_dim), requires_grad=True)
        self.Wk = Tensor(glorot_uniform(rng, embed_dim, embed_dim), requires_grad=True)
        self.Wv = Tensor(glorot_uniform(rng, embed_dim, embed_dim), requires_grad=True)

    def __call__(self, z, query_mask=None):
        h = self.ln(z)
        qh = split_heads(_project(h, self.Wq), self.num_heads)
        kh = split_heads(_project(h, self.Wk), self.num_heads)
        vh = split_heads(_project(h, self.Wv), self.num_heads)
        key_mask = None if query_mask is None else np.asarray(query_mask)[:, np.newaxis, :]
        attended = normalized_attention_factored(qh, kh, vh, key_mask=key_mask)
        return z + merge_heads(attended)

    def parameters(self, prefix):
        return self.ln.parameters(f"{prefix}.ln") + [
            (f"{prefix}.Wq", self.Wq),
            (f"{prefix}.Wk", self.Wk),
            (f"{prefix}.Wv", self.Wv),
        ]


class MoeFfn:
    """Residual feed-forward update: a convex, gate-weighted expert mixture."""

    kind = "moe"

    def __init__(self, rng, embed_dim, hidden, num_experts, gate):
        self.ln = LayerNorm(embed_dim)
        self.experts = [MLP(rng, [embed_dim, hidden, embed_dim]) for _ in range(num_experts)]
        self.gate = gate

    def __call__(self, z, coords):
        h = self.ln(z)
        p = self.gate.weights(coords)                     # [B,N,K]
        mixed = None
        for i, expert in enumerate(self.experts):
            term = expert(h) * p[..., i : i + 1]
            mixed = term if mixed is None else mixed + term
        return z + mixed

    def parameters(self, prefix):
        out = self.ln.parameters(f"{prefix}.ln")
        for i, expert in enumerate(self.experts):
            out.extend(expert.parameters(f"{prefix}.expert{i}"))
        out.extend(self.gate.parameters(prefix))
        return out


class GnotBlock:
    """Two attention sublayers (wiring per block_order), each followed by a
    gate-mixed feed-forward update."""

    def __init__(self, rng, config):
        self.sublayers = []
        for kind in BLOCK_ORDERS[config.block_order]:
            if kind == "cross":
                attn = CrossAttention(rng, config.embed_dim, config.num_heads, len(config.slots))
            else:
                attn = SelfAttention(rng, config.embed_dim, config.num_heads)
            gate = GateNetwork(
                rng, config.coord_dim, config.num_experts, config.gate_hidden, config.gate_mode
            )
            ffn = MoeFfn(rng, config.embed_dim, config.expert_hidden, config.num_experts, gate)
            self.sublayers.extend([attn, ffn])

    def structure(self):
        return [s.kind for s in self.sublayers]

    def __call__(self, z, embeddings, slot_masks, coords, query_mask):
        for sub in self.sublayers:
            if sub.kind == "cross":
                z = sub(z, embeddings, slot_masks)
            elif sub.kind == "self":
                z = sub(z, query_mask)
            else:
                z = sub(z, coords)
        return z

    def parameters(self, prefix):
        out = []
        for j, sub in enumerate(self.sublayers):
            out.extend(sub.parameters(f"{prefix}.sub{j}"))
        return out


class GnotModel:
    """Encoders, block stack, and pointwise decoder; optionally carries the
    training-split normalization statistics used around forward passes."""

    def __init__(self, config, stats=None):
        self.config = config
        self.stats = stats
        rng = np.random.default_rng(config.seed)
        e = config.embed_dim
        self.query_encoder = MLP(rng, [config.coord_dim] + [e] * config.encoder_layers)
        self.slot_encoders = [
            MLP(rng, [slot.row_width(config.coord_dim)] + [e] * config.encoder_layers)
            for slot in config.slots
        ]
        self.blocks = [GnotBlock(rng, config) for _ in range(config.num_blocks)]
        self.decoder = MLP(rng, [e, e, config.out_dim])

    # -- parameters --------------------------------------------------------

    def parameters(self):
        out = self.query_encoder.parameters("query_encoder")
        for l, enc in enumerate(self.slot_encoders):
            out.extend(enc.parameters(f"slot{l}_encoder"))
        for i, block in enumerate(self.blocks):
            out.extend(block.parameters(f"block{i}"))
        out.extend(self.decoder.parameters("decoder"))
        return out

    def num_parameters(self):
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self):
        for _, t in self.parameters():
            t.grad = None

    # -- forward ------------------------------------------------------------

    def _check_batch(self, batch):
        cfg = self.config
        if batch.queries.shape[-1] != cfg.coord_dim:
            raise ConfigError(
                f"coord_dim: model expects {cfg.coord_dim}, batch has {batch.queries.shape[-1]}"
            )
        if len(batch.slot_rows) != len(cfg.slots):
            raise ConfigError(
                f"slots: model has {len(cfg.slots)}, batch has {len(batch.slot_rows)}"
            )
        for l, (rows, slot) in enumerate(zip(batch.slot_rows, cfg.slots)):
            want = slot.row_width(cfg.coord_dim)
            if rows.shape[-1] != want:
                raise ConfigError(
                    f"slots: slot {l} ({slot.kind}) expects row width {want}, got {rows.shape[-1]}"
                )

    def forward_batch(self, batch):
        """Padded-batch forward pass; output is [B, Nmax, out_dim] in the
        normalized target space (raw space if no stats are attached)."""
        self._check_batch(batch)
        stats = self.stats
        queries = stats.query.apply(batch.queries) if stats else batch.queries
        stream = self.query_encoder(Tensor(queries))
        embeddings = []
        for l, rows in enumerate(batch.slot_rows):
            rows = stats.slots[l].apply(rows) if stats else rows
            embeddings.append(self.slot_encoders[l](Tensor(rows)))
        slot_masks = [m if not m.all() else None for m in batch.slot_masks]
        query_mask = None if batch.query_mask.all() else batch.query_mask
        for block in self.blocks:
            stream = block(stream, embeddings, slot_masks, batch.queries, query_mask)
        return self.decoder(stream)

    def forward(self, sample):
        """Single-sample forward; output [N, out_dim] in normalized space."""
        return self.forward_batch(batch_from_samples([sample]))[0]

    def predict(self, sample):
        """Evaluation-mode prediction in original target units."""
        with no_grad():
            out = self.forward(sample).numpy()
        return self.stats.target.invert(out) if self.stats else out

    def predict_batch(self, batch):
        with no_grad():
            out = self.forward_batch(batch).numpy()
        return self.stats.target.invert(out) if self.stats else out

    def block_structure(self):
        return [block.structure() for block in self.blocks]
