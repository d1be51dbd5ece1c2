"""Two-stage encoder + attention decoder + speaker-change branch.

Pre-norm transformer throughout. The encoder subsamples by frame stacking,
runs stage-1 layers feeding a token-time CTC head, then stage-2 layers
feeding the serialized CTC head; the decoder cross-attends to the final
encoder memory. The speaker-change branch is a short stack of decoder-style
layers (own cross-attention) reading the decoder output, ending in a scalar
logit per position. In the ablation (`baseline_sot`) the branch is absent
and its layer budget moves into the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgumentError
from ..losses import LogProbLattice
from ..transcripts import AttentionMap
from . import autodiff as ad
from .config import ModelConfig
from .vocab import Vocab


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float64)


def _init_params(cfg: ModelConfig) -> Dict[str, ad.Tensor]:
    rng = np.random.default_rng(cfg.seed)
    D = cfg.model_dim
    F = 2 * D  # feed-forward width
    p: Dict[str, ad.Tensor] = {}

    def dense(name, d_in, d_out):
        p[f"{name}.W"] = ad.Tensor(rng.normal(0, 1 / math.sqrt(d_in), (d_in, d_out)))
        p[f"{name}.b"] = ad.Tensor(np.zeros(d_out))

    def norm(name, d=D):
        p[f"{name}.g"] = ad.Tensor(np.ones(d))
        p[f"{name}.b"] = ad.Tensor(np.zeros(d))

    def attn(name):
        for part in ("q", "k", "v", "o"):
            dense(f"{name}.{part}", D, D)

    def block(name, cross):
        norm(f"{name}.ln1")
        attn(f"{name}.self")
        if cross:
            norm(f"{name}.ln2")
            attn(f"{name}.cross")
        norm(f"{name}.ln3")
        dense(f"{name}.ffn1", D, F)
        dense(f"{name}.ffn2", F, D)

    dense("enc_in", cfg.subsample * cfg.feature_dim, D)
    n_enc = cfg.enc_layers_stage1 + cfg.enc_layers_stage2
    for i in range(n_enc):
        block(f"enc{i}", cross=False)
    norm("tsot_ln")
    dense("tsot", D, cfg.vocab_size)
    norm("enc_ln")
    dense("sot", D, cfg.vocab_size)

    p["dec_emb"] = ad.Tensor(rng.normal(0, 1 / math.sqrt(D), (cfg.vocab_size, D)))
    for i in range(cfg.effective_dec_layers):
        block(f"dec{i}", cross=True)
    norm("dec_ln")
    dense("asr", D, cfg.vocab_size)
    if not cfg.baseline_sot:
        for j in range(cfg.scd_layers):
            block(f"scd{j}", cross=True)
        norm("scd_ln")
        dense("scd", D, 1)
    return p


@dataclass
class ForwardOutput:
    tsot_ctc_lattice: LogProbLattice
    sot_ctc_lattice: LogProbLattice
    asr_logits: np.ndarray  # [positions][vocab]
    scd_logits: np.ndarray  # [positions]; empty in the ablation
    cross_attention: Dict[str, AttentionMap]


@dataclass
class Graph:
    """Tensors of one forward pass that losses attach to."""

    tsot_logp: ad.Tensor  # [T][V]
    sot_logp: ad.Tensor  # [T][V]
    asr_logits: ad.Tensor  # [K][V]
    scd_logits: Optional[ad.Tensor]  # [K]
    attn: Dict[str, ad.Tensor]  # site -> head-averaged probs [K][T]
    num_frames: int
    num_positions: int


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        if vocab.size != cfg.vocab_size:
            raise InvalidArgumentError(
                f"config vocab_size {cfg.vocab_size} != vocab table {vocab.size}"
            )
        self.cfg = cfg
        self.vocab = vocab
        self.params = _init_params(cfg)

    # -- graph construction ------------------------------------------------

    def _linear(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.params[f"{name}.W"]), self.params[f"{name}.b"])

    def _norm(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _mha(
        self,
        name: str,
        q_in: ad.Tensor,
        kv_in: ad.Tensor,
        mask: Optional[np.ndarray],
        record: Optional[Dict[str, ad.Tensor]] = None,
        site: str = "",
    ) -> ad.Tensor:
        H = self.cfg.heads
        D = self.cfg.model_dim
        dh = D // H
        Tq = q_in.shape[0]
        Tk = kv_in.shape[0]

        def split(t, length):
            return ad.transpose(ad.reshape(t, (length, H, dh)), (1, 0, 2))

        q = split(self._linear(f"{name}.q", q_in), Tq)
        k = split(self._linear(f"{name}.k", kv_in), Tk)
        v = split(self._linear(f"{name}.v", kv_in), Tk)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1 / math.sqrt(dh))
        probs = ad.softmax(scores, mask)  # [H][Tq][Tk]
        if record is not None:
            record[site] = ad.mean_axis0(probs)
        out = ad.transpose(ad.matmul(probs, v), (1, 0, 2))
        return self._linear(f"{name}.o", ad.reshape(out, (Tq, D)))

    def _ffn(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return self._linear(f"{name}.ffn2", ad.relu(self._linear(f"{name}.ffn1", x)))

    def _enc_layer(self, i: int, x: ad.Tensor) -> ad.Tensor:
        name = f"enc{i}"
        h = self._norm(f"{name}.ln1", x)
        x = ad.add(x, self._mha(f"{name}.self", h, h, None))
        return ad.add(x, self._ffn(name, self._norm(f"{name}.ln3", x)))

    def _dec_layer(
        self,
        name: str,
        x: ad.Tensor,
        memory: ad.Tensor,
        causal: np.ndarray,
        record: Dict[str, ad.Tensor],
        site: str,
    ) -> ad.Tensor:
        h = self._norm(f"{name}.ln1", x)
        x = ad.add(x, self._mha(f"{name}.self", h, h, causal))
        x = ad.add(
            x,
            self._mha(
                f"{name}.cross", self._norm(f"{name}.ln2", x), memory, None, record, site
            ),
        )
        return ad.add(x, self._ffn(name, self._norm(f"{name}.ln3", x)))

    def build_graph(self, features: np.ndarray, dec_input_ids: Sequence[int]) -> Graph:
        cfg = self.cfg
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
            raise InvalidArgumentError(
                f"features must be [T0][{cfg.feature_dim}], got {features.shape}"
            )
        T0 = features.shape[0]
        if T0 < cfg.subsample:
            raise InvalidArgumentError(f"need at least {cfg.subsample} feature frames")
        T = T0 // cfg.subsample
        stacked = features[: T * cfg.subsample].reshape(T, cfg.subsample * cfg.feature_dim)
        x = self._linear("enc_in", ad.Tensor(stacked))
        x = ad.add(x, ad.Tensor(sinusoid_table(T, cfg.model_dim)))
        for i in range(cfg.enc_layers_stage1):
            x = self._enc_layer(i, x)
        tsot_logp = ad.log_softmax(self._linear("tsot", self._norm("tsot_ln", x)))
        for i in range(cfg.enc_layers_stage1, cfg.enc_layers_stage1 + cfg.enc_layers_stage2):
            x = self._enc_layer(i, x)
        memory = self._norm("enc_ln", x)
        sot_logp = ad.log_softmax(self._linear("sot", memory))

        ids = np.asarray(dec_input_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InvalidArgumentError("decoder input must be a non-empty id vector")
        K = ids.size
        attn: Dict[str, ad.Tensor] = {}
        causal = np.triu(np.full((K, K), -np.inf), k=1)
        y = ad.add(ad.embedding(self.params["dec_emb"], ids), ad.Tensor(sinusoid_table(K, cfg.model_dim)))
        for i in range(cfg.effective_dec_layers):
            y = self._dec_layer(f"dec{i}", y, memory, causal, attn, f"dec{i}")
        h_dec = self._norm("dec_ln", y)
        asr_logits = self._linear("asr", h_dec)

        scd_logits = None
        if not cfg.baseline_sot:
            z = y
            for j in range(cfg.scd_layers):
                z = self._dec_layer(f"scd{j}", z, memory, causal, attn, f"scd{j}")
            scd_logits = ad.reshape(self._linear("scd", self._norm("scd_ln", z)), (K,))

        monitored = {s: attn[s] for s in cfg.bc_layers}
        return Graph(
            tsot_logp=tsot_logp,
            sot_logp=sot_logp,
            asr_logits=asr_logits,
            scd_logits=scd_logits,
            attn=monitored,
            num_frames=T,
            num_positions=K,
        )

    # -- public forward ----------------------------------------------------

    def forward(
        self,
        features: np.ndarray,
        teacher_ids: Sequence[int],
        pos_to_utt: Optional[Sequence[Tuple[int, int]]] = None,
    ) -> ForwardOutput:
        """Teacher-forced pass. ``teacher_ids`` are the decoder targets in
        order (position i is supervised to produce teacher_ids[i]); the
        decoder input is the same sequence shifted right behind "<eos>".
        Attention maps keep only the rows listed in pos_to_utt (default:
        every position, attributed to utterance 0).
        """
        teacher = np.asarray(teacher_ids, dtype=np.int64)
        dec_input = np.concatenate(([self.vocab.eos_id], teacher[:-1]))
        g = self.build_graph(features, dec_input)
        if pos_to_utt is None:
            pos_to_utt = tuple((0, i) for i in range(g.num_positions))
        n_rows = len(pos_to_utt)
        if n_rows > g.num_positions:
            raise InvalidArgumentError("pos_to_utt longer than decoder positions")
        maps = {
            site: AttentionMap(t.data[:n_rows], pos_to_utt) for site, t in g.attn.items()
        }
        scd = np.zeros(0) if g.scd_logits is None else g.scd_logits.data.copy()
        return ForwardOutput(
            tsot_ctc_lattice=LogProbLattice(g.tsot_logp.data),
            sot_ctc_lattice=LogProbLattice(g.sot_logp.data),
            asr_logits=g.asr_logits.data.copy(),
            scd_logits=scd,
            cross_attention=maps,
        )

    # -- parameter plumbing -------------------------------------------------

    def param_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def build_model(cfg: ModelConfig, vocab: Vocab) -> Model:
    return Model(cfg, vocab)
