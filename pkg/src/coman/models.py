"""Response models: CoMAN, its ablations and the comparison baselines.

Every model maps a logged record (context plus treatment) to a conversion
probability. The treatment enters as ``u = (t - t_min) / (t_max - t_min)``;
for decreasing campaigns the monotone indicator on ``u`` is -1.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .activations import ActivationSelection
from .monolayer import (
    GlobalFpm,
    MonotoneNetwork,
    MonotoneNetworkSpec,
    load_parameters,
)
from .simkit import world as W
from .stmodules import (
    MLP,
    EmbeddingSet,
    PleBackbone,
    StAttention,
    TemporalActivation,
    TemporalTargetAttention,
    discretize,
    equal_frequency_edges,
    squash_fpm,
)

CHECKPOINT_FORMAT = "coman-checkpoint/1"
D_ID, D_NUM = 8, 4
N_NUM_BINS = 16


@dataclass
class ModelConfig:
    name: str
    family: str  # dnn | dnn-m | fpm | cmnn | coman
    base: str = "clu"
    adaptive: bool = False
    st_head: bool = False
    hidden: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.family not in ("dnn", "dnn-m", "fpm", "cmnn", "coman"):
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family != "coman" and (self.adaptive or self.st_head):
            raise ValueError("adaptive activation and S-t attention exist only in the coman family")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


MODEL_ZOO: dict[str, ModelConfig] = {
    "dnn": ModelConfig("dnn", "dnn"),
    "dnn-m": ModelConfig("dnn-m", "dnn-m", base="sigmoid"),
    "fpm": ModelConfig("fpm", "fpm"),
    "cmnn-relu": ModelConfig("cmnn-relu", "cmnn", base="relu"),
    "cmnn-elu": ModelConfig("cmnn-elu", "cmnn", base="elu"),
    "cmnn-clu": ModelConfig("cmnn-clu", "cmnn", base="clu"),
    "coman-b": ModelConfig("coman-b", "coman"),
    "coman-no-aa": ModelConfig("coman-no-aa", "coman", st_head=True),
    "coman-no-st": ModelConfig("coman-no-st", "coman", adaptive=True),
    "coman": ModelConfig("coman", "coman", adaptive=True, st_head=True),
}
MODEL_NAMES = tuple(MODEL_ZOO)


def model_config(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_ZOO:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    return replace(MODEL_ZOO[name], **overrides)


@dataclass
class FeatureSpec:
    """Everything a model needs to turn a logged record into inputs."""

    t_min: float
    t_max: float
    direction: int = 1
    numeric_edges: list[list[float]] = field(default_factory=list)

    @classmethod
    def fit(cls, data: W.LoggedDataset, world: W.SyntheticWorld) -> "FeatureSpec":
        edges = [equal_frequency_edges(data.ctx[:, W.CTX_NUMERIC.start + k], N_NUM_BINS).tolist()
                 for k in range(W.N_NUMERIC)]
        return cls(world.t_min, world.t_max, world.direction, edges)

    def normalize(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=float) - self.t_min) / (self.t_max - self.t_min)


class FeatureEncoder(dc.Module):
    """Embeds a record's categorical and discretized numeric fields."""

    def __init__(self, spec: FeatureSpec, rng: np.random.Generator):
        self.spec = spec
        vocab = {"city": W.N_CITIES, "period": W.N_PERIODS, "district": W.N_DISTRICTS, "aoi": W.N_AOIS,
                 "weekday": 7, "holiday": 2, "shop": W.N_SHOPS}
        dims = {k: D_ID for k in vocab}
        for k in range(W.N_NUMERIC):
            vocab[f"num{k}"] = N_NUM_BINS
            dims[f"num{k}"] = D_NUM
        self.emb = EmbeddingSet(vocab, dims, rng)

    d_st = 6 * D_ID
    d_user = W.N_NUMERIC * D_NUM

    def __call__(self, data: W.LoggedDataset) -> dict[str, dc.Node]:
        ctx = data.ctx
        e_st = dc.concat([
            self.emb("period", data.period), self.emb("city", data.city),
            self.emb("district", ctx[:, 0]), self.emb("aoi", ctx[:, 1]),
            self.emb("weekday", ctx[:, 2]), self.emb("holiday", ctx[:, 3]),
        ])
        numeric = [
            self.emb(f"num{k}", discretize(ctx[:, W.CTX_NUMERIC.start + k], np.array(self.spec.numeric_edges[k])))
            for k in range(W.N_NUMERIC)
        ]
        seq_ids = ctx[:, W.CTX_SEQ]
        return {
            "e_st": e_st,
            "e_user": dc.concat(numeric),
            "e_q": self.emb("shop", ctx[:, 4]),
            "e_s": self.emb("shop", seq_ids),
            "seq_mask": seq_ids >= 0,
        }


def _masked_mean(e_s: dc.Node, mask: np.ndarray) -> dc.Node:
    m = mask.astype(float)[:, :, None]
    count = np.maximum(m.sum(axis=1), 1.0)
    return dc.sum_(e_s * m, axis=1) * (1.0 / count)


class ResponseModel(dc.Module):
    def __init__(self, config: ModelConfig, features: FeatureSpec, seed: int = 0):
        rng = np.random.default_rng([seed, 31337])
        self.config = config
        self.features = features
        self.seed = seed
        self.encoder = FeatureEncoder(features, rng)
        d_ctx = FeatureEncoder.d_st + FeatureEncoder.d_user + 2 * D_ID
        fam, hid = config.family, config.hidden
        self.has_value_head = fam == "coman"
        direction = features.direction
        if fam == "coman":
            self.ta_user = TemporalActivation(FeatureEncoder.d_st, FeatureEncoder.d_user, rng)
            self.ta_query = TemporalActivation(FeatureEncoder.d_st, D_ID, rng)
            self.tta = TemporalTargetAttention(FeatureEncoder.d_st, D_ID, D_ID, rng)
            self.ple = PleBackbone(d_ctx, 2, rng, dropout=config.dropout)
            self.cvr_tower = MLP([self.ple.d_out, hid // 2], rng, config.dropout)
            self.value_tower = MLP([self.ple.d_out, hid // 2], rng, config.dropout)
            self.value_out = dc.Linear(hid // 2, 1, rng)
            d_rep = hid // 2
            mono = MonotoneNetworkSpec(
                [1 + d_rep, hid, 1], [direction] + [0] * d_rep,
                [ActivationSelection.split(hid)], head="fpm", base="clu",
                gated=config.adaptive, d_context=self.ple.d_out + FeatureEncoder.d_st,
            )
            self.mono = MonotoneNetwork(mono, rng)
            self.st_attention = StAttention(self.ple.d_out, FeatureEncoder.d_st, rng) if config.st_head else None
        elif fam == "dnn":
            self.net = MLP([1 + d_ctx, 2 * hid, hid, 1], rng, config.dropout, final_activation=False)
        elif fam == "dnn-m":
            spec = MonotoneNetworkSpec([1 + d_ctx, hid, hid // 2, 1], [direction] + [0] * d_ctx,
                                       head="sigmoid", base="sigmoid")
            self.mono = MonotoneNetwork(spec, rng)
        elif fam == "fpm":
            self.context_net = MLP([d_ctx, 2 * hid, hid], rng, config.dropout)
            self.fpm_out = dc.Linear(hid, 4, rng)
        elif fam == "cmnn":
            self.context_net = MLP([d_ctx, 2 * hid, hid], rng, config.dropout)
            spec = MonotoneNetworkSpec([1 + hid, hid, 1], [direction] + [0] * hid,
                                       [ActivationSelection.split(hid)], head="sigmoid", base=config.base)
            self.mono = MonotoneNetwork(spec, rng)

    # ------------------------------------------------------------------
    def encode(self, data: W.LoggedDataset, rng: np.random.Generator | None = None) -> dict:
        """Everything that does not depend on the treatment."""
        f = self.encoder(data)
        fam = self.config.family
        if fam == "coman":
            h_user = self.ta_user(f["e_st"], f["e_user"])
            h_query = self.ta_query(f["e_st"], f["e_q"])
            h_tta = self.tta(f["e_q"], f["e_s"], f["e_st"], f["seq_mask"])
            x = dc.concat([h_user, h_query, h_tta, f["e_st"]])
            r_f, mixtures = self.ple(x, rng)
            enc = {"rep": self.cvr_tower(mixtures[0], rng), "r_f": r_f, "e_st": f["e_st"]}
            if self.config.adaptive:
                enc["gate_ctx"] = dc.concat([r_f, f["e_st"]])
            if self.st_attention is not None:
                enc["omegas"] = self.st_attention(r_f, f["e_st"])
            enc["value"] = self.value_out(self.value_tower(mixtures[1], rng))
            return enc
        x = dc.concat([f["e_user"], f["e_q"], _masked_mean(f["e_s"], f["seq_mask"]), f["e_st"]])
        if fam in ("fpm", "cmnn"):
            rep = self.context_net(x, rng)
            if fam == "fpm":
                return {"omegas": squash_fpm(self.fpm_out(rep))}
            return {"rep": rep}
        return {"rep": x}

    def _u(self, t) -> np.ndarray:
        return self.features.normalize(t)[:, None]

    def respond(self, enc: dict, t, rng: np.random.Generator | None = None) -> dc.Node:
        """Conversion probability ``(n, 1)`` at treatments ``t`` for encoded contexts."""
        u = self._u(t)
        fam = self.config.family
        if fam == "fpm":
            v = u if self.features.direction > 0 else 1.0 - u
            w0, w1, w2, w3 = enc["omegas"]
            return w0 + (w3 - w0) * dc.sigmoid(w1 * (dc.constant(v) - w2))
        x = dc.concat([dc.constant(u), enc["rep"]])
        if fam == "dnn":
            return dc.sigmoid(self.net(x, rng))
        if fam == "coman":
            return self.mono(x, enc.get("gate_ctx"), enc.get("omegas"))
        return self.mono(x)

    def forward(self, data: W.LoggedDataset, rng: np.random.Generator | None = None):
        enc = self.encode(data, rng)
        return self.respond(enc, data.treatment, rng), enc.get("value")

    # ------------------------------------------------------------------
    def _chunks(self, n: int, size: int = 4096):
        for start in range(0, n, size):
            yield slice(start, min(start + size, n))

    def predict(self, data: W.LoggedDataset) -> np.ndarray:
        out = np.empty(len(data))
        for sl in self._chunks(len(data)):
            out[sl] = self.forward(data.subset(sl))[0].value[:, 0]
        return out

    def predict_curves(self, data: W.LoggedDataset, grid=None) -> np.ndarray:
        """Predicted response of every record across a treatment grid, shape ``(n, G)``."""
        grid = np.asarray(grid if grid is not None else np.linspace(self.features.t_min, self.features.t_max, 16))
        out = np.empty((len(data), grid.size))
        for sl in self._chunks(len(data), 2048):
            part = data.subset(sl)
            enc = self.encode(part)
            n = len(part)
            for j, t in enumerate(grid):
                out[sl, j] = self.respond(enc, np.full(n, t)).value[:, 0]
        return out

    def fpm_params(self, data: W.LoggedDataset) -> np.ndarray | None:
        """Per-record FPM parameters ``(n, 4)`` where the head has them, else None."""
        if self.config.family == "fpm" or self.config.st_head:
            enc = self.encode(data)
            return np.concatenate([w.value for w in enc["omegas"]], axis=1)
        if self.config.family == "coman":
            p = self.mono.fpm.params()
            return np.tile(p.as_tuple(), (len(data), 1))
        return None

    def monotone_networks(self) -> list[MonotoneNetwork]:
        return [self.mono] if hasattr(self, "mono") else []

    def check_constraints(self) -> None:
        """Re-derive the structural constraints; raises AssertionError if any fails."""
        for net in self.monotone_networks():
            for layer in net.layers:
                layer.effective_weight()
            for unit in net.units:
                p = unit.params()
                assert p.omega0 > 0 and p.omega1 > 0 and p.omega0 * p.omega1 <= 4.0

    # ------------------------------------------------------------------
    def to_document(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model": asdict(self.config),
            "features": asdict(self.features),
            "seed": self.seed,
            "monotone_specs": [net.spec.to_dict() for net in self.monotone_networks()],
            "parameters": {
                name: {"shape": list(p.shape), "data": [float(v) for v in p.value.reshape(-1)]}
                for name, p in self.named_parameters().items()
            },
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ResponseModel":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a checkpoint document (format={doc.get('format')!r})")
        model = cls(ModelConfig(**doc["model"]), FeatureSpec(**doc["features"]), doc["seed"])
        values = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["parameters"].items()}
        load_parameters(model, values)
        return model

    def save(self, path) -> None:
        Path(path).write_text(dumps_document(self.to_document()))

    @classmethod
    def load(cls, path) -> "ResponseModel":
        return cls.from_document(json.loads(Path(path).read_text()))


def dumps_document(doc) -> str:
    """JSON with every float printed at 17 significant digits (round-trips exactly)."""
    return _emit(doc, 0) + "\n"


def _emit(obj, depth: int) -> str:
    pad, inner = " " * depth, " " * (depth + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_emit(v, depth + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _emit(v, depth + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format(v, ".17g") if np.isfinite(v) else json.dumps(v)
    return json.dumps(obj)


def build_model(name: str, data: W.LoggedDataset, world: W.SyntheticWorld, seed: int = 0,
                **overrides) -> ResponseModel:
    return ResponseModel(model_config(name, **overrides), FeatureSpec.fit(data, world), seed)
