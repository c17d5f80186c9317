"""CTR model assembly: feature schema, backbones, adapter wiring, checkpoints.

Three backbones share one skeleton: id embeddings feed an MLP tower whose
final one-unit head produces the deep logit.  ``wdl`` adds a linear
memorization term over raw ids, ``deepfm`` additionally adds the pairwise
interaction term computed from the same embeddings.  The probability is
always sigmoid(sum of logits).

Modes differ only in the tower and head layers: ``plain`` uses bare dense
layers, ``mlora`` wraps each in per-domain low-rank adapters selected
one-hot by the input domain, and ``moe`` mixes all adapters of all domains
through a learned per-domain gate.  Embeddings, the wide tables, and the
interaction term always belong to the backbone.

A model owns one ``ParamStore`` plus a static tape per forward view:
``backbone`` (base weights only), ``expert:d:k`` (backbone plus exactly one
adapter, no gate), and ``mixture`` (the mode's full forward).  Training
phases pick views; prediction uses the mode's natural one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import AutodiffError, ParamStore, Tape
from .layers import DenseLayer, GateNet, LoRAAdapter, MoELayer

__all__ = [
    "ARCHS",
    "MODES",
    "FeatureSchema",
    "AdapterConfig",
    "CtrModel",
    "build_model",
    "predict_ctr",
    "fm_pairwise",
    "wide_logit",
    "save_checkpoint",
    "load_checkpoint",
]

ARCHS = ("mlp", "wdl", "deepfm")
MODES = ("plain", "mlora", "moe")
DEFAULT_HIDDEN = (64, 32)
EMBED_INIT_STD = 0.05


@dataclass(frozen=True)
class FeatureSchema:
    """Categorical feature fields with their cardinalities, plus domain count."""

    fields: tuple[tuple[str, int], ...]
    embedding_dim: int = 8
    n_domains: int = 1

    def __post_init__(self):
        if not self.fields:
            raise ValueError("schema needs at least one feature field")
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("duplicate field names in schema")
        for n, c in self.fields:
            if c < 1:
                raise ValueError(f"field {n!r} has non-positive cardinality {c}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)

    @property
    def input_dim(self) -> int:
        return len(self.fields) * self.embedding_dim


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    alpha: float = 4.0
    experts_per_domain: int = 1
    gate_input_conditioned: bool = False
    gate_includes_backbone: bool = False
    gate_force_one_hot: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if self.experts_per_domain < 1:
            raise ValueError("experts_per_domain must be >= 1")
        if self.gate_force_one_hot and self.experts_per_domain != 1:
            raise ValueError("one-hot gating requires exactly one expert per domain")
        if self.gate_force_one_hot and self.gate_includes_backbone:
            raise ValueError("one-hot gating keeps the backbone outside the mixture")


def fm_pairwise(vectors) -> float:
    """Sum of dot products over all unordered pairs of equal-length vectors.

    Computed with the half-of-square-minus-squares identity, the same
    arrangement the model tape uses.
    """
    vs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len(vs) < 2:
        return 0.0
    total = np.sum(vs, axis=0)
    sq_sum = np.sum([v * v for v in vs], axis=0)
    return float(0.5 * (total * total - sq_sum).sum())


def wide_logit(ids: np.ndarray, tables: list[np.ndarray], bias: float) -> np.ndarray:
    """Linear memorization term: one learned scalar per (field, id), plus bias."""
    ids = np.asarray(ids)
    out = np.full(ids.shape[0], float(bias))
    for f, table in enumerate(tables):
        out += np.asarray(table).reshape(-1)[ids[:, f]]
    return out


class CtrModel:
    """A built CTR model: parameter store plus cached per-view tapes."""

    def __init__(self, schema: FeatureSchema, arch: str, mode: str,
                 adapter_cfg: AdapterConfig, hidden: tuple[int, ...], seed: int):
        if arch not in ARCHS:
            raise ValueError(f"unknown arch {arch!r}; use one of {ARCHS}")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; use one of {MODES}")
        if mode == "mlora" and adapter_cfg.experts_per_domain != 1:
            raise ValueError("mlora mode keeps exactly one adapter per domain")
        self.schema = schema
        self.arch = arch
        self.mode = mode
        self.adapter_cfg = adapter_cfg
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        self.store = ParamStore()
        self._tapes: dict[str, tuple[Tape, int, int]] = {}
        self._build()

    # ---- construction ---------------------------------------------------

    def _adapted(self) -> bool:
        return self.mode in ("mlora", "moe")

    @property
    def experts_per_domain(self) -> int:
        return self.adapter_cfg.experts_per_domain if self.mode == "moe" else 1

    @property
    def n_experts_total(self) -> int:
        return self.schema.n_domains * self.experts_per_domain

    def expert_keys(self) -> list[tuple[int, int]]:
        return [(d, k) for d in range(self.schema.n_domains)
                for k in range(self.experts_per_domain)]

    def _gate_mode(self) -> str:
        if self.mode == "mlora" or self.adapter_cfg.gate_force_one_hot:
            return "one_hot"
        return "softmax"

    def _make_layer(self, name: str, d_in: int, d_out: int, activation: str):
        base = DenseLayer(self.store, name, d_in, d_out, activation, "backbone", self.seed)
        if not self._adapted():
            return base
        cfg = self.adapter_cfg
        experts = []
        for d, k in self.expert_keys():
            ad = LoRAAdapter(self.store, f"{name}.e{d}.{k}", d_in, d_out,
                             cfg.rank, cfg.alpha, f"expert({d},{k},{name})", self.seed)
            experts.append((d, k, ad))
        gate = None
        if self._gate_mode() == "softmax":
            n_cols = len(experts) + (1 if cfg.gate_includes_backbone else 0)
            gate = GateNet(self.store, f"{name}.gate", self.schema.n_domains, n_cols,
                           d_in=d_in, input_conditioned=cfg.gate_input_conditioned)
        return MoELayer(base, experts, gate=gate,
                        gate_includes_backbone=cfg.gate_includes_backbone,
                        gate_mode=self._gate_mode(), n_domains=self.schema.n_domains)

    def _build(self) -> None:
        from .autodiff import rng_for

        sch = self.schema
        for fname, card in sch.fields:
            emb = rng_for(self.seed, f"emb.{fname}").normal(
                0.0, EMBED_INIT_STD, size=(card, sch.embedding_dim))
            self.store.add(f"emb.{fname}", emb, "backbone")
        if self.arch in ("wdl", "deepfm"):
            for fname, card in sch.fields:
                self.store.add(f"wide.{fname}", np.zeros((card, 1)), "backbone")
            self.store.add("wide.bias", np.zeros((1,)), "backbone")
        self.tower = []
        d_in = sch.input_dim
        for i, width in enumerate(self.hidden):
            self.tower.append(self._make_layer(f"tower.{i}", d_in, width, "relu"))
            d_in = width
        self.head = self._make_layer("head", d_in, 1, "identity")

    # ---- tape assembly --------------------------------------------------

    def _emit_layer(self, layer, tape: Tape, x: int, view: str) -> int:
        if not self._adapted():
            return layer.emit(tape, x)
        if view == "backbone":
            return layer.emit_backbone(tape, x)
        if view.startswith("expert:"):
            _, d, k = view.split(":")
            return layer.emit_single_expert(tape, x, int(d), int(k))
        onehot = tape.input("domain_onehot") if layer.gate_mode == "one_hot" else None
        return layer.emit(tape, x, tape.input("domain"), onehot)

    def tape(self, view: str) -> tuple[Tape, int, int]:
        """(tape, probability node, loss node) for a forward view.

        Views: "backbone", "mixture", or "expert:d:k".  Plain models only
        have the backbone view; "mixture" aliases to it for convenience.
        """
        if not self._adapted():
            view = "backbone"
        if view in self._tapes:
            return self._tapes[view]
        sch = self.schema
        tape = Tape(self.store)
        embs = []
        for fname, _ in sch.fields:
            embs.append(tape.gather(tape.param(f"emb.{fname}"), tape.input(f"ids.{fname}")))
        x = tape.concat(embs) if len(embs) > 1 else embs[0]
        h = x
        for layer in self.tower:
            h = self._emit_layer(layer, tape, h, view)
        logit = self._emit_layer(self.head, tape, h, view)
        if self.arch in ("wdl", "deepfm"):
            wide = None
            for fname, _ in sch.fields:
                w = tape.gather(tape.param(f"wide.{fname}"), tape.input(f"ids.{fname}"))
                wide = w if wide is None else tape.add(wide, w)
            wide = tape.add(wide, tape.param("wide.bias"))
            logit = tape.add(logit, wide)
        if self.arch == "deepfm":
            total = embs[0]
            for e in embs[1:]:
                total = tape.add(total, e)
            sq_of_sum = tape.mul(total, total)
            sum_of_sq = tape.mul(embs[0], embs[0])
            for e in embs[1:]:
                sum_of_sq = tape.add(sum_of_sq, tape.mul(e, e))
            diff = tape.add(sq_of_sum, tape.scale(sum_of_sq, -1.0))
            fm = tape.scale(tape.reduce_sum(diff, axis=-1), 0.5)
            logit = tape.add(logit, fm)
        p = tape.sigmoid(logit)
        loss = tape.bce(p, tape.input("y"))
        self._tapes[view] = (tape, p, loss)
        return self._tapes[view]

    def predict_view(self) -> str:
        return "backbone" if self.mode == "plain" else "mixture"

    # ---- inference -------------------------------------------------------

    def _validate_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != len(self.schema.fields):
            raise ValueError(
                f"ids must be (batch, {len(self.schema.fields)}), got {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("ids must be integers")
        for f, (fname, card) in enumerate(self.schema.fields):
            col = ids[:, f]
            if col.size and (col.min() < 0 or col.max() >= card):
                bad = col[(col < 0) | (col >= card)][0]
                raise ValueError(f"feature {fname!r}: id {bad} out of range [0, {card})")
        return ids

    def bind_inputs(self, ids: np.ndarray, domain: int, y: np.ndarray | None = None) -> dict:
        inputs = {}
        for f, (fname, _) in enumerate(self.schema.fields):
            inputs[f"ids.{fname}"] = ids[:, f]
        if self._adapted():
            inputs["domain"] = np.array([domain])
            if self._gate_mode() == "one_hot":
                row = np.zeros((1, self.n_experts_total))
                row[0, domain] = 1.0
                inputs["domain_onehot"] = row
        if y is not None:
            inputs["y"] = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        return inputs

    def predict(self, ids: np.ndarray, domain: int, view: str | None = None) -> np.ndarray:
        ids = self._validate_ids(ids)
        if not (0 <= domain < self.schema.n_domains):
            raise ValueError(
                f"domain index {domain} out of range [0, {self.schema.n_domains})")
        tape, p_node, _ = self.tape(view or self.predict_view())
        p = tape.forward(self.bind_inputs(ids, domain), output=p_node)
        return p.reshape(-1)


def build_model(schema: FeatureSchema, arch: str, mode: str,
                adapter_cfg: AdapterConfig | None = None, seed: int = 0,
                hidden: tuple[int, ...] = DEFAULT_HIDDEN) -> CtrModel:
    """Deterministically construct a CTR model; same seed, same weights."""
    return CtrModel(schema, arch, mode, adapter_cfg or AdapterConfig(), hidden, seed)


def predict_ctr(model: CtrModel, ids: np.ndarray, domain: int) -> np.ndarray:
    """Probabilities in (0,1) for a batch of id rows, all of one domain."""
    return model.predict(ids, domain)


# ---- checkpoints ----------------------------------------------------------


def save_checkpoint(model: CtrModel, path) -> None:
    """Write a self-describing, bit-exact snapshot of the model."""
    manifest = {
        "format": "moectr-checkpoint",
        "version": 1,
        "schema": {
            "fields": [[n, c] for n, c in model.schema.fields],
            "embedding_dim": model.schema.embedding_dim,
            "n_domains": model.schema.n_domains,
        },
        "arch": model.arch,
        "mode": model.mode,
        "hidden": list(model.hidden),
        "seed": model.seed,
        "adapter": asdict(model.adapter_cfg),
        "params": [],
    }
    arrays = {}
    for i, (name, group, trainable) in enumerate(model.store.param_groups()):
        key = f"p{i:05d}"
        manifest["params"].append(
            {"name": name, "group": group, "trainable": trainable, "key": key})
        arrays[key] = model.store.get(name)
    arrays["manifest"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> CtrModel:
    """Rebuild a model from a checkpoint; parameters round-trip bit-exactly."""
    with np.load(path) as z:
        try:
            manifest = json.loads(bytes(z["manifest"].tobytes()).decode("utf-8"))
        except KeyError:
            raise ValueError(f"{path}: not a model checkpoint (no manifest)")
        if manifest.get("format") != "moectr-checkpoint":
            raise ValueError(f"{path}: unknown checkpoint format")
        schema = FeatureSchema(
            fields=tuple((n, c) for n, c in manifest["schema"]["fields"]),
            embedding_dim=manifest["schema"]["embedding_dim"],
            n_domains=manifest["schema"]["n_domains"],
        )
        model = CtrModel(schema, manifest["arch"], manifest["mode"],
                         AdapterConfig(**manifest["adapter"]),
                         tuple(manifest["hidden"]), manifest["seed"])
        manifest_names = {rec["name"] for rec in manifest["params"]}
        if set(model.store.names()) != manifest_names:
            raise ValueError(f"{path}: parameter set does not match model config")
        for rec in manifest["params"]:
            model.store.set(rec["name"], z[rec["key"]])
            model.store[rec["name"]].trainable = bool(rec["trainable"])
    return model
