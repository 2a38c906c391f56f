"""FM-family backbones with analytic gradients.

A :class:`ModelBundle` holds every learnable tensor in a flat ``params`` dict
keyed by name (``embedding.<k>``, ``linear.<k>``, ``bias``, ``fwfm_r``,
``fmfm_M``, ``dnn.W<i>``/``dnn.b<i>``, ``dnn.out_w``/``dnn.out_b``,
``adaptor.W``/``adaptor.b``, ``rescale``).  Forward passes cache what the
backward pass needs; :func:`loss_and_grad` composes BCE, the alignment loss
and both passes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .enhancement import FieConfig, FreConfig, fre_loss, pair_gram
from .semantics import adapt_field_embedding, adaptor_backward, init_adaptor

BACKBONES = ("fm", "fwfm", "fmfm", "deepfm", "mlp")
FM_FAMILY = ("fm", "fwfm", "fmfm", "deepfm")


@dataclass(eq=False)
class ModelBundle:
    kind: str
    vocab_sizes: tuple[int, ...]
    dim: int
    params: dict[str, np.ndarray]
    hidden_units: tuple[int, ...] = ()
    fre: FreConfig = field(default_factory=FreConfig)
    fie: FieConfig = field(default_factory=FieConfig)
    field_embeddings: np.ndarray | None = None
    interaction: np.ndarray | None = None
    seed: int = 0
    schema_digest: str = ""

    @property
    def K(self) -> int:
        return len(self.vocab_sizes)

    def field_table(self, k: int) -> np.ndarray:
        return self.params[f"embedding.{k}"]

    def copy(self) -> "ModelBundle":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def _rng(seed: int, group: str) -> np.random.Generator:
    # independent stream per parameter group: enabling one group never shifts another
    return np.random.default_rng([seed, zlib.crc32(group.encode("utf-8"))])


def _xavier(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def field_pairs(K: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(K, 1)


def init_bundle(kind: str, vocab_sizes, dim: int = 32, hidden_units=(300, 300, 128), *,
                fre: FreConfig | None = None, fie: FieConfig | None = None,
                field_embeddings: np.ndarray | None = None, seed: int = 0,
                init_std: float = 0.01, adaptor_init: str = "uniform",
                schema_digest: str = "") -> ModelBundle:
    """Build a freshly initialized bundle.

    Enhancement parameters exist only when the matching enhancement is
    active, and each group draws from its own seeded stream, so a bundle with
    both enhancements disabled is identical to the bare backbone.
    """
    if kind not in BACKBONES:
        raise ValueError(f"unknown backbone {kind!r}; expected one of {BACKBONES}")
    fre = fre or FreConfig()
    fie = fie or FieConfig()
    vocab_sizes = tuple(int(v) for v in vocab_sizes)
    K = len(vocab_sizes)
    if K < 2:
        raise ValueError("at least two fields are required")
    hidden_units = tuple(int(h) for h in hidden_units) if kind in ("deepfm", "mlp") else ()

    params: dict[str, np.ndarray] = {}
    for k, v in enumerate(vocab_sizes):
        params[f"embedding.{k}"] = _rng(seed, f"embedding.{k}").normal(0.0, init_std, size=(v, dim))
    if kind != "mlp":
        for k, v in enumerate(vocab_sizes):
            params[f"linear.{k}"] = np.zeros(v)
        params["bias"] = np.zeros(1)
    if kind == "fwfm":
        params["fwfm_r"] = np.ones((K, K))
    if kind == "fmfm":
        params["fmfm_M"] = np.tile(np.eye(dim), (K * (K - 1) // 2, 1, 1))
    if kind in ("deepfm", "mlp"):
        rng = _rng(seed, "dnn")
        width = K * dim
        for i, h in enumerate(hidden_units):
            params[f"dnn.W{i}"] = _xavier(rng, width, h, (width, h))
            params[f"dnn.b{i}"] = np.zeros(h)
            width = h
        params["dnn.out_w"] = _xavier(rng, width, 1, (width,))
        params["dnn.out_b"] = np.zeros(1)

    H = None if field_embeddings is None else np.asarray(field_embeddings, dtype=np.float64)
    if (fre.active or fie.active) and H is None:
        raise ValueError("field embeddings are required when an enhancement is active")
    if H is not None and H.shape[0] != K:
        raise ValueError(f"field embeddings have {H.shape[0]} rows for {K} fields")
    if fre.active:
        W, b = init_adaptor(H.shape[1], dim, _rng(seed, "adaptor"), adaptor_init)
        params["adaptor.W"], params["adaptor.b"] = W, b
    interaction = None
    if fie.active:
        from .semantics import FieldEmbeddingMatrix, field_interaction_matrix

        interaction = field_interaction_matrix(FieldEmbeddingMatrix(H, tuple(str(i) for i in range(K)))).M
        params["rescale"] = np.array([1.0, 0.0])

    return ModelBundle(kind, vocab_sizes, dim, params, hidden_units, fre, fie,
                       H if (fre.active or fie.active) else None, interaction, seed, schema_digest)


# ---------------------------------------------------------------- forward ops

def lookup_embeddings(tables, idx: np.ndarray) -> np.ndarray:
    """Gather ``(B, K, D)`` embeddings; ``tables[k]`` is the field-``k`` matrix."""
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    if idx.shape[1] != len(tables):
        raise ValueError(f"expected {len(tables)} fields, got {idx.shape[1]}")
    for k, t in enumerate(tables):
        col = idx[:, k]
        if col.size and (col.min() < 0 or col.max() >= t.shape[0]):
            raise IndexError(f"field {k}: feature index out of range [0, {t.shape[0]})")
    return np.stack([t[idx[:, k]] for k, t in enumerate(tables)], axis=1)


def linear_logit(bias, linear_tables, idx, x) -> np.ndarray:
    out = np.full(idx.shape[0], float(np.ravel(bias)[0]))
    for k, w in enumerate(linear_tables):
        out = out + w[idx[:, k]] * x[:, k]
    return out


def fm_forward(x, E, linear=0.0) -> np.ndarray:
    """``linear + sum_{k<l} x_k x_l <e_k, e_l>`` per instance."""
    G = pair_gram(np.atleast_2d(x), _as_batch(E))
    K = G.shape[-1]
    return linear + np.einsum("bkl,kl->b", G, np.triu(np.ones((K, K)), 1))


def fwfm_forward(x, E, r, linear=0.0) -> np.ndarray:
    G = pair_gram(np.atleast_2d(x), _as_batch(E))
    return linear + np.einsum("bkl,kl->b", G, np.triu(r, 1))


def fmfm_forward(x, E, M, linear=0.0) -> np.ndarray:
    """``M`` stacks one ``D x D`` matrix per field pair in ``triu_indices`` order."""
    V = np.atleast_2d(x)[..., None] * _as_batch(E)
    ks, ls = field_pairs(V.shape[1])
    VkM = np.einsum("bpd,pde->bpe", V[:, ks], M)
    return linear + np.sum(VkM * V[:, ls], axis=(1, 2))


def dnn_forward(flat, layers, out_w, out_b, cache=None) -> np.ndarray:
    """ReLU MLP; ``layers`` is a list of ``(W, b)``."""
    h = flat
    if cache is not None:
        cache.append(h)
    for W, b in layers:
        h = np.maximum(h @ W + b, 0.0)
        if cache is not None:
            cache.append(h)
    return h @ out_w + out_b


def deepfm_forward(x, E, layers, out_w, out_b, linear=0.0) -> np.ndarray:
    x = np.atleast_2d(x)
    E = _as_batch(E)
    flat = (x[..., None] * E).reshape(E.shape[0], -1)
    return fm_forward(x, E, linear) + dnn_forward(flat, layers, out_w, out_b)


def mlp_forward(x, E, layers, out_w, out_b) -> np.ndarray:
    x = np.atleast_2d(x)
    E = _as_batch(E)
    flat = (x[..., None] * E).reshape(E.shape[0], -1)
    return dnn_forward(flat, layers, out_w, out_b)


def predict(logit):
    """Numerically stable sigmoid."""
    z = np.asarray(logit, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _as_batch(E):
    E = np.asarray(E, dtype=np.float64)
    return E[None] if E.ndim == 2 else E


def _dnn_layers(bundle: ModelBundle):
    return [(bundle.params[f"dnn.W{i}"], bundle.params[f"dnn.b{i}"]) for i in range(len(bundle.hidden_units))]


def rescaled_interaction(bundle: ModelBundle) -> np.ndarray:
    scale, shift = bundle.params["rescale"]
    return scale * bundle.interaction + shift


def forward(bundle: ModelBundle, idx, x):
    """Batch logits plus the cache consumed by :func:`backward`."""
    p = bundle.params
    idx = np.asarray(idx, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    K = bundle.K
    E = lookup_embeddings([p[f"embedding.{k}"] for k in range(K)], idx)
    V = x[..., None] * E
    cache = {"idx": idx, "x": x, "E": E, "V": V}
    B = idx.shape[0]
    triu = np.triu(np.ones((K, K)), 1)

    logit = np.zeros(B)
    if bundle.kind != "mlp":
        logit = logit + linear_logit(p["bias"], [p[f"linear.{k}"] for k in range(K)], idx, x)

    need_gram = bundle.kind in ("fm", "fwfm", "deepfm") or bundle.fie.active
    if need_gram:
        G = np.einsum("bkd,bld->bkl", V, V)
        cache["G"] = G
    if bundle.kind in ("fm", "deepfm"):
        logit = logit + np.einsum("bkl,kl->b", G, triu)
    elif bundle.kind == "fwfm":
        logit = logit + np.einsum("bkl,kl->b", G, np.triu(p["fwfm_r"], 1))
    elif bundle.kind == "fmfm":
        ks, ls = field_pairs(K)
        VkM = np.einsum("bpd,pde->bpe", V[:, ks], p["fmfm_M"])
        cache["VkM"] = VkM
        logit = logit + np.sum(VkM * V[:, ls], axis=(1, 2))

    if bundle.kind in ("deepfm", "mlp"):
        acts = []
        logit = logit + dnn_forward(V.reshape(B, -1), _dnn_layers(bundle), p["dnn.out_w"], p["dnn.out_b"], acts)
        cache["acts"] = acts

    if bundle.fie.active:
        Mp = rescaled_interaction(bundle)
        plugin = np.einsum("bkl,kl->b", G, Mp * triu)
        cache["plugin"] = plugin
        if bundle.fie.mode == "implicit":
            cache["host_logit"] = logit
        logit = logit + bundle.fie.lambda_fm * plugin
    return logit, cache


def backward(bundle: ModelBundle, cache, dlogit, dE_extra=None) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(logit) for each instance.

    ``dE_extra`` adds a direct gradient on the looked-up embeddings (used by
    the alignment loss).  Rows not referenced by the batch get exact zeros.
    """
    p = bundle.params
    idx, x, V = cache["idx"], cache["x"], cache["V"]
    K, B = bundle.K, idx.shape[0]
    g = np.asarray(dlogit, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    triu = np.triu(np.ones((K, K)), 1)
    dV = np.zeros_like(V)

    if bundle.kind != "mlp":
        grads["bias"] = np.array([g.sum()])
        for k in range(K):
            dw = np.zeros_like(p[f"linear.{k}"])
            np.add.at(dw, idx[:, k], g * x[:, k])
            grads[f"linear.{k}"] = dw

    # shared pair weights for every gram-based term
    S = np.zeros((K, K))
    if bundle.kind in ("fm", "deepfm"):
        S += triu
    elif bundle.kind == "fwfm":
        S += np.triu(p["fwfm_r"], 1)
    if bundle.fie.active:
        S += bundle.fie.lambda_fm * rescaled_interaction(bundle) * triu
    if S.any():
        dV += g[:, None, None] * np.einsum("kl,bld->bkd", S + S.T, V)
    if bundle.kind == "fwfm" or bundle.fie.active:
        dG = np.einsum("b,bkl->kl", g, cache["G"]) * triu
        if bundle.kind == "fwfm":
            grads["fwfm_r"] = dG
        if bundle.fie.active:
            lam = bundle.fie.lambda_fm
            grads["rescale"] = np.array([lam * np.sum(dG * bundle.interaction), lam * np.sum(dG)])

    if bundle.kind == "fmfm":
        ks, ls = field_pairs(K)
        M = p["fmfm_M"]
        Vk, Vl = V[:, ks], V[:, ls]
        np.add.at(dV, (slice(None), ks), g[:, None, None] * np.einsum("pde,bpe->bpd", M, Vl))
        np.add.at(dV, (slice(None), ls), g[:, None, None] * cache["VkM"])
        grads["fmfm_M"] = np.einsum("b,bpd,bpe->pde", g, Vk, Vl)

    if bundle.kind in ("deepfm", "mlp"):
        acts = cache["acts"]
        n = len(bundle.hidden_units)
        grads["dnn.out_b"] = np.array([g.sum()])
        grads["dnn.out_w"] = acts[-1].T @ g
        dh = np.outer(g, p["dnn.out_w"])
        for i in range(n - 1, -1, -1):
            dz = dh * (acts[i + 1] > 0)
            grads[f"dnn.W{i}"] = acts[i].T @ dz
            grads[f"dnn.b{i}"] = dz.sum(axis=0)
            dh = dz @ p[f"dnn.W{i}"].T
        dV += dh.reshape(V.shape)

    dE = x[..., None] * dV
    if dE_extra is not None:
        dE = dE + dE_extra
    for k in range(K):
        de = np.zeros_like(p[f"embedding.{k}"])
        np.add.at(de, idx[:, k], dE[:, k])
        grads[f"embedding.{k}"] = de
    return grads


def bce_from_logits(labels, logits):
    """Mean binary cross-entropy from logits and its per-logit gradient."""
    y = np.asarray(labels, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    if y.size == 0:
        raise ValueError("BCE of an empty batch is undefined")
    if y.shape != z.shape:
        raise ValueError(f"labels {y.shape} and logits {z.shape} differ in shape")
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return losses.mean(), (predict(z) - y) / y.size


def loss_and_grad(bundle: ModelBundle, idx, x, y, need_grad: bool = True):
    """Total objective ``BCE + lambda_kl * align`` with gradients for every parameter.

    Returns ``(total, parts, grads)`` where ``parts`` has ``bce`` and ``align``.
    """
    logit, cache = forward(bundle, idx, x)
    bce, dlogit = bce_from_logits(y, logit)
    align, dE_extra = 0.0, None
    adaptor_grads = {}
    if bundle.fre.active:
        p = bundle.params
        Hp = adapt_field_embedding(bundle.field_embeddings, p["adaptor.W"], p["adaptor.b"])
        align, dE_fre, dHp = fre_loss(cache["E"], Hp, bundle.fre)
        lam = bundle.fre.lambda_kl
        dE_extra = lam * dE_fre
        dW, db = adaptor_backward(bundle.field_embeddings, lam * dHp)
        adaptor_grads = {"adaptor.W": dW, "adaptor.b": db}
    total = bce + bundle.fre.lambda_kl * align if bundle.fre.active else bce
    parts = {"bce": float(bce), "align": float(align)}
    if not need_grad:
        return float(total), parts, None
    grads = backward(bundle, cache, dlogit, dE_extra)
    grads.update(adaptor_grads)
    return float(total), parts, grads


def predict_logits(bundle: ModelBundle, idx, x, batch_size: int = 8192) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    out = [forward(bundle, idx[s:s + batch_size], x[s:s + batch_size])[0]
           for s in range(0, idx.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FIELDCTR-CKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path, metadata: dict | None = None) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic line, little-endian uint64 header length, JSON header, then
    raw little-endian float64 tensors in header order.  Output bytes depend
    only on the bundle contents.
    """
    tensors = dict(sorted(bundle.params.items()))
    if bundle.field_embeddings is not None:
        tensors["const.field_embeddings"] = bundle.field_embeddings
    if bundle.interaction is not None:
        tensors["const.interaction"] = bundle.interaction
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": bundle.kind,
        "vocab_sizes": list(bundle.vocab_sizes),
        "dim": bundle.dim,
        "hidden_units": list(bundle.hidden_units),
        "fre": {"lambda_kl": bundle.fre.lambda_kl, "variant": bundle.fre.variant,
                "cl_temperature": bundle.fre.cl_temperature},
        "fie": {"lambda_fm": bundle.fie.lambda_fm, "mode": bundle.fie.mode},
        "seed": bundle.seed,
        "schema_digest": bundle.schema_digest,
        "metadata": metadata or {},
        "tensors": [{"name": n, "shape": list(np.shape(t))} for n, t in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a fieldctr checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
            tensors[spec["name"]] = data.reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after tensors")
    H = tensors.pop("const.field_embeddings", None)
    M = tensors.pop("const.interaction", None)
    bundle = ModelBundle(
        kind=header["kind"],
        vocab_sizes=tuple(header["vocab_sizes"]),
        dim=header["dim"],
        params=tensors,
        hidden_units=tuple(header["hidden_units"]),
        fre=FreConfig(**header["fre"]),
        fie=FieConfig(**header["fie"]),
        field_embeddings=H,
        interaction=M,
        seed=header["seed"],
        schema_digest=header["schema_digest"],
    )
    return bundle, header["metadata"]
