"""Model persistence.

Linear models serialize to a JSON text document (column names, intercept,
coefficients, normalization record, fit metadata). Tree and network models
use a binary container: a magic line, a JSON header describing the payload
arrays, then the raw array bytes in header order. Both formats are
byte-deterministic for identical models, so output manifests can hash them.
"""

from __future__ import annotations

import json

import numpy as np

from .features import Normalization
from .linmodels import LinearModel
from .mlmodels import EnsembleModel, GBTModel, LSTMModel, MLPModel, Tree
from .mlmodels.lstm import LSTMLayerParams

MAGIC = b"IVMODEL1\n"


def _norm_to_meta(norm: Normalization | None):
    if norm is None:
        return None
    return {
        "columns": list(norm.columns),
        "means": [float(v) for v in norm.means],
        "stds": [float(v) for v in norm.stds],
        "dropped": list(norm.dropped),
    }


def _norm_from_meta(meta) -> Normalization | None:
    if meta is None:
        return None
    return Normalization(columns=tuple(meta["columns"]),
                         means=np.array(meta["means"], dtype=float),
                         stds=np.array(meta["stds"], dtype=float),
                         dropped=tuple(meta["dropped"]))


def _linear_doc(model: LinearModel, norm, extra) -> dict:
    return {
        "kind": "linear",
        "columns": list(model.columns),
        "intercept": model.intercept,
        "coefficients": [float(v) for v in model.coef],
        "sse": model.sse,
        "n_obs": model.n_obs,
        "jitter_used": model.jitter_used,
        "lam": model.lam,
        "normalization": _norm_to_meta(norm),
        "extra": extra or {},
    }


def _linear_from_doc(doc) -> tuple[LinearModel, Normalization | None]:
    model = LinearModel(
        intercept=float(doc["intercept"]),
        coef=np.array(doc["coefficients"], dtype=float),
        columns=tuple(doc["columns"]),
        sse=float(doc["sse"]), n_obs=int(doc["n_obs"]),
        jitter_used=bool(doc.get("jitter_used", False)),
        lam=doc.get("lam"),
    )
    return model, _norm_from_meta(doc.get("normalization"))


def _payload(model) -> tuple[str, dict, dict]:
    """(kind, meta, arrays) for the binary container."""
    if isinstance(model, GBTModel):
        sizes = np.array([t.n_nodes for t in model.trees], dtype=np.int64)
        cat = lambda attr, dtype: (np.concatenate([getattr(t, attr) for t in model.trees])
                                   .astype(dtype) if model.trees else np.empty(0, dtype))
        arrays = {
            "tree_sizes": sizes,
            "feature": cat("feature", np.int32),
            "threshold": cat("threshold", np.float64),
            "left": cat("left", np.int32),
            "right": cat("right", np.int32),
            "value": cat("value", np.float64),
        }
        meta = {"base": model.base, "learning_rate": model.learning_rate,
                "columns": list(model.columns), "rounds_grown": model.rounds_grown}
        return "gbt", meta, arrays
    if isinstance(model, MLPModel):
        arrays = {}
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        for i in range(len(model.bn_scale)):
            arrays[f"bn_scale{i}"] = model.bn_scale[i]
            arrays[f"bn_shift{i}"] = model.bn_shift[i]
            arrays[f"bn_mean{i}"] = model.bn_run_mean[i]
            arrays[f"bn_var{i}"] = model.bn_run_var[i]
        meta = {"columns": list(model.columns), "widths": list(model.widths),
                "batch_norm": model.batch_norm}
        return "mlp", meta, arrays
    if isinstance(model, LSTMModel):
        arrays = {}
        for i, layer in enumerate(model.layers):
            arrays[f"W{i}"] = layer.W
            arrays[f"U{i}"] = layer.U
            arrays[f"b{i}"] = layer.b
        arrays["out_w"] = model.out_w
        arrays["out_b"] = model.out_b
        meta = {"columns": list(model.columns), "input_dim": model.input_dim,
                "hidden": model.hidden, "n_layers": len(model.layers)}
        return "lstm", meta, arrays
    if isinstance(model, LinearModel):
        return "linear", _linear_doc(model, None, None), {}
    if isinstance(model, EnsembleModel):
        metas = []
        arrays = {}
        for i, member in enumerate(model.members):
            kind, meta, marrays = _payload(member)
            metas.append({"kind": kind, "meta": meta})
            for name, arr in marrays.items():
                arrays[f"m{i}/{name}"] = arr
        return "ensemble", {"members": metas}, arrays
    raise TypeError(f"cannot serialize {type(model).__name__}")


def _from_payload(kind: str, meta: dict, arrays: dict):
    if kind == "gbt":
        sizes = arrays["tree_sizes"]
        trees = []
        off = 0
        for n in sizes:
            n = int(n)
            trees.append(Tree(
                feature=arrays["feature"][off:off + n].copy(),
                threshold=arrays["threshold"][off:off + n].copy(),
                left=arrays["left"][off:off + n].copy(),
                right=arrays["right"][off:off + n].copy(),
                value=arrays["value"][off:off + n].copy(),
            ))
            off += n
        return GBTModel(base=float(meta["base"]),
                        learning_rate=float(meta["learning_rate"]),
                        trees=tuple(trees), columns=tuple(meta["columns"]),
                        rounds_grown=int(meta.get("rounds_grown", len(trees))))
    if kind == "mlp":
        widths = tuple(meta["widths"])
        n_layers = len(widths) + 1
        model = MLPModel(
            columns=tuple(meta["columns"]), widths=widths,
            batch_norm=bool(meta["batch_norm"]),
            weights=[arrays[f"w{i}"].copy() for i in range(n_layers)],
            biases=[arrays[f"b{i}"].copy() for i in range(n_layers)],
        )
        if model.batch_norm:
            for i in range(len(widths)):
                model.bn_scale.append(arrays[f"bn_scale{i}"].copy())
                model.bn_shift.append(arrays[f"bn_shift{i}"].copy())
                model.bn_run_mean.append(arrays[f"bn_mean{i}"].copy())
                model.bn_run_var.append(arrays[f"bn_var{i}"].copy())
        return model
    if kind == "lstm":
        layers = [LSTMLayerParams(W=arrays[f"W{i}"].copy(), U=arrays[f"U{i}"].copy(),
                                  b=arrays[f"b{i}"].copy())
                  for i in range(int(meta["n_layers"]))]
        return LSTMModel(columns=tuple(meta["columns"]),
                         input_dim=int(meta["input_dim"]), hidden=int(meta["hidden"]),
                         layers=layers, out_w=arrays["out_w"].copy(),
                         out_b=arrays["out_b"].copy())
    if kind == "linear":
        return _linear_from_doc(meta)[0]
    if kind == "ensemble":
        members = []
        for i, mm in enumerate(meta["members"]):
            marrays = {name.split("/", 1)[1]: arr for name, arr in arrays.items()
                       if name.startswith(f"m{i}/")}
            members.append(_from_payload(mm["kind"], mm["meta"], marrays))
        return EnsembleModel(members=tuple(members))
    raise ValueError(f"unknown payload kind {kind!r}")


def save_model(model, path, norm: Normalization | None = None,
               extra: dict | None = None) -> None:
    """Write a model (plus optional normalization record) to ``path``."""
    if isinstance(model, LinearModel):
        doc = _linear_doc(model, norm, extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return
    kind, meta, arrays = _payload(model)
    header = {
        "kind": kind,
        "meta": meta,
        "normalization": _norm_to_meta(norm),
        "extra": extra or {},
        "arrays": [{"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
                   for name, arr in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_model(path):
    """Read a model back; returns (model, normalization_or_None)."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            fh.seek(0)
            doc = json.loads(fh.read().decode())
            if doc.get("kind") != "linear":
                raise ValueError(f"{path}: not a recognized model file")
            return _linear_from_doc(doc)
        header = json.loads(fh.readline().decode())
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(spec["shape"]).copy()
    model = _from_payload(header["kind"], header["meta"], arrays)
    return model, _norm_from_meta(header.get("normalization"))
