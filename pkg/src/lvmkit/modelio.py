"""Model persistence: one JSON schema for every model kind.

Files carry a schema version, a kind tag, the parameter payload, and fit
metadata.  Floats serialize through json's repr path (shortest round-trip
decimals), so save/load is bit-exact without a binary format.
"""

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import KindMismatchError, ParseError, VersionError
from .factor_analysis import FaParams
from .gaussian import AffineGaussianChannel, GaussianBelief
from .gmm import GmmParams
from .hmm import HmmParams
from .kalman import SsmParams
from .rbm import RbmParams
from .regression import FAMILIES, IcaModel, LinearMap
from .sparse_coding import SparseCodingParams

SCHEMA_VERSION = 1
MODEL_KINDS = ("gmm", "fa", "sc", "hmm", "ssm", "rbm", "glim", "ica")


@dataclass
class ModelFile:
    """Schema version, kind tag, parameter payload, and fit metadata."""

    kind: str
    params: object
    fit_metadata: dict
    schema_version: int = SCHEMA_VERSION


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def _payload(kind, params):
    if kind == "gmm":
        return {"weights": _arr(params.weights), "means": _arr(params.means),
                "covs": _arr(params.covs)}
    if kind == "fa":
        return {"loading": _arr(params.loading), "offset": _arr(params.offset),
                "diag_noise": _arr(params.diag_noise)}
    if kind == "sc":
        return {"dict": _arr(params.dict), "lambda": params.lam,
                "alpha": _arr(params.alpha), "beta": params.beta}
    if kind == "hmm":
        return {"init": _arr(params.init), "trans": _arr(params.trans),
                "columns_are_source_state": True,
                "means": _arr(params.means), "covs": _arr(params.covs)}
    if kind == "ssm":
        return {
            "A": _arr(params.trans.weights), "a": _arr(params.trans.offset),
            "Q": _arr(params.trans.noise_cov),
            "B": _arr(params.control_gain) if params.control_gain is not None else None,
            "C": _arr(params.emission.weights), "c": _arr(params.emission.offset),
            "R": _arr(params.emission.noise_cov),
            "mu1": _arr(params.init.mean), "V1": _arr(params.init.cov),
        }
    if kind == "rbm":
        return {"weights": _arr(params.weights),
                "visible_bias": _arr(params.visible_bias),
                "hidden_bias": _arr(params.hidden_bias)}
    if kind == "glim":
        weights, family = params
        return {"weights": _arr(weights), "family": family}
    if kind == "ica":
        return {"unmixing": _arr(params.unmixing),
                "nonlinearity": params.nonlinearity}
    raise ParseError(f"unknown model kind {kind!r}")


def _rebuild(kind, payload):
    try:
        if kind == "gmm":
            return GmmParams(np.array(payload["weights"]),
                             np.array(payload["means"]),
                             np.array(payload["covs"]))
        if kind == "fa":
            return FaParams(np.array(payload["loading"]),
                            np.array(payload["offset"]),
                            np.array(payload["diag_noise"]))
        if kind == "sc":
            return SparseCodingParams(np.array(payload["dict"]),
                                      payload["lambda"],
                                      np.array(payload["alpha"]),
                                      payload["beta"])
        if kind == "hmm":
            return HmmParams(np.array(payload["init"]),
                             np.array(payload["trans"]),
                             np.array(payload["means"]),
                             np.array(payload["covs"]))
        if kind == "ssm":
            return SsmParams(
                trans=AffineGaussianChannel(np.array(payload["A"]),
                                            np.array(payload["a"]),
                                            np.array(payload["Q"])),
                emission=AffineGaussianChannel(np.array(payload["C"]),
                                               np.array(payload["c"]),
                                               np.array(payload["R"])),
                init=GaussianBelief(np.array(payload["mu1"]),
                                    np.array(payload["V1"])),
                control_gain=(np.array(payload["B"])
                              if payload.get("B") is not None else None),
            )
        if kind == "rbm":
            return RbmParams(np.array(payload["weights"]),
                             np.array(payload["visible_bias"]),
                             np.array(payload["hidden_bias"]))
        if kind == "glim":
            if payload["family"] not in FAMILIES:
                raise ParseError(f"unknown GLiM family {payload['family']!r}")
            return (np.array(payload["weights"]), payload["family"])
        if kind == "ica":
            return IcaModel(np.array(payload["unmixing"]),
                            payload["nonlinearity"])
    except KeyError as exc:
        raise ParseError(f"model payload missing field {exc}") from exc
    raise ParseError(f"unknown model kind {kind!r}")


def save_model(kind, params, path, fit_metadata=None):
    """Write the model JSON; returns the ModelFile that was written."""
    model_file = ModelFile(kind=kind, params=params,
                           fit_metadata=dict(fit_metadata or {}))
    doc = {
        "schema_version": model_file.schema_version,
        "kind": kind,
        "params": _payload(kind, params),
        "fit": model_file.fit_metadata,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return model_file


def load_model(path, expected_kind=None):
    """Read a model JSON back into its parameter object.

    Raises ParseError on malformed files, VersionError on unknown schema
    versions, and KindMismatchError when `expected_kind` disagrees with the
    file's tag.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"could not parse model file: {exc}") from exc
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ParseError("model file lacks a schema_version field")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise VersionError(
            f"unknown schema version {doc['schema_version']!r}")
    kind = doc.get("kind")
    if kind not in MODEL_KINDS:
        raise ParseError(f"unknown model kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatchError(
            f"file holds a {kind!r} model, expected {expected_kind!r}")
    params = _rebuild(kind, doc.get("params", {}))
    return ModelFile(kind=kind, params=params, fit_metadata=doc.get("fit", {}),
                     schema_version=doc["schema_version"])
