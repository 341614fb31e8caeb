"""Experiment stages: data generation, linear design, training, evaluation, search.

Every stage reads and writes files below ``cfg.out``.  Outputs are
deterministic functions of the configuration and master seed; JSON files
carry ``schema_version`` and ``master_seed`` and every CSV has a
``<stem>.meta.json`` sidecar with the same fields.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, derived_seed
from .gru import gru_feedforward_full, gru_forward, load_model, save_model
from .inversion import StableInverseFF, design_stable_inverse, inverse_prediction, linear_ff_input
from .lti import polynomial_roots, Polynomial, ss_to_tf
from .inversion import derive_feedforward
from .plant import (
    DataSet,
    discrete_model,
    generate_training_data,
    generate_validation_data,
    generate_validation_refs,
    iae,
    identify_physical_params,
    params_from_dict,
    params_to_dict,
    scaled,
    simulate_closed_loop,
)
from .sgfilter import apply_centered, design_savgol
from .train import (
    HyperGrid,
    fit_sequences,
    ledger_csv,
    new_model,
    nrms,
    random_search,
    trial_config,
    training_pairs,
)

log = logging.getLogger(__name__)

CONTROLLERS = ("none", "zpetc", "gru", "preview-gru", "pg-gru")
INVERSE_MODELS = ("linear", "gru", "preview-gru", "pg-gru")
REFERENCE_NAMES = ("R1", "R2", "R3")


class MissingArtifactError(FileNotFoundError):
    pass


# paths and writers -----------------------------------------------------------

class Layout:
    def __init__(self, out):
        self.root = Path(out)

    data = property(lambda s: s.root / "data")
    training = property(lambda s: s.root / "data" / "training.csv")
    validation = property(lambda s: s.root / "data" / "validation.csv")
    controller = property(lambda s: s.root / "linear" / "controller.json")
    report = property(lambda s: s.root / "linear" / "report.json")
    eval = property(lambda s: s.root / "eval")
    search = property(lambda s: s.root / "search")

    def model(self, mode):
        return self.root / "models" / f"{mode}.json"

    def loss(self, mode):
        return self.root / "models" / f"{mode}_loss.csv"


def _stamp(cfg: ExperimentConfig, d: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "master_seed": cfg.master_seed, **d}


def write_json(path, cfg, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_stamp(cfg, obj), indent=1, sort_keys=True) + "\n")


def _meta_path(path):
    return path.with_name(path.stem + ".meta.json")


def write_csv(path, cfg, header, rows, meta=None):
    """CSV with repr floats plus a metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())
    write_json(_meta_path(path), cfg, {"columns": list(header), **(meta or {})})


def _require(path, what):
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the earlier stage first")


def _loop(cfg):
    return cfg.loop.build()


def _filter(cfg):
    f = cfg.filter
    return design_savgol(f.order, f.window, f.passes)


# stages ------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig):
    """Simulate the training run and the three validation references."""
    lay = Layout(cfg.out)
    lay.data.mkdir(parents=True, exist_ok=True)
    loop, filt = _loop(cfg), _filter(cfg)
    seed = derived_seed(cfg.master_seed, "data")
    common = {"master_seed": cfg.master_seed, "plant": asdict(cfg.plant),
              "parasitic": asdict(cfg.parasitic), "loop": loop.to_dict(),
              "filter": asdict(cfg.filter)}
    tr = generate_training_data(cfg.plant, cfg.parasitic, loop, seed, filt)
    tr.meta.update(common)
    tr.to_csv(lay.training)
    va = generate_validation_data(cfg.plant, cfg.parasitic, loop, filt)
    va.meta.update(common)
    va.meta["references"] = list(REFERENCE_NAMES)
    va.to_csv(lay.validation)
    log.info("wrote %d training and %d validation samples", len(tr), len(va))
    return tr, va


def load_datasets(cfg):
    lay = Layout(cfg.out)
    _require(lay.training, "training data")
    _require(lay.validation, "validation data")
    return DataSet.from_csv(lay.training), DataSet.from_csv(lay.validation)


def cmd_design_linear(cfg: ExperimentConfig):
    """Identify the physical parameters and design the stable inverse."""
    lay = Layout(cfg.out)
    _require(lay.training, "training data")
    train = DataSet.from_csv(lay.training)
    loop = _loop(cfg)
    ident = None
    params = cfg.plant
    if cfg.identification.enabled:
        ic = cfg.identification
        fit_data = train.segment(0, ic.max_samples) if ic.max_samples else train
        theta0 = scaled(cfg.plant, ic.initial_factors)
        ident = identify_physical_params(fit_data, loop, theta0, ic.free, ic.restarts,
                                         ic.maxiter, xatol=ic.xatol)
        params = ident.params
    dss = discrete_model(params, loop.Ts)
    sff = design_stable_inverse(dss, cfg.inversion.method, cfg.inversion.order)
    ff = derive_feedforward(dss)
    H = ss_to_tf(ff.as_state_space())
    inv_poles = polynomial_roots(Polynomial(H.den))
    report = {
        "eta0": sff.eta0,
        "n_ep": sff.n_ep,
        "preview": sff.preview,
        "method": sff.method,
        "inverse_poles": [[float(p.real), float(p.imag)] for p in sorted(inv_poles, key=lambda z: (z.real, z.imag))],
        "unstable_poles": [[float(p.real), float(p.imag)] for p in sff.unstable_poles],
        "n_unstable": len(sff.unstable_poles),
        "model_params": params_to_dict(params),
    }
    if sff.method == "noncausal":
        report["order"] = sff.order
        report["tail_bound"] = sff.tail_bound
    if ident is not None:
        report["identification"] = {
            "free": list(ident.free), "cost": ident.cost, "initial_cost": ident.initial_cost,
            "initial_params": params_to_dict(scaled(cfg.plant, cfg.identification.initial_factors)),
        }
    write_json(lay.controller, cfg, {"controller": sff.to_dict(), "model_params": params_to_dict(params)})
    write_json(lay.report, cfg, report)
    log.info("linear design: eta0=%d n_ep=%d unstable=%s", sff.eta0, sff.n_ep, sff.unstable_poles)
    return sff, report


def load_controller(cfg) -> StableInverseFF:
    lay = Layout(cfg.out)
    _require(lay.controller, "linear controller artifact")
    return StableInverseFF.from_dict(json.loads(lay.controller.read_text())["controller"])


def _training_mode(mode):
    return "residual" if mode == "pg-gru" else "inverse"


def cmd_train(cfg: ExperimentConfig, mode: str, callback=None):
    """Train one of the recurrent feedforward models."""
    lay = Layout(cfg.out)
    tc = cfg.train_config(mode)
    _require(lay.training, "training data")
    sff = load_controller(cfg) if mode == "pg-gru" else None
    train = DataSet.from_csv(lay.training)
    x, target = training_pairs(train, _training_mode(mode), sff)
    model = new_model(tc, x, target)
    res = fit_sequences(model, x, target, tc, callback)
    meta = {"mode": mode, "train_config": tc.to_dict(), "initial_loss": res.initial_loss,
            "master_seed": cfg.master_seed, "schema_version": SCHEMA_VERSION}
    lay.model(mode).parent.mkdir(parents=True, exist_ok=True)
    save_model(res.model, lay.model(mode), meta)
    write_csv(lay.loss(mode), cfg, ("epoch", "loss"),
              [(i, float(v)) for i, v in enumerate(res.loss_history)], {"mode": mode})
    log.info("trained %s in %.1f s", mode, res.wall_time)
    return res


def load_models(cfg, modes):
    lay = Layout(cfg.out)
    out = {}
    for mode in modes:
        _require(lay.model(mode), f"{mode} model")
        out[mode] = load_model(lay.model(mode))
    return out


def feedforward_signals(controller, r_filtered, sff=None, model=None):
    """(u_ff, parts) for one controller on a filtered reference of full length."""
    N = len(r_filtered)
    if controller == "none":
        return np.zeros(N), {}
    if controller == "zpetc":
        return linear_ff_input(sff, r_filtered), {}
    u_gru = gru_feedforward_full(model, r_filtered)
    if controller == "pg-gru":
        u_phy = linear_ff_input(sff, r_filtered)
        return u_phy + u_gru, {"uphy": u_phy, "ugru": u_gru}
    return u_gru, {}


def inverse_predictions(y_filtered, sff, models):
    """Predicted input on measured data for every inverse model, common length."""
    y = np.asarray(y_filtered, dtype=float)
    preds = {"linear": inverse_prediction(sff, y)}
    for mode, m in models.items():
        u = gru_forward(m, y)[1]
        if mode == "pg-gru":
            n = min(len(u), len(preds["linear"]))
            u = preds["linear"][:n] + u[:n]
        preds[mode] = u
    n = min(len(v) for v in preds.values())
    return {k: v[:n] for k, v in preds.items()}


def cmd_evaluate(cfg: ExperimentConfig, controllers=CONTROLLERS):
    """Closed-loop IAE on R1-R3 and inverse-model NRMS on the validation data."""
    lay = Layout(cfg.out)
    controllers = tuple(controllers)
    unknown = set(controllers) - set(CONTROLLERS)
    if unknown:
        raise ConfigError(f"unknown controllers {sorted(unknown)}")
    loop, filt = _loop(cfg), _filter(cfg)
    sff = load_controller(cfg) if set(controllers) - {"none"} else None
    models = load_models(cfg, [c for c in controllers if c in ("gru", "preview-gru", "pg-gru")])
    refs = generate_validation_refs(loop)
    table = {c: [] for c in controllers}
    for i, r in enumerate(refs):
        Fr = apply_centered(filt, r)
        for c in controllers:
            u_ff, parts = feedforward_signals(c, Fr, sff, models.get(c))
            d = simulate_closed_loop(cfg.plant, cfg.parasitic, loop, r, u_ff)
            table[c].append(iae(d.e, loop.Ts))
            cols = {"k": d.k, "r": d.r, "uff": d.u_ff, "ufb": d.u_fb, "e": d.e, **parts}
            write_csv(lay.eval / "traces" / f"{c}_{REFERENCE_NAMES[i]}.csv", cfg, tuple(cols),
                      zip(*(v.tolist() for v in cols.values())),
                      {"controller": c, "reference": REFERENCE_NAMES[i]})
    write_csv(lay.eval / "iae.csv", cfg, ("controller",) + REFERENCE_NAMES,
              [(c, *table[c]) for c in controllers], {"unit": "rad*s", "definition": "Ts*sum|e|"})
    nrms_table = {}
    if sff is not None:
        _require(lay.validation, "validation data")
        val = DataSet.from_csv(lay.validation)
        inv_models = {m: models[m] for m in ("gru", "preview-gru", "pg-gru") if m in models}
        # predict over the continuous record: segments start away from rest,
        # and a cold start there would inject an artificial step
        preds = inverse_predictions(val.y_filtered, sff, inv_models)
        for lo, hi in val.meta["segments"]:
            for k, v in preds.items():
                stop = min(hi, len(v))
                nrms_table.setdefault(k, []).append(nrms(v[lo:stop], val.u[lo:stop]))
        rows = [(k, *nrms_table[k]) for k in INVERSE_MODELS if k in nrms_table]
        write_csv(lay.eval / "nrms.csv", cfg, ("model",) + REFERENCE_NAMES, rows, {"unit": "percent"})
    return table, nrms_table


def _search_trial(cfg, mode, train, val, sff):
    x, target = training_pairs(train, _training_mode(mode), sff)
    if cfg.search.max_samples:
        x, target = x[: cfg.search.max_samples], target[: cfg.search.max_samples]

    def run(point, seed):
        tc = replace(trial_config(point, cfg.train_config(mode), seed),
                     epochs=cfg.search.epochs)
        res = fit_sequences(new_model(tc, x, target), x, target, tc)
        preds = inverse_predictions(val.y_filtered, sff, {mode: res.model})
        if mode == "pg-gru":
            u_hat = preds["pg-gru"]
        else:
            u_hat = gru_forward(res.model, val.y_filtered)[1]
        final = res.loss_history[-1] if res.loss_history else res.initial_loss
        return final, nrms(u_hat, val.u[:len(u_hat)])
    return run


def cmd_search(cfg: ExperimentConfig, mode="pg-gru", budget=None):
    """Random search over the hyperparameter grid; writes a ranked ledger."""
    lay = Layout(cfg.out)
    budget = cfg.search.budget if budget is None else budget
    train, val = load_datasets(cfg)
    sff = load_controller(cfg)
    results = random_search(HyperGrid(), budget, derived_seed(cfg.master_seed, f"search:{mode}"),
                            _search_trial(cfg, mode, train, val, sff))
    lay.search.mkdir(parents=True, exist_ok=True)
    (lay.search / "ledger.csv").write_text(ledger_csv(results))
    write_json(_meta_path(lay.search / "ledger.csv"), cfg,
               {"mode": mode, "budget": budget, "epochs_per_trial": cfg.search.epochs})
    best = next((r for r in results if r.ok), None)
    if best is not None:
        tc = trial_config(best.params, cfg.train_config(mode), best.seed)
        write_json(lay.search / "best_config.json", cfg,
                   {"mode": mode, "train_config": tc.to_dict(), "val_nrms": best.val_nrms})
    return results


def run_all(cfg: ExperimentConfig, search=True, callback=None):
    cmd_generate(cfg)
    cmd_design_linear(cfg)
    for mode in ("pg-gru", "preview-gru", "gru"):
        cmd_train(cfg, mode, callback)
    out = cmd_evaluate(cfg)
    if search:
        cmd_search(cfg)
    return out
