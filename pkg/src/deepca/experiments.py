"""Experiment runners behind the command-line verbs.

Each runner takes a resolved config document, writes its artifacts into a
run directory (resolved config copy, CSV metrics, tensor dumps and a
``manifest.json`` with content checksums) and returns a summary dict.
Independent seeds or trials may run in a process pool whose size is capped
by ``DEEPCA_THREADS``; results are sorted before anything is written.
"""

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import admm, oracle, synth
from . import autodiff as ad
from . import learning as L
from .model import model_from_config
from .tensor import load_dcat, save_dcat

__all__ = [
    "GradcheckFailed",
    "worker_count",
    "parallel_map",
    "RunDir",
    "make_data",
    "gradcheck_report",
    "cmd_gradcheck",
    "cmd_demo_explaining_away",
    "cmd_demo_sparsity",
    "cmd_demo_inpaint",
    "cmd_train",
    "cmd_eval",
    "cmd_infer",
]


class GradcheckFailed(AssertionError):
    """Autodiff and finite differences disagree beyond tolerance."""


def worker_count(n_tasks):
    env = os.environ.get("DEEPCA_THREADS")
    limit = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))


def parallel_map(fn, items):
    """``[fn(i) for i in items]``, possibly in worker processes."""
    items = list(items)
    workers = worker_count(len(items))
    if workers <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Output directory bookkeeping; ``close`` writes the manifest."""

    def __init__(self, path, cfg, command):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files = []
        with open(self.path / "config.json", "w") as f:
            json.dump(cfg, f, indent=2, sort_keys=True)
        self.files.append("config.json")

    def file(self, name):
        self.files.append(name)
        return self.path / name

    def write_csv(self, name, header, rows, seed=None):
        with open(self.file(name), "w", newline="") as f:
            if seed is not None:
                f.write(f"# seed={seed}\n")
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([v if isinstance(v, str) else repr(_py(v)) for v in row])

    def close(self):
        entries = {}
        for name in sorted(set(self.files)):
            p = self.path / name
            entries[name] = {"sha256": _sha256(p), "bytes": p.stat().st_size}
        with open(self.path / "manifest.json", "w") as f:
            json.dump({"command": self.command, "files": entries}, f, indent=2, sort_keys=True)
        return entries


def _run_dir(out, cfg, command):
    return RunDir(out, cfg, command) if out is not None else None


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


# -- data --------------------------------------------------------------------------


def make_data(data_cfg, model, seed=None):
    """Build ``(train, test)`` datasets from a ``data`` config section."""
    gen = data_cfg["generator"]
    seed = data_cfg.get("seed", 0) if seed is None else seed
    n_train, n_test = data_cfg.get("n_train", 64), data_cfg.get("n_test", 32)
    if gen == "gaussian":
        rng = np.random.default_rng(seed)
        xs = rng.standard_normal((n_train + n_test,) + model.raw_input_shape)
        return L.Dataset(xs[:n_train]), L.Dataset(xs[n_train:])
    if gen == "dictionary":
        d, k = data_cfg.get("d", 16), data_cfg.get("k", 32)
        D = synth.dictionary_gen(d, k, data_cfg.get("coherence", 0.0), seed=seed)
        codes = synth.sparse_code_gen(k, data_cfg.get("density", 0.1), seed=seed + 1, n=n_train + n_test)
        xs = codes @ D.T
        if data_cfg.get("noise", 0.0) > 0:
            xs = xs + data_cfg["noise"] * np.random.default_rng(seed + 2).standard_normal(xs.shape)
        return L.Dataset(xs[:n_train]), L.Dataset(xs[n_train:])
    if gen == "depth":
        h, w = data_cfg.get("h", 28), data_cfg.get("w", 28)
        kw = dict(patches=data_cfg.get("patches", 4), mask_density=data_cfg.get("mask_density", 0.1),
                  noise=data_cfg.get("noise", 0.0))
        seeds = np.random.SeedSequence(seed).generate_state(2)
        train = L.Dataset(*synth.depth_dataset(n_train, h, w, seed=int(seeds[0]), **kw))
        test = L.Dataset(*synth.depth_dataset(n_test, h, w, seed=int(seeds[1]), **kw))
        return train, test
    if gen == "file":
        xs = load_dcat(data_cfg["inputs"])
        ys = load_dcat(data_cfg["targets"]) if "targets" in data_cfg else None
        return L.Dataset(xs, ys), None
    raise ValueError(f"unknown data generator {gen!r}")


def _train_config(cfg, **over):
    tc = dict(cfg.get("train", {}))
    tc.update(over)
    return L.TrainConfig(**tc)


# -- gradcheck ---------------------------------------------------------------------


def _min_kink(model, x, T, params):
    log = []
    admm.infer(model, x, T, params=params, kink_log=log)
    return min((float(np.min(d)) for d in log if np.size(d)), default=np.inf)


def gradcheck_report(model, T_list, tol=1e-4, kink_margin=1e-4, h=1e-5, batch=3, seed=0, max_tries=100):
    """Compare autodiff gradients of ``0.5 ||f^[T](x) - y||^2`` with central
    differences for every parameter tensor and every ``T``.

    Inputs are redrawn until every prox argument is at least
    ``kink_margin`` away from a nondifferentiable point. Returns rows
    ``(T, parameter, max_relative_error, passed)``; the relative error of a
    tensor is ``max|g_ad - g_fd| / max(max|g_fd|, 1e-12)``.
    """
    rng = np.random.default_rng(seed)
    names = [n for n, _, _ in model.parameters()]
    params = [np.array(p) for _, p, _ in model.parameters()]
    rows = []
    for T in T_list:
        for _ in range(max_tries):
            x = rng.standard_normal((batch,) + model.raw_input_shape)
            y = rng.standard_normal((batch,) + model.output_shape)
            if _min_kink(model, x, T, params) >= kink_margin:
                break
        else:
            raise RuntimeError(f"no kink-free input found for T={T}")

        def f(ps):
            st = admm.infer(model, x, T, params=ps)
            return float(ad.value_of(ad.squared_error(st.z[-1], y)))

        leaves = [ad.leaf(p) for p in params]
        st = admm.infer(model, x, T, params=leaves)
        ad.backward(ad.squared_error(st.z[-1], y))
        for i, name in enumerate(names):
            fd = oracle.finite_difference_grad(
                lambda t, i=i: f(params[:i] + [t] + params[i + 1:]), params[i], h=h
            )
            err = float(np.max(np.abs(leaves[i].grad - fd)) / max(float(np.max(np.abs(fd))), 1e-12))
            rows.append((T, name, err, err <= tol))
    return rows


def cmd_gradcheck(cfg, out=None):
    run = cfg.get("run", {})
    model = model_from_config(cfg["model"], seed=cfg.get("data", {}).get("seed", 0))
    tol = run.get("tol", 1e-4)
    rows = gradcheck_report(
        model, run.get("T_list", [1, 2, 3]), tol=tol, kink_margin=run.get("kink_margin", 1e-4),
        h=run.get("fd_step", 1e-5), batch=run.get("batch", 3), seed=cfg.get("data", {}).get("seed", 0),
    )
    rd = _run_dir(out, cfg, "gradcheck")
    if rd:
        rd.write_csv("gradcheck.csv", ["T", "parameter", "max_rel_error", "passed"],
                     [(T, n, e, str(ok)) for T, n, e, ok in rows], seed=cfg.get("data", {}).get("seed", 0))
        rd.close()
    failed = [r for r in rows if not r[3]]
    summary = {"rows": rows, "tol": tol, "passed": not failed}
    if failed:
        worst = max(failed, key=lambda r: r[2])
        raise GradcheckFailed(
            f"{len(failed)} of {len(rows)} gradient checks above tolerance {tol:g}; "
            f"worst {worst[1]} at T={worst[0]}: {worst[2]:.3e}"
        )
    return summary


# -- explaining away ---------------------------------------------------------------


def _ea_trial(args):
    data, trial = args
    seed = data.get("seed", 0) * 100_003 + trial
    d, k = data.get("d", 16), data.get("k", 32)
    D = synth.dictionary_gen(d, k, data.get("coherence", 0.7), seed=seed)
    x = D @ synth.sparse_code_gen(k, data.get("density", 0.1), seed=seed + 50_000)
    s = oracle.explaining_away_stats(D, x[None], data.get("bias", 0.1), steps=data.get("steps", 3000))
    ff_n, opt_n = int(s["ff_sparsity"][0]), int(s["opt_sparsity"][0])
    ff_e, opt_e = float(s["ff_error"][0]), float(s["opt_error"][0])
    return trial, ff_n, opt_n, ff_e, opt_e, opt_n < ff_n and opt_e <= ff_e


def cmd_demo_explaining_away(cfg, out=None):
    data = cfg["data"]
    trials = data.get("trials", 100)
    rows = sorted(parallel_map(_ea_trial, [(data, t) for t in range(trials)]))
    wins = sum(r[5] for r in rows)
    rd = _run_dir(out, cfg, "demo-explaining-away")
    if rd:
        rd.write_csv(
            "explaining_away.csv",
            ["trial", "ff_nonzeros", "opt_nonzeros", "ff_error", "opt_error", "opt_sparser"],
            [r[:5] + (str(r[5]),) for r in rows], seed=data.get("seed", 0),
        )
        rd.close()
    return {"rows": rows, "trials": trials, "opt_sparser": wins, "fraction": wins / trials}


# -- sparsity vs iterations ---------------------------------------------------------


def _mean_bias(model):
    bs = [np.ravel(l.bias) for l in model.layers if l.penalty.kind == "nonneg_l1"]
    return float(np.mean(np.concatenate(bs))) if bs else 0.0


def _sparsity_run(args):
    cfg, seed, T, mode = args
    model = model_from_config(dict(cfg["model"], T=T), seed=seed)
    train, test = make_data(cfg["data"], model, seed=seed)
    tc = _train_config(cfg, T=T, seed=seed, learn_bias=(mode == "learnable"), readout="reconstruction")
    res = L.train(model, train, tc)
    ev = L.evaluate(res.model, train, T, readout="reconstruction")
    dens = [ev[f"avg_sparsity_layer{j}"] for j in range(1, len(model.layers) + 1)]
    return (seed, T, mode, ev["loss"], _mean_bias(model), _mean_bias(res.model), *dens), res.metrics


def cmd_demo_sparsity(cfg, out=None):
    run = cfg.get("run", {})
    jobs = [(cfg, s, T, m) for s in run.get("seeds", [0]) for T in run.get("T_list", [1, 2, 3])
            for m in run.get("bias_modes", ["fixed", "learnable"])]
    results = sorted(parallel_map(_sparsity_run, jobs), key=lambda r: r[0][:3])
    rows = [r[0] for r in results]
    n_layers = len(cfg["model"]["layers"])
    header = ["seed", "T", "bias_mode", "recon_error", "initial_mean_bias", "final_mean_bias"]
    header += [f"avg_sparsity_layer{j}" for j in range(1, n_layers + 1)]
    rd = _run_dir(out, cfg, "demo-sparsity")
    if rd:
        rd.write_csv("sparsity.csv", header, rows, seed=run.get("seeds", [0])[0])
        hist = []
        for (key, metrics) in ((r[0][:3], r[1]) for r in results):
            for m in metrics:
                hist.append(key + (m["epoch"], m["loss"]) +
                            tuple(m[f"avg_sparsity_layer{j}"] for j in range(1, n_layers + 1)))
        rd.write_csv("metrics.csv", ["seed", "T", "bias_mode", "epoch", "loss"] + header[6:], hist,
                     seed=run.get("seeds", [0])[0])
        rd.close()
    return {"rows": [dict(zip(header, r)) for r in rows]}


# -- constrained inpainting ---------------------------------------------------------


def _inpaint_run(args):
    cfg, seed, T = args
    model = model_from_config(dict(cfg["model"], T=T), seed=seed)
    train, test = make_data(cfg["data"], model, seed=seed)
    tc = _train_config(cfg, T=T, seed=seed)
    res = L.train(model, train, tc)
    ev_train = L.evaluate(res.model, train, T)
    ev_test = L.evaluate(res.model, test, T)
    pred, _, _ = L.forward(res.model, test, T)
    row = (seed, T, ev_train["mae"], ev_test["mae"], max(ev_train["max_violation"], ev_test["max_violation"]))
    return row, np.asarray(pred), res.metrics


def cmd_demo_inpaint(cfg, out=None):
    run = cfg.get("run", {})
    jobs = [(cfg, s, T) for s in run.get("seeds", [0]) for T in run.get("T_list", [1, 2, 3, 5, 10, 20])]
    results = sorted(parallel_map(_inpaint_run, jobs), key=lambda r: r[0][:2])
    rows = [r[0] for r in results]
    header = ["seed", "T", "train_mae", "test_mae", "max_violation"]
    rd = _run_dir(out, cfg, "demo-inpaint")
    if rd:
        rd.write_csv("inpaint.csv", header, rows, seed=run.get("seeds", [0])[0])
        n_layers = len(cfg["model"]["layers"])
        hist = [(r[0][0], r[0][1], m["epoch"], m["split"], m["loss"], m["mae"])
                + tuple(m[f"avg_sparsity_layer{j}"] for j in range(1, n_layers + 1))
                for r in results for m in r[2]]
        rd.write_csv("metrics.csv", ["seed", "T", "epoch", "split", "loss", "mae"]
                     + [f"avg_sparsity_layer{j}" for j in range(1, n_layers + 1)], hist,
                     seed=run.get("seeds", [0])[0])
        for (seed, T, *_), pred, _ in results:
            save_dcat(rd.file(f"pred_seed{seed}_T{T}.dcat"), pred)
        rd.close()
    return {"rows": [dict(zip(header, r)) for r in rows], "predictions": {r[0][:2]: r[1] for r in results}}


# -- generic train / eval / infer ---------------------------------------------------


def cmd_train(cfg, out=None):
    seed = cfg.get("train", {}).get("seed", 0)
    model = model_from_config(cfg["model"], seed=seed)
    tc = _train_config(cfg)
    if "T" not in cfg.get("train", {}):
        tc.T = model.T
    train, test = make_data(cfg["data"], model)
    res = L.train(model, train, tc, test=test)
    rd = _run_dir(out, cfg, "train")
    if rd:
        L.write_metrics_csv(res.metrics, rd.file("metrics.csv"), len(model.layers), seed=seed)
        L.save_checkpoint(rd.file("model.dcac"), res.model.with_T(tc.T), res.optimizer.velocity, res.epoch,
                          res.rng.bit_generator.state, tc.to_dict(), res.metrics)
        rd.close()
    return {"metrics": res.metrics, "model": res.model}


def cmd_eval(checkpoint, cfg, out=None, T=None):
    ck = L.load_checkpoint(checkpoint)
    model = ck.model
    T = T or ck.train_config.get("T", model.T)
    train, test = make_data(cfg["data"], model)
    data = test if test is not None else train
    kind = ck.train_config.get("loss", "squared_error")
    readout = ck.train_config.get("readout", "output")
    ev = {k: _py(v) for k, v in L.evaluate(model, data, T, kind, readout).items()}
    rd = _run_dir(out, cfg, "eval")
    if rd:
        keys = sorted(ev)
        rd.write_csv("eval.csv", ["T"] + keys, [[T] + [ev[k] for k in keys]], seed=cfg["data"].get("seed", 0))
        rd.close()
    return ev


def cmd_infer(checkpoint, inputs, out, T=None, trace=None, mask=None, observed=None):
    """Batch inference from files; returns the output tensor."""
    ck = L.load_checkpoint(checkpoint)
    model = ck.model
    x = load_dcat(inputs)
    penalties = None
    if mask is not None:
        ds = L.Dataset(x, mask=load_dcat(mask) != 0, observed=load_dcat(observed))
        penalties = ds.penalties(model)
    rows = [] if trace is not None else None
    state = admm.infer(model, x, T if T is not None else model.T, penalties=penalties, trace=rows)
    y = np.asarray(state.output)
    save_dcat(out, y)
    if trace is not None:
        admm.write_trace_csv(rows, trace)
    return y

