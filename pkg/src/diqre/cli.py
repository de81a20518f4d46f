"""Command-line pipeline over the library: simulate, train, plan, run,
extract, report, audit.

Each stage reads and writes files named in a single JSON config (defaults
target the reference experiment; any entry can be overridden from the command
line with repeated ``--set dotted.key=value`` flags).  Artifacts carry a
provenance block recording the tool version, the parameters used, and the
sha256 digest of every input file, and stages are deterministic: rerunning
with identical inputs rewrites byte-identical artifacts.  All randomness is
explicit through seeds and seed files; nothing draws from ambient entropy.

Exit codes: 0 success, 2 parameter or config error, 3 infeasible plan,
4 protocol failure (including refusing to extract without a success
certificate), 5 audit failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys

import numpy as np
from mpmath import mp

from . import __version__
from .chsh import (
    ConditionalBehavior,
    InputDistribution,
    JointDistribution,
    build_polytope,
    build_spot_checking_inputs,
    input_entropy_rate,
)
from .device import DeviceModel, predicted_behavior, reference_device, sample_trials
from .errors import (
    AuditError,
    InfeasiblePlanError,
    InsufficientDataError,
    OptimizationError,
    ParameterError,
    PrecisionError,
    ProtocolFailureError,
    SeedUnderflowError,
)
from .extractor import BitStream, extract, output_length, toeplitz_fft, toeplitz_naive
from .mle import CountTable, counts_to_conditional, mle_project
from .pef import EstimationFactor, feasibility_report, scan_alpha
from .protocol import (
    EntropyCertificate,
    ExpansionTranscript,
    ProtocolPlan,
    SeedStream,
    SimulatedDevice,
    certify,
    net_expansion_curve,
    plan_expansion,
    run_expansion,
    save_outputs,
    load_outputs,
    sigma_nu,
)
from .qef import GridCertificate, audit_grid_certificate, rescale_to_qef
from .refdata import ALPHA_REF, EPS_B_REF, Q_REF, QEF_DIVISOR

__all__ = ["main", "default_config", "load_config"]


# --------------------------------------------------------------------- config


def default_config() -> dict:
    """Built-in configuration: the reference experiment, all paths relative."""
    return {
        "paths": {
            "behavior": "behavior.json",
            "counts": "counts.csv",
            "joint": "joint.json",
            "pef": "pef.json",
            "qef": "qef.json",
            "grid_certs": "grid_certs",
            "plan": "plan.json",
            "transcript": "transcript.json",
            "checkpoints": "checkpoints.jsonl",
            "outputs": "outputs.bin",
            "certificate": "certificate.json",
            "seed_in": "seed_input.bin",
            "seed_ext": "seed_extractor.bin",
            "extracted": "extracted.bin",
            "extract_report": "extract_report.json",
            "report_csv": "expansion_curve.csv",
        },
        "device": "reference",
        "simulate": {"trials": 1_000_000, "seed": 1},
        "protocol": {
            "q": Q_REF,
            "eps_b": EPS_B_REF,
            "eps_s": 2.0**-32,
            "eps_x": 2.0**-32,
            "gamma": 0.99,
            "gamma_bar": 0.993,
            "k": 512.0,
            "k0": 8.50e7,
        },
        "optimizer": {
            "alphas": [ALPHA_REF],
            "pef_tol": 1e-6,
            "mle_tol": 1e-8,
            "rescale": {
                "mode": "recorded",
                "divisor": QEF_DIVISOR,
                "target_bound": 1.000001,
                "max_cells_per_axis": 4096,
                "fw_tol": 5e-9,
            },
        },
        "plan": {"override": None},
        "run": {
            "device_seed": 7,
            "checkpoint_interval": 100_000,
            "window_bits": 1 << 17,
            "synth_seed_bits": None,
            "synth_seed_rng": None,
        },
        "extract": {"block_length": 1 << 22, "synth_seed_rng": None},
        "report": {"trial_budget": 2.35e11, "stop_trial": 1.80e11},
        "audit": {"samples": 4, "seed": 0, "max_size": 1200},
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; values parse as JSON when they
    can and fall back to plain strings."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ParameterError(f"--set needs dotted.key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ParameterError(f"--set {key}: {part!r} is not a config section")
        node = nxt
    node[parts[-1]] = value


def load_config(path: str | None, sets: list[str] | None = None) -> tuple[dict, str]:
    """Effective config and the base directory artifact paths resolve against."""
    cfg = default_config()
    base = os.getcwd()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ParameterError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ParameterError(f"config file {path}: invalid JSON ({e})")
        if not isinstance(user, dict):
            raise ParameterError(f"config file {path}: expected a JSON object")
        cfg = _deep_merge(cfg, user)
        base = os.path.dirname(os.path.abspath(path))
    for assignment in sets or []:
        _apply_set(cfg, assignment)
    return cfg, base


def _artifact_path(cfg: dict, base: str, name: str) -> str:
    try:
        rel = cfg["paths"][name]
    except KeyError:
        raise ParameterError(f"config: paths.{name} is not set")
    return rel if os.path.isabs(rel) else os.path.join(base, rel)


# --------------------------------------------------- provenance and artifacts


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(cfg: dict, base: str, parameters: dict, inputs: dict) -> dict:
    """Provenance block: tool version, parameter snapshot, input digests.

    ``inputs`` maps a label to an artifact name from ``paths``; digests are of
    the files as they exist now, so a later audit can re-verify the chain.
    """
    digest = {}
    for label, name in inputs.items():
        path = _artifact_path(cfg, base, name)
        if not os.path.exists(path):
            raise ParameterError(f"input artifact missing: {name} ({path})")
        digest[label] = {"path": cfg["paths"][name], "sha256": _sha256_file(path)}
    return {"tool": f"diqre {__version__}", "parameters": parameters, "inputs": digest}


def _write_json(obj: dict, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _read_json(path: str, kind: str | None = None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ParameterError(f"artifact not found: {path}")
    except json.JSONDecodeError as e:
        raise ParameterError(f"artifact {path}: invalid JSON ({e})")
    if kind is not None and obj.get("kind") not in (kind, None):
        raise ParameterError(f"artifact {path}: kind {obj.get('kind')!r}, wanted {kind!r}")
    return obj


def _write_counts(counts: CountTable, path: str, prov: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# provenance " + json.dumps(prov, sort_keys=True) + "\n")
        fh.write(counts.to_csv())


def _read_counts(path: str) -> tuple[CountTable, dict | None]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise ParameterError(f"counts file not found: {path}")
    prov = None
    body = []
    for line in lines:
        if line.startswith("# provenance "):
            prov = json.loads(line[len("# provenance "):])
        elif not line.startswith("#"):
            body.append(line)
    return CountTable.from_csv("".join(body)), prov


def _load_or_synth_seed(path: str, nbits, rng_seed, label: str) -> BitStream:
    """Seed bits come from a file; a missing file may be synthesized once from
    an explicit generator seed, and the synthesized bits are saved so the run
    is reproducible from the artifacts alone."""
    if os.path.exists(path):
        return BitStream.load(path)
    if nbits is None or rng_seed is None:
        raise ParameterError(
            f"{label} seed file missing: {path} (set synth_seed options to"
            " generate one explicitly)"
        )
    bs = BitStream.random(int(nbits), np.random.default_rng(int(rng_seed)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    bs.save(path)
    return bs


# --------------------------------------------------------------------- stages


def _device_model(cfg: dict) -> DeviceModel:
    dev = cfg["device"]
    if dev == "reference":
        return reference_device()
    if isinstance(dev, dict):
        return DeviceModel.from_jsonable(dev)
    raise ParameterError(f"config: device must be 'reference' or a model object, got {dev!r}")


def cmd_simulate(cfg: dict, base: str) -> int:
    sim = cfg["simulate"]
    trials = int(sim["trials"])
    if trials <= 0:
        raise ParameterError(f"simulate: trials must be positive, got {trials}")
    q = float(cfg["protocol"]["q"])
    if not 0.0 < q < 1.0:
        raise ParameterError(f"simulate: q={q!r} outside (0, 1)")
    model = _device_model(cfg)
    behavior = predicted_behavior(model)

    rng = np.random.default_rng(int(sim["seed"]))
    spot = rng.random(trials) >= q
    sel = rng.integers(0, 4, size=trials)
    xs = np.where(spot, 0, sel >> 1).astype(np.int64)
    ys = np.where(spot, 0, sel & 1).astype(np.int64)
    a, b = sample_trials(behavior, xs, ys, rng)
    arr = np.zeros((2, 2, 2, 2), dtype=np.int64)
    np.add.at(arr, (a, b, xs, ys), 1)
    counts = CountTable(arr)

    params = {"trials": trials, "seed": int(sim["seed"]), "q": q,
              "device": model.to_jsonable()}
    prov = _provenance(cfg, base, params, {})
    obj = behavior.to_jsonable()
    obj["provenance"] = prov
    _write_json(obj, _artifact_path(cfg, base, "behavior"))
    _write_counts(counts, _artifact_path(cfg, base, "counts"), prov)

    n00 = int(arr[:, :, 0, 0].sum())
    frac = arr[0, 0, 0, 0] / n00 if n00 else float("nan")
    print(f"simulate: {trials} trials, spot setting (0,0) on {n00}")
    print(f"simulate: empirical P(00|00) = {frac:.5f}, "
          f"predicted {behavior.p[0, 0, 0, 0]:.5f}")
    print(f"simulate: wrote {cfg['paths']['behavior']} and {cfg['paths']['counts']}")
    return 0


def cmd_train(cfg: dict, base: str) -> int:
    q = float(cfg["protocol"]["q"])
    eps_b = float(cfg["protocol"]["eps_b"])
    opt = cfg["optimizer"]
    counts, _ = _read_counts(_artifact_path(cfg, base, "counts"))
    p_hat = counts_to_conditional(counts)
    ideal, lo, hi = build_spot_checking_inputs(q, eps_b)
    nu_hat = mle_project(p_hat, ideal, tol=float(opt["mle_tol"]))

    poly = build_polytope()
    alphas = [str(a) for a in opt["alphas"]]
    scan = scan_alpha(nu_hat, alphas, poly, [lo, hi])
    F = scan.factor
    margin = float(scan.report.margin)

    base_params = {"q": q, "eps_b": eps_b, "alphas": alphas,
                   "mle_tol": float(opt["mle_tol"])}
    prov_in = {"counts": "counts"}
    joint_obj = nu_hat.to_jsonable()
    joint_obj["provenance"] = _provenance(cfg, base, base_params, prov_in)
    _write_json(joint_obj, _artifact_path(cfg, base, "joint"))

    rates = [float(r) for r in scan.rates]
    pef_params = dict(base_params)
    pef_params.update({"rates": [format(r, ".17g") for r in rates],
                       "best_index": int(scan.best_index),
                       "feasibility_margin": format(margin, ".17g")})
    _write_json(F.to_jsonable(provenance=_provenance(cfg, base, pef_params, prov_in)),
                _artifact_path(cfg, base, "pef"))

    rs = opt["rescale"]
    mode = rs["mode"]
    if mode == "recorded":
        # The bound is supplied, certified elsewhere; record its source.
        with mp.workdps(50):
            c = mp.mpf(str(rs["divisor"]))
            qef = EstimationFactor(
                values=tuple(v / c for v in F.values),
                alpha=F.alpha, kind="QEF", rescale_bound=c,
            )
        qef_params = {"bound_source": "recorded", "divisor": str(rs["divisor"])}
        cert_paths: list[str] = []
    elif mode == "grid":
        qef, certs = rescale_to_qef(
            F, (lo, hi),
            target_bound=float(rs["target_bound"]),
            max_cells_per_axis=int(rs["max_cells_per_axis"]),
            fw_tol=float(rs["fw_tol"]),
        )
        cert_dir = _artifact_path(cfg, base, "grid_certs")
        os.makedirs(cert_dir, exist_ok=True)
        cert_paths = []
        for i, cert in enumerate(certs):
            p = os.path.join(cert_dir, f"cert_{i}.json")
            obj = cert.to_jsonable()
            if obj.get("corner_data") == "external":
                # Mesh too large to embed; corner arrays go to a sidecar.
                np.savez_compressed(
                    os.path.join(cert_dir, f"cert_{i}.npz"),
                    corner_lower=cert.corner_lower,
                    corner_upper=cert.corner_upper,
                    active_cells=cert.active_cells,
                )
            _write_json(obj, p)
            cert_paths.append(p)
        qef_params = {"bound_source": "grid",
                      "target_bound": float(rs["target_bound"]),
                      "certificates": [os.path.basename(p) for p in cert_paths]}
    else:
        raise ParameterError(f"optimizer.rescale.mode must be 'recorded' or 'grid', got {mode!r}")

    qef_params.update(base_params)
    _write_json(qef.to_jsonable(provenance=_provenance(cfg, base, qef_params,
                                                       {"counts": "counts", "pef": "pef"})),
                _artifact_path(cfg, base, "qef"))

    r_in = input_entropy_rate(q)
    for al, r in zip(alphas, rates):
        print(f"train: alpha {al}  rate {r:.8f}  net {r - r_in:+.8f}")
    print(f"train: best alpha {alphas[scan.best_index]}, feasibility margin {margin:.3e}")
    print(f"train: QEF bound {mp.nstr(qef.rescale_bound, 24)} ({qef_params['bound_source']})"
          f", rate {qef.rate(nu_hat):.8f}")
    return 0


def cmd_plan(cfg: dict, base: str) -> int:
    P = cfg["protocol"]
    F = EstimationFactor.from_jsonable(_read_json(_artifact_path(cfg, base, "qef")))
    nu = JointDistribution.from_jsonable(
        _read_json(_artifact_path(cfg, base, "joint"), "joint_distribution"))
    override = cfg["plan"].get("override")
    common = dict(q=float(P["q"]), eps_b=float(P["eps_b"]), k=float(P["k"]),
                  k0=float(P["k0"]), eps_s=float(P["eps_s"]), eps_x=float(P["eps_x"]),
                  gamma=float(P["gamma"]), gamma_bar=float(P["gamma_bar"]))
    if override is None:
        plan = plan_expansion(F, nu, **common)
        mode = "appointed"
    else:
        # Explicit (N, h): the soundness statement holds for any threshold, so
        # a hand-sized plan is valid; only the success-probability appointment
        # is bypassed.  This is how desk-scale runs are sized.
        plan = ProtocolPlan(
            alpha=float(F.alpha), F=F,
            r_in=input_entropy_rate(common["q"]), r_nu=F.rate(nu),
            sigma_nu=sigma_nu(F, nu),
            N=int(override["N"]), h=float(override["h"]), **common,
        )
        mode = "overridden"
    obj = plan.to_jsonable()
    obj["provenance"] = _provenance(cfg, base, {"mode": mode, **common},
                                    {"qef": "qef", "joint": "joint"})
    _write_json(obj, _artifact_path(cfg, base, "plan"))
    print(f"plan: mode {mode}, N = {plan.N}, h = {plan.h:.6g}")
    print(f"plan: r_nu = {plan.r_nu:.8f}, r_in = {plan.r_in:.8f}, "
          f"sigma = {plan.sigma_nu:.4f}, viable = {plan.viable}")
    return 0


def cmd_run(cfg: dict, base: str) -> int:
    R = cfg["run"]
    plan = ProtocolPlan.from_jsonable(_read_json(_artifact_path(cfg, base, "plan"),
                                                 "protocol_plan"))
    behavior = ConditionalBehavior.from_jsonable(
        _read_json(_artifact_path(cfg, base, "behavior"), "conditional_behavior"))
    device = SimulatedDevice(behavior, np.random.default_rng(int(R["device_seed"])))
    seed_path = _artifact_path(cfg, base, "seed_in")
    seed = SeedStream(_load_or_synth_seed(seed_path, R["synth_seed_bits"],
                                          R["synth_seed_rng"], "input"))

    ck_path = _artifact_path(cfg, base, "checkpoints")
    os.makedirs(os.path.dirname(os.path.abspath(ck_path)), exist_ok=True)
    if os.path.exists(ck_path):
        os.remove(ck_path)  # checkpoint log appends; start each run clean
    try:
        t = run_expansion(plan, device, seed,
                          checkpoint_interval=int(R["checkpoint_interval"]),
                          checkpoint_path=ck_path,
                          window_bits=int(R["window_bits"]))
    except SeedUnderflowError as e:
        if e.transcript is not None:
            _write_run_artifacts(cfg, base, e.transcript, R)
            print(f"run: seed exhausted at trial {e.transcript.n}; "
                  "partial transcript kept")
        raise
    _write_run_artifacts(cfg, base, t, R)
    print(f"run: stopped at trial {t.n} ({t.stop_reason}), "
          f"log2 accumulator {t.log2_G:.4f}")
    print(f"run: spot trials {t.spot_count}, checking trials {sum(t.check_counts)}, "
          f"input bits consumed {t.inputs_consumed_bits}")
    cert_path = _artifact_path(cfg, base, "certificate")
    if not t.success:
        if os.path.exists(cert_path):
            os.remove(cert_path)  # a stale certificate must not outlive its run
        raise ProtocolFailureError(
            "run: threshold not reached; no certificate (transcript and"
            " outputs kept for the report stage)"
        )
    cert = certify(t, plan)
    obj = cert.to_jsonable()
    obj["provenance"] = _provenance(
        cfg, base, {"device_seed": int(R["device_seed"])},
        {"plan": "plan", "transcript": "transcript"})
    _write_json(obj, cert_path)
    print(f"run: success; certified min-entropy {cert.min_entropy_bound:.4f} bits")
    return 0


def _write_run_artifacts(cfg: dict, base: str, t: ExpansionTranscript, R: dict) -> None:
    obj = t.to_jsonable()
    obj["provenance"] = _provenance(
        cfg, base,
        {"device_seed": int(R["device_seed"]),
         "checkpoint_interval": int(R["checkpoint_interval"]),
         "window_bits": int(R["window_bits"])},
        {"plan": "plan", "behavior": "behavior", "seed_in": "seed_in"})
    _write_json(obj, _artifact_path(cfg, base, "transcript"))
    if t.outputs is not None:
        save_outputs(t, _artifact_path(cfg, base, "outputs"))


def cmd_extract(cfg: dict, base: str) -> int:
    tr_path = _artifact_path(cfg, base, "transcript")
    tobj = _read_json(tr_path, "expansion_transcript")
    t = ExpansionTranscript.from_jsonable(tobj)
    cert_path = _artifact_path(cfg, base, "certificate")
    if not os.path.exists(cert_path):
        raise ProtocolFailureError(
            "extract: no success certificate on file; refusing to extract"
        )
    cobj = _read_json(cert_path, "entropy_certificate")
    cert = EntropyCertificate.from_jsonable(cobj)
    recorded = cobj.get("provenance", {}).get("inputs", {}).get("transcript", {})
    if recorded and recorded.get("sha256") != _sha256_file(tr_path):
        raise ProtocolFailureError(
            "extract: certificate was issued for a different transcript"
        )
    plan = ProtocolPlan.from_jsonable(_read_json(_artifact_path(cfg, base, "plan"),
                                                 "protocol_plan"))
    v = load_outputs(_artifact_path(cfg, base, "outputs"), t.n)
    eps_x = plan.eps_x
    m = output_length(cert.min_entropy_bound, eps_x)
    if m < 1:
        raise ParameterError(
            f"extract: certified entropy {cert.min_entropy_bound:.4f} funds no"
            f" output at eps_x = {eps_x!r}"
        )
    seed_bits = m + len(v) - 1
    seed = _load_or_synth_seed(_artifact_path(cfg, base, "seed_ext"), seed_bits,
                               cfg["extract"]["synth_seed_rng"], "extractor")
    res = extract(v, cert, eps_x, seed, block_length=int(cfg["extract"]["block_length"]))
    res.bits.save(_artifact_path(cfg, base, "extracted"))
    obj = res.to_jsonable()
    obj["kind"] = "extract_report"
    obj["output_sha256"] = res.bits.sha256()
    obj["provenance"] = _provenance(
        cfg, base, {"eps_x": eps_x, "block_length": int(cfg["extract"]["block_length"])},
        {"transcript": "transcript", "certificate": "certificate",
         "outputs": "outputs", "seed_ext": "seed_ext"})
    _write_json(obj, _artifact_path(cfg, base, "extract_report"))
    print(f"extract: {res.spec.m} bits from {res.spec.n}, "
          f"total soundness {res.total_soundness:.3e}")
    print(f"extract: wrote {cfg['paths']['extracted']}")
    return 0


def cmd_report(cfg: dict, base: str, dry_run: bool) -> int:
    P = cfg["protocol"]
    if dry_run:
        # Ledger arithmetic only: no trials, no files.
        N = float(cfg["report"]["trial_budget"])
        n = float(cfg["report"]["stop_trial"])
        if not 0 <= n <= N:
            raise ParameterError(f"report: stop trial {n} outside [0, {N}]")
        r_in = input_entropy_rate(float(P["q"]))
        k, k0 = float(P["k"]), float(P["k0"])
        generated = k0 + k + N * r_in
        consumed = k0 + n * r_in
        print(f"report (dry run): N = {N:.6g}, n_stop = {n:.6g}, "
              f"q = {float(P['q']):.6g}")
        print(f"input entropy rate = {r_in:.16g}")
        print(f"generated_bits = {generated:.10e}")
        print(f"consumed_bits = {consumed:.10e}")
        print(f"net_expansion_bits = {generated - consumed:.10e}")
        return 0

    plan = ProtocolPlan.from_jsonable(_read_json(_artifact_path(cfg, base, "plan"),
                                                 "protocol_plan"))
    t = ExpansionTranscript.from_jsonable(
        _read_json(_artifact_path(cfg, base, "transcript"), "expansion_transcript"))
    curve = net_expansion_curve(t, plan)
    ns = np.array([c[0] for c in t.checkpoints], dtype=np.int64)
    gs = np.array([c[1] for c in t.checkpoints])
    a1 = plan.alpha - 1.0
    witnessed = gs / a1
    consumed = plan.k0 + ns * plan.r_in

    path = _artifact_path(cfg, base, "report_csv")
    prov = _provenance(cfg, base, {"checkpoints": len(ns)},
                       {"plan": "plan", "transcript": "transcript"})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# provenance " + json.dumps(prov, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["n", "log2_G", "witnessed_bits", "consumed_bits",
                    "net_certified_bits", "expected_net_bits"])
        for i in range(len(ns)):
            w.writerow([int(ns[i]), format(gs[i], ".17g"),
                        format(witnessed[i], ".17g"), format(consumed[i], ".17g"),
                        format(curve.net[i], ".17g"), format(curve.expected[i], ".17g")])

    print(f"report: {len(ns)} checkpoints -> {cfg['paths']['report_csv']}")
    if len(ns) >= 2:
        slope_w = float(np.polyfit(ns, witnessed, 1)[0])
        print(f"report: witnessed slope {slope_w:.8f} (r_nu {plan.r_nu:.8f}), "
              f"consumed slope {plan.r_in:.8f} (r_in)")
    if t.success:
        print(f"report: success at n = {t.n}; certified net {curve.net[-1]:.4f} bits")
    else:
        print("report: run failed; no certificate and no extraction, "
              "curve shows accounting only")
    return 0


def _audit_provenance(cfg: dict, base: str, failures: list) -> None:
    names = ["behavior", "joint", "pef", "qef", "plan", "transcript",
             "certificate", "extract_report"]
    checked = 0
    for name in names:
        path = _artifact_path(cfg, base, name)
        if not os.path.exists(path):
            continue
        prov = _read_json(path).get("provenance")
        if not prov:
            continue
        for label, entry in prov.get("inputs", {}).items():
            target = entry["path"]
            tpath = target if os.path.isabs(target) else os.path.join(base, target)
            checked += 1
            if not os.path.exists(tpath):
                failures.append(f"provenance: {name} input {label} missing ({target})")
            elif _sha256_file(tpath) != entry["sha256"]:
                failures.append(f"provenance: {name} input {label} digest mismatch")
    print(f"audit: provenance chain, {checked} input digests checked")


def cmd_audit(cfg: dict, base: str) -> int:
    failures: list[str] = []
    q = float(cfg["protocol"]["q"])
    eps_b = float(cfg["protocol"]["eps_b"])

    _audit_provenance(cfg, base, failures)

    pef_path = _artifact_path(cfg, base, "pef")
    if os.path.exists(pef_path):
        F = EstimationFactor.from_jsonable(_read_json(pef_path))
        _, lo, hi = build_spot_checking_inputs(q, eps_b)
        rep = feasibility_report(F, build_polytope(), [lo, hi])
        print(f"audit: factor feasibility margin {float(rep.margin):.3e}")
        if not rep.feasible:
            failures.append(f"factor infeasible: margin {float(rep.margin):.3e}")
    else:
        print("audit: no factor file, feasibility skipped")

    qef_path = _artifact_path(cfg, base, "qef")
    if os.path.exists(qef_path) and os.path.exists(pef_path):
        F = EstimationFactor.from_jsonable(_read_json(pef_path))
        Q = EstimationFactor.from_jsonable(_read_json(qef_path))
        with mp.workdps(50):
            worst = mp.mpf(0)
            for fv, qv in zip(F.values, Q.values):
                if fv > 0:
                    worst = max(worst, abs(qv * Q.rescale_bound - fv) / fv)
        print(f"audit: QEF values * bound match the factor to {mp.nstr(worst, 3)}")
        if worst > mp.mpf("1e-30"):
            failures.append(f"QEF file is not factor/bound (rel error {mp.nstr(worst, 3)})")

    cert_dir = _artifact_path(cfg, base, "grid_certs")
    if os.path.isdir(cert_dir):
        for fname in sorted(os.listdir(cert_dir)):
            if not fname.endswith(".json"):
                continue
            obj = _read_json(os.path.join(cert_dir, fname))
            arrays = None
            if obj.get("corner_data") == "external":
                sidecar = os.path.join(cert_dir, fname[:-5] + ".npz")
                if not os.path.exists(sidecar):
                    failures.append(f"grid certificate {fname}: sidecar arrays missing")
                    continue
                arrays = dict(np.load(sidecar))
            cert = GridCertificate.from_jsonable(obj, arrays)
            try:
                lower, upper = audit_grid_certificate(cert)
                print(f"audit: grid certificate {fname} rechecked "
                      f"[{lower:.12f}, {upper:.12f}]")
            except AuditError as e:
                failures.append(f"grid certificate {fname}: {e}")

    A = cfg["audit"]
    rng = np.random.default_rng(int(A["seed"]))
    for i in range(int(A["samples"])):
        n = int(rng.integers(2, int(A["max_size"])))
        m = int(rng.integers(1, int(A["max_size"])))
        v = BitStream.random(n, rng)
        seed = BitStream.random(m + n - 1, rng)
        fast = toeplitz_fft(seed, v, m)
        slow = toeplitz_naive(seed, v, m)
        if fast != slow:
            failures.append(f"extractor sample {i}: fft and direct products differ"
                            f" (n={n}, m={m})")
    print(f"audit: {int(A['samples'])} extractor samples against the direct product")

    if failures:
        for f in failures:
            print(f"audit FAILURE: {f}")
        raise AuditError(f"{len(failures)} audit check(s) failed")
    print("audit: all checks passed")
    return 0


# ----------------------------------------------------------------- dispatcher


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diqre",
        description="Randomness-expansion pipeline: simulate, train, plan, "
                    "run, extract, report, audit.",
    )
    p.add_argument("--version", action="version", version=f"diqre {__version__}")
    p.add_argument("-c", "--config", metavar="FILE",
                   help="JSON config; defaults target the reference experiment")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="sets", help="override one config entry (repeatable)")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective config and exit")
    sub = p.add_subparsers(dest="command", metavar="stage")
    sub.add_parser("simulate", help="sample a counts file from the device model")
    sub.add_parser("train", help="counts -> statistics -> factor -> QEF")
    sub.add_parser("plan", help="size the trial budget and success threshold")
    sub.add_parser("run", help="drive the protocol against the simulated device")
    sub.add_parser("extract", help="hash certified outputs to near-uniform bits")
    rep = sub.add_parser("report", help="expansion-curve CSV, or ledger arithmetic")
    rep.add_argument("--dry-run", action="store_true",
                     help="print the ledger at configured scale; no files needed")
    sub.add_parser("audit", help="re-verify feasibility, certificates, provenance")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    stage = args.command
    try:
        cfg, base = load_config(args.config, args.sets)
        if args.dump_config:
            print(json.dumps(cfg, sort_keys=True, indent=1))
            return 0
        if stage is None:
            _build_parser().print_usage(sys.stderr)
            print("diqre: a stage is required (or --dump-config)", file=sys.stderr)
            return 2
        if stage == "simulate":
            return cmd_simulate(cfg, base)
        if stage == "train":
            return cmd_train(cfg, base)
        if stage == "plan":
            return cmd_plan(cfg, base)
        if stage == "run":
            return cmd_run(cfg, base)
        if stage == "extract":
            return cmd_extract(cfg, base)
        if stage == "report":
            return cmd_report(cfg, base, args.dry_run)
        return cmd_audit(cfg, base)
    except (ParameterError, InsufficientDataError) as e:
        print(f"diqre {stage}: {e}", file=sys.stderr)
        return 2
    except InfeasiblePlanError as e:
        print(f"diqre {stage}: {e}", file=sys.stderr)
        return 3
    except (ProtocolFailureError, SeedUnderflowError) as e:
        print(f"diqre {stage}: {e}", file=sys.stderr)
        return 4
    except AuditError as e:
        print(f"diqre {stage}: {e}", file=sys.stderr)
        return 5
    except (OptimizationError, PrecisionError) as e:
        print(f"diqre {stage}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
