"""Command-line workflow: dataset generation, training, rollout
evaluation, spectra, gradient checks, and the error-budget probe.

Every subcommand writes its artifacts under one output directory
(--out, falling back to the TL1_OUT environment variable, then ./out)
and drops a resolved_config.txt there echoing every effective setting,
so any run can be reproduced from that file alone. Exit codes: 0 on
success, 1 on a domain error (solver blow-up, bad data, missing file),
2 on a usage error (bad flags, unknown config keys).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import container, data, dns, evaluate, spectral
from . import model as model_mod
from . import tensor as T
from . import train as train_mod


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


# --- config plumbing --------------------------------------------------------

def resolve_out(out) -> str:
    return out or os.environ.get("TL1_OUT") or "out"


def parse_kv_file(path: str) -> dict:
    """Plain-text key=value lines; blank lines and # comments ignored."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    kv = {}
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{i}: expected key=value, got {line!r}")
            kv[key.strip()] = value.strip()
    return kv


def parse_override(item: str):
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise UsageError(f"override must look like key=value, got {item!r}")
    return key, value


@dataclass
class CommandSpec:
    """One resolved invocation: merged config, output root, seed."""

    subcommand: str
    config: dict
    out: str
    seed: int | None


def command_spec(args) -> CommandSpec:
    merged = {}
    if getattr(args, "config", None):
        merged.update(parse_kv_file(args.config))
    for item in getattr(args, "set", None) or ():
        key, value = parse_override(item)
        merged[key] = value
    out = resolve_out(getattr(args, "out", None))
    return CommandSpec(args.subcommand, merged, out,
                       getattr(args, "seed", None))


def write_resolved_config(out_dir: str, lines) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.txt")
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return path


# --- report emission --------------------------------------------------------

@dataclass
class Report:
    """Column-ordered table; rows hold ints, floats, strings, or None."""

    columns: list
    rows: list


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}" if np.isfinite(v) else ""
    return str(v)


def _json_cell(v):
    if v is None:
        return None
    if isinstance(v, (bool, np.bool_)):
        return 1 if v else 0
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        # reparse the printed form so both formats carry the same value
        return float(f"{float(v):.9g}") if np.isfinite(v) else None
    return str(v)


def emit_report(report: Report, fmt: str, base_path: str) -> list:
    """Write a table as CSV, JSON, or both; returns the paths written.

    Both formats print numbers at 9 significant digits and keep the
    column order, so repeated emissions are byte-identical and the two
    formats mirror each other.
    """
    if fmt not in ("csv", "json", "both"):
        raise UsageError(f"unknown report format {fmt!r}")
    paths = []
    try:
        if fmt in ("csv", "both"):
            lines = [",".join(report.columns)]
            for row in report.rows:
                lines.append(",".join(_csv_cell(v) for v in row))
            path = base_path + ".csv"
            with open(path, "w") as fh:
                fh.write("\n".join(lines) + "\n")
            paths.append(path)
        if fmt in ("json", "both"):
            payload = {"columns": list(report.columns),
                       "rows": [[_json_cell(v) for v in row]
                                for row in report.rows]}
            path = base_path + ".json"
            with open(path, "w") as fh:
                fh.write(json.dumps(payload, separators=(",", ":")) + "\n")
            paths.append(path)
    except OSError as e:
        raise OSError(f"cannot write report {base_path}: {e}") from e
    return paths


def _parse_cell(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_report_csv(path: str) -> Report:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    lines = [line for line in lines if line != ""]
    columns = lines[0].split(",")
    rows = [[_parse_cell(c) for c in line.split(",")] for line in lines[1:]]
    return Report(columns, rows)


def read_report_json(path: str) -> Report:
    with open(path) as fh:
        payload = json.load(fh)
    return Report(payload["columns"], payload["rows"])


# --- shared loading ---------------------------------------------------------

def _load_manifest(path: str) -> data.DatasetManifest:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return data.load_manifest(path)


def _split_trajectory(m: data.DatasetManifest, split: str, position: int):
    indices = m.split(split)
    if not 0 <= position < len(indices):
        raise UsageError(f"split {split!r} has {len(indices)} trajectories, "
                         f"position {position} out of range")
    return dns.load_trajectory_array(m.path(indices[position]))


def _load_stepper(path: str) -> evaluate.NetworkStepper:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return evaluate.NetworkStepper.from_checkpoint(path)


def _solver_step_map(sim: dns.SimConfig):
    """One saved-frame advance: save_every solver steps, raw in, raw out."""
    def advance(w):
        spec = spectral.fft2(spectral.VorticityField(np.asarray(w, float), sim.n))
        for _ in range(sim.save_every):
            spec = dns.step(spec, sim.dt, sim)
        return spectral.ifft2(spec).values
    return advance


# --- subcommands ------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = command_spec(args)
    sim = dns.SimConfig(n=args.n, nu=args.nu, dt=args.dt,
                        forcing=dns.Forcing(
                            "none" if args.regime == "decaying"
                            else "fixed_low_wavenumber",
                            args.forcing_amplitude, args.forcing_wavenumber),
                        save_every=args.save_every)
    os.makedirs(spec.out, exist_ok=True)
    write_resolved_config(spec.out, [
        "subcommand=generate",
        f"data.regime={args.regime}",
        f"data.n={args.n}",
        f"data.trajectories={args.trajectories}",
        f"data.frames={args.frames}",
        f"data.seed={args.seed}",
        f"sim.nu={args.nu!r}",
        f"sim.dt={args.dt!r}",
        f"sim.save_every={args.save_every}",
        f"sim.forcing.amplitude={args.forcing_amplitude!r}",
        f"sim.forcing.wavenumber={args.forcing_wavenumber}",
    ])
    m = data.generate_dataset(args.regime, args.trajectories, args.frames,
                              sim, args.seed, spec.out)
    print(f"wrote {len(m.files)} trajectories under {spec.out} "
          f"(train/val/test = {len(m.train)}/{len(m.val)}/{len(m.test)})")
    return 0


def cmd_train(args) -> int:
    spec = command_spec(args)
    model_kv = {k: v for k, v in spec.config.items() if k.startswith("model.")}
    train_kv = {k: v for k, v in spec.config.items() if k.startswith("train.")}
    unknown = sorted(set(spec.config) - set(model_kv) - set(train_kv))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if spec.seed is not None:
        model_kv["model.seed"] = str(spec.seed)
        train_kv["train.seed"] = str(spec.seed)
    try:
        model_config = model_mod.config_from_kv(model_kv)
        train_config = train_mod.train_config_from_kv(train_kv)
    except ValueError as e:
        raise UsageError(str(e))
    manifest = _load_manifest(args.data)
    write_resolved_config(spec.out, ["subcommand=train", f"data={args.data}"]
                          + model_mod.config_to_lines(model_config)
                          + train_mod.train_config_to_lines(train_config))
    result, log = train_mod.train(model_config, train_config, manifest,
                                  spec.out)
    print(f"steps={result.steps} best_val={result.best_val:.9g} "
          f"final_val={result.final_val:.9g}")
    print(f"checkpoints: {result.best_path} {result.final_path}")
    return 0


def _eval_common_lines(args, m: data.DatasetManifest, k_c: float) -> list:
    return [f"checkpoint={args.checkpoint}",
            f"data={args.data}",
            f"split={args.split}",
            f"trajectory={args.trajectory}",
            f"steps={args.steps}",
            f"k_c={k_c!r}"]


def cmd_eval(args) -> int:
    spec = command_spec(args)
    stepper = _load_stepper(args.checkpoint)
    m = _load_manifest(args.data)
    frames = _split_trajectory(m, args.split, args.trajectory)
    if len(frames) < args.steps + 1:
        raise ValueError(f"trajectory has {len(frames)} frames, "
                         f"need {args.steps + 1} for {args.steps} steps")
    k_c = args.k_c if args.k_c is not None else m.n // 4
    wanted = sorted(set(args.spectrum_steps))
    if any(k < 1 or k > args.steps for k in wanted):
        raise UsageError(f"spectrum steps {wanted} outside 1..{args.steps}")
    write_resolved_config(spec.out, ["subcommand=eval"]
                          + _eval_common_lines(args, m, k_c)
                          + [f"spectrum_steps={','.join(map(str, wanted))}",
                             f"format={args.format}"])
    report = evaluate.evaluate_trajectory(stepper, frames, args.steps, k_c)
    table = Report(columns=evaluate.ROLLOUT_HEADER.split(","),
                   rows=[[int(report.steps[i]), float(report.l2[i]),
                          float(report.rel_l2[i]), float(report.ssim[i]),
                          float(report.eps_high[i])]
                         for i in range(len(report.steps))])
    paths = emit_report(table, args.format, os.path.join(spec.out, "rollout"))
    for step in wanted:
        if step > len(report.steps):
            print(f"warning: rollout stopped at step {len(report.steps)}, "
                  f"no spectrum for step {step}")
            continue
        entry = report.spectra_for(step)
        rows = []
        for i, k in enumerate(entry.gt.k_bins):
            nse = float(entry.nse[i]) if entry.nse_valid[i] else None
            rows.append([int(k), float(entry.pred.density[i]),
                         float(entry.gt.density[i]), nse])
        paths += emit_report(Report(["k", "E_pred", "E_gt", "nse"], rows),
                             args.format,
                             os.path.join(spec.out, f"spectrum_step_{step:03d}"))
    if len(report.steps):
        print(f"mean_rel_l2={float(np.mean(report.rel_l2)):.9g} "
              f"final_ssim={float(report.ssim[-1]):.9g} "
              f"diverged_at={report.diverged_at}")
    print("wrote " + " ".join(paths))
    return 0


def cmd_rollout(args) -> int:
    spec = command_spec(args)
    stepper = _load_stepper(args.checkpoint)
    m = _load_manifest(args.data)
    frames = _split_trajectory(m, args.split, args.trajectory)
    write_resolved_config(spec.out, ["subcommand=rollout"]
                          + _eval_common_lines(args, m, m.n // 4)[:5])
    preds, diverged_at = evaluate.rollout(
        stepper, stepper.normalize(frames[0]), args.steps)
    stack = np.concatenate([frames[:1], preds], axis=0)
    dt_saves = m.sim.dt * m.sim.save_every
    fields = [spectral.VorticityField(stack[i], m.n, time=i * dt_saves)
              for i in range(len(stack))]
    traj = dns.Trajectory(
        frames=fields, dt_between_saves=dt_saves, config=m.sim,
        energy=np.array([spectral.total_energy_from_spectrum(spectral.fft2(f))
                         for f in fields]),
        enstrophy=np.array([spectral.total_enstrophy(f) for f in fields]))
    path = os.path.join(spec.out, "rollout.tl1t")
    dns.save_trajectory(path, traj)
    print(f"wrote {path} ({len(stack)} frames, diverged_at={diverged_at})")
    return 0


def cmd_spectrum(args) -> int:
    spec = command_spec(args)
    if args.input is not None:
        frames = dns.load_trajectory_array(args.input)
        source = f"input={args.input}"
    else:
        if args.data is None:
            raise UsageError("spectrum needs --input or --data")
        m = _load_manifest(args.data)
        frames = _split_trajectory(m, args.split, args.trajectory)
        source = (f"data={args.data}\nsplit={args.split}"
                  f"\ntrajectory={args.trajectory}")
    if not -len(frames) <= args.frame < len(frames):
        raise UsageError(f"frame {args.frame} outside trajectory "
                         f"of {len(frames)} frames")
    field = spectral.VorticityField(frames[args.frame], frames.shape[1])
    curve = spectral.enstrophy_spectrum(field)
    write_resolved_config(spec.out, ["subcommand=spectrum"]
                          + source.split("\n")
                          + [f"frame={args.frame}", f"format={args.format}"])
    rows = [[int(k), float(e)] for k, e in zip(curve.k_bins, curve.density)]
    paths = emit_report(Report(["k", "E_Z"], rows), args.format,
                        os.path.join(spec.out, "spectrum"))
    print("wrote " + " ".join(paths))
    return 0


def cmd_bound_check(args) -> int:
    spec = command_spec(args)
    stepper = _load_stepper(args.checkpoint)
    m = _load_manifest(args.data)
    frames = _split_trajectory(m, args.split, args.trajectory)
    k_c = args.k_c if args.k_c is not None else m.n // 4
    write_resolved_config(spec.out, ["subcommand=bound-check"]
                          + _eval_common_lines(args, m, k_c)
                          + [f"growth_iters={args.growth_iters}",
                             f"seed={args.seed or 0}",
                             f"format={args.format}"])
    check = evaluate.verify_bound(_solver_step_map(m.sim), stepper,
                                  frames[0], k_c, args.steps,
                                  growth_iters=args.growth_iters,
                                  seed=args.seed or 0)
    rows = [[int(check.steps[i]), float(check.measured[i]),
             float(check.bound[i]), bool(check.satisfied[i])]
            for i in range(len(check.steps))]
    paths = emit_report(Report(["step", "measured", "bound", "satisfied"],
                               rows), args.format,
                        os.path.join(spec.out, "bound"))
    probe = evaluate.TheoremProbe.from_check(check)
    probe_path = os.path.join(spec.out, "theorem_probe.txt")
    probe.save(probe_path)
    print("\n".join(probe.lines()))
    print("wrote " + " ".join(paths + [probe_path]))
    return 0


# --- gradient checks --------------------------------------------------------

def _sq(t):
    """Scalar loss with an output-dependent cotangent."""
    return T.mean_all(T.mul(t, t))


def _gradcheck_registry():
    """Per-op scalar-loss closures with freshly drawn inputs."""
    def r(rng, *shape):
        return rng.standard_normal(shape)

    def away_from_kink(a, margin=0.1):
        return a + np.sign(a) * margin

    entries = [
        ("add_broadcast", lambda rng: (
            lambda a, b: T.mean_all(T.add(a, b)), [r(rng, 3, 4), r(rng, 4)])),
        ("sub_broadcast", lambda rng: (
            lambda a, b: T.mean_all(T.sub(a, b)),
            [r(rng, 2, 3, 4), r(rng, 1, 3, 1)])),
        ("mul_broadcast", lambda rng: (
            lambda a, b: T.mean_all(T.mul(a, b)), [r(rng, 3, 4), r(rng, 3, 1)])),
        ("scale", lambda rng: (
            lambda a: T.mean_all(T.scale(a, -1.7)), [r(rng, 3, 4)])),
        ("reshape_transpose", lambda rng: (
            lambda a: _sq(T.transpose(T.reshape(a, (3, 2, 4)), (1, 0, 2))),
            [r(rng, 2, 3, 4)])),
        ("concat", lambda rng: (
            lambda a, b: T.mean_all(T.mul(T.concat([a, b], axis=1),
                                          T.concat([b, a], axis=1))),
            [r(rng, 2, 3), r(rng, 2, 3)])),
        ("sum_axis", lambda rng: (
            lambda a: _sq(T.sum_axis(a, 1)), [r(rng, 2, 3, 4)])),
        ("matmul", lambda rng: (
            lambda a, b: T.mean_all(T.matmul(a, b)),
            [r(rng, 3, 4), r(rng, 4, 5)])),
        ("matmul_batched", lambda rng: (
            lambda a, b: T.mean_all(T.matmul(a, b)),
            [r(rng, 2, 2, 3, 4), r(rng, 1, 2, 4, 3)])),
        ("leaky_relu", lambda rng: (
            lambda a: T.mean_all(T.leaky_relu(a, 0.01)),
            [away_from_kink(r(rng, 4, 5))])),
        ("gelu", lambda rng: (
            lambda a: T.mean_all(T.gelu(a)), [r(rng, 4, 5)])),
        ("softmax", lambda rng: (
            lambda a: _sq(T.softmax(a, -1)), [r(rng, 2, 3, 5)])),
        ("group_norm", lambda rng: (
            lambda x, g, b: _sq(T.group_norm(x, 4, g, b)),
            [r(rng, 2, 8, 3, 3), r(rng, 8), r(rng, 8)])),
        ("group_norm_act", lambda rng: (
            lambda x, g, b: T.mean_all(T.group_norm_act(x, 4, g, b, 0.01)),
            [r(rng, 2, 8, 3, 3),
             away_from_kink(r(rng, 8), 0.5), r(rng, 8)])),
        ("layer_scale_residual", lambda rng: (
            lambda x, f, lam: _sq(T.layer_scale_residual(x, f, lam)),
            [r(rng, 2, 5, 6), r(rng, 2, 5, 6), r(rng, 6)])),
        ("conv3x3", lambda rng: (
            lambda x, w, b: _sq(T.conv2d(x, w, b, padding=1)),
            [r(rng, 2, 3, 6, 6), 0.5 * r(rng, 4, 3, 3, 3), r(rng, 4)])),
        ("conv_contracting", lambda rng: (
            # fewer output than input channels at stride 1
            lambda x, w: _sq(T.conv2d(x, w, padding=1)),
            [r(rng, 2, 6, 6, 6), 0.5 * r(rng, 3, 6, 3, 3)])),
        ("conv_stride2", lambda rng: (
            lambda x, w, b: T.mean_all(T.conv2d(x, w, b, stride=2, padding=1)),
            [r(rng, 1, 3, 7, 7), r(rng, 4, 3, 3, 3), r(rng, 4)])),
        ("conv_dilated", lambda rng: (
            lambda x, w: _sq(T.conv2d(x, w, padding=2, dilation=2)),
            [r(rng, 1, 2, 9, 9), 0.5 * r(rng, 3, 2, 3, 3)])),
        ("conv_grouped", lambda rng: (
            lambda x, w, b: _sq(T.conv2d(x, w, b, padding=1, groups=2)),
            [r(rng, 2, 6, 5, 5), 0.5 * r(rng, 8, 3, 3, 3), r(rng, 8)])),
        ("conv_depthwise", lambda rng: (
            lambda x, w: _sq(T.conv2d(x, w, padding=1, groups=4)),
            [r(rng, 2, 4, 6, 6), 0.5 * r(rng, 4, 1, 3, 3)])),
        ("conv_pointwise", lambda rng: (
            lambda x, w, b: _sq(T.conv2d(x, w, b)),
            [r(rng, 2, 5, 4, 4), r(rng, 3, 5, 1, 1), r(rng, 3)])),
        ("conv_transpose", lambda rng: (
            lambda y, w, b: _sq(T.conv_transpose2d(y, w, b, stride=2)),
            [r(rng, 2, 4, 4, 4), 0.5 * r(rng, 4, 3, 2, 2), r(rng, 3)])),
        ("attention", lambda rng: (
            lambda z, wq, wk, wv, wo: T.mean_all(
                T.multi_head_self_attention(z, wq, wk, wv, wo, 2)),
            [r(rng, 2, 5, 8), 0.5 * r(rng, 2, 8, 4), 0.5 * r(rng, 2, 8, 4),
             0.5 * r(rng, 2, 8, 4), 0.5 * r(rng, 2, 4, 8)])),
    ]
    return entries


GRADCHECK_MODEL_CONFIG = model_mod.ModelConfig(
    variant="full", n_levels=1, strides=(2,), widths=(4, 8),
    hds=model_mod.CoreConfig(n_high_blocks=1, n_mid_blocks=1,
                             n_low_blocks=1, heads=2, mlp_ratio=2),
    groupnorm_groups=4)
GRADCHECK_MODEL_N = 16


def model_grad_check(seed: int, max_coords: int = 6) -> float:
    """End-to-end check through every parameter of a small full model."""
    model = model_mod.Forecaster(GRADCHECK_MODEL_CONFIG, GRADCHECK_MODEL_N)
    params = model.init_params()
    names = [name for name, _, _ in model.specs]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, GRADCHECK_MODEL_N, GRADCHECK_MODEL_N))

    def closure(*ts):
        return _sq(model.forward(dict(zip(names, ts)), x))

    return T.grad_check(closure, [params[n] for n in names],
                        max_coords=max_coords, rng=rng)


def gradient_check_suite(n_seeds: int = 5, include_model: bool = True):
    """Worst relative gradient error per op across seeds.

    Returns (name, error, tolerance) rows; the end-to-end model check
    runs at a looser tolerance than the single ops.
    """
    rows = []
    for name, builder in _gradcheck_registry():
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng(1000 * seed + 17)
            closure, inputs = builder(rng)
            worst = max(worst, T.grad_check(closure, inputs, rng=rng))
        rows.append((name, worst, 1e-4))
    if include_model:
        worst = max(model_grad_check(seed) for seed in range(n_seeds))
        rows.append(("model_full", worst, 1e-3))
    return rows


def cmd_gradcheck(args) -> int:
    spec = command_spec(args)
    write_resolved_config(spec.out, ["subcommand=gradcheck",
                                     f"seeds={args.seeds}",
                                     f"model={int(not args.no_model)}"])
    rows = gradient_check_suite(args.seeds, include_model=not args.no_model)
    failed = 0
    for name, err, tol in rows:
        ok = err < tol
        failed += not ok
        print(f"{'ok' if ok else 'FAIL'} {name} max_rel_err={err:.3g} "
              f"tol={tol:g}")
    print(f"{len(rows) - failed}/{len(rows)} gradient checks passed")
    return 0 if failed == 0 else 1


# --- selftest ---------------------------------------------------------------

def selftest_suite(out_dir: str):
    """Fast internal consistency checks; returns (name, ok, detail) rows."""
    rows = []
    rng = np.random.default_rng(0)

    w = rng.standard_normal((64, 64))
    f = spectral.VorticityField(w, 64)
    coeffs = spectral.fft2(f).coeffs
    lhs = np.sum(w * w) / 64**2
    rhs = np.sum(np.abs(coeffs) ** 2) / 64**4
    err = abs(lhs - rhs) / lhs
    rows.append(("parseval", err < 1e-12, f"rel_err={err:.3g}"))

    z = spectral.total_enstrophy(f)
    tot = spectral.enstrophy_spectrum(f).total()
    err = abs(tot - z) / z
    rows.append(("spectrum_totalizes", err < 1e-6, f"rel_err={err:.3g}"))

    p = spectral.project_high(f, 16.0)
    pp = spectral.project_high(p, 16.0)
    err = float(np.max(np.abs(pp.values - p.values)))
    rows.append(("projection_idempotent", err < 1e-10, f"max_err={err:.3g}"))
    inner = abs(float(np.sum(p.values * (w - p.values)))) / np.sum(w * w)
    rows.append(("projection_orthogonal", inner < 1e-10, f"rel={inner:.3g}"))

    x = rng.standard_normal((32, 32))
    ok = (evaluate.ssim(x, x) == 1.0 and evaluate.relative_l2(x, x) == 0.0
          and evaluate.l2_error(np.ones((2, 2)), np.zeros((2, 2))) == 2.0)
    rows.append(("metric_exactness", ok, "identity and unit cases"))

    ok = (evaluate.theorem_bound(2, 1, 0, 3) == 7.0
          and evaluate.theorem_bound(1.0, 0.01, 0.1, 10) == 0.1 + 10 * 0.01)
    rows.append(("bound_closed_form", ok, "integer and unit-growth cases"))

    params = {"p": np.array([1.0, -2.0, 3.0])}
    grads = {"p": np.array([0.5, -0.25, 1.0])}
    state = train_mod.init_adam_state(params)
    cfg = train_mod.TrainConfig()
    train_mod.adam_step(params, grads, state, 1, cfg)
    want = np.array([1.0, -2.0, 3.0]) - cfg.learning_rate * np.sign(
        [0.5, -0.25, 1.0]) * (np.abs([0.5, -0.25, 1.0])
                              / (np.abs([0.5, -0.25, 1.0]) + cfg.eps))
    err = float(np.max(np.abs(params["p"] - want)))
    rows.append(("adam_first_step", err < 1e-12, f"max_err={err:.3g}"))

    err = T.grad_check(lambda a, b: T.mean_all(T.matmul(a, b)),
                       [rng.standard_normal((3, 4)),
                        rng.standard_normal((4, 2))])
    rows.append(("grad_matmul", err < 1e-7, f"rel_err={err:.3g}"))

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "selftest_container.tl1t")
    arrays = [("a", rng.standard_normal((3, 5)).astype(np.float32)),
              ("b", np.arange(7, dtype=np.float64))]
    container.save_named(path, arrays)
    back = dict(container.load_named(path))
    ok = (np.array_equal(back["a"], np.asarray(arrays[0][1], np.float64))
          and np.array_equal(back["b"].astype(np.float32),
                             arrays[1][1].astype(np.float32)))
    rows.append(("container_roundtrip", ok, path))

    mask = spectral.dealias_mask(8)
    rows.append(("dealias_mask", bool(mask[0, 0]) and not bool(mask[4, 4]),
                 "keeps mean, drops corner"))
    return rows


def cmd_selftest(args) -> int:
    spec = command_spec(args)
    write_resolved_config(spec.out, ["subcommand=selftest"])
    rows = selftest_suite(spec.out)
    failed = 0
    for name, ok, detail in rows:
        failed += not ok
        print(f"{'ok' if ok else 'FAIL'} {name} ({detail})")
    print(f"{len(rows) - failed}/{len(rows)} selftests passed")
    return 0 if failed == 0 else 1


# --- parser -----------------------------------------------------------------

def _add_common(p, seed_default=None):
    p.add_argument("--out", default=None,
                   help="output directory (default: $TL1_OUT or ./out)")
    p.add_argument("--seed", type=int, default=seed_default,
                   help="seed override")


def _add_eval_args(p):
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default="test")
    p.add_argument("--trajectory", type=int, default=0,
                   help="position within the split")
    p.add_argument("--steps", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="turblab",
        description="Desk-scale turbulence forecasting laboratory")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="simulate a dataset")
    p.add_argument("--regime", choices=("decaying", "forced"), required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--trajectories", type=int, default=24)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--nu", type=float, default=1e-4)
    p.add_argument("--dt", type=float, default=1e-2)
    p.add_argument("--save-every", type=int, default=20)
    p.add_argument("--forcing-amplitude", type=float, default=0.1)
    p.add_argument("--forcing-wavenumber", type=int, default=1)
    _add_common(p, seed_default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a forecaster")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--config", default=None,
                   help="key=value file with model.* and train.* entries")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rollout metrics against a reference")
    _add_eval_args(p)
    p.add_argument("--k-c", type=float, default=None,
                   help="high-band cutoff (default n/4)")
    p.add_argument("--spectrum-steps", type=lambda s: [int(v) for v in
                                                       s.split(",") if v],
                   default=[], help="comma-separated steps to emit spectra")
    p.add_argument("--format", choices=("csv", "json", "both"),
                   default="both")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="save predicted frames")
    _add_eval_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("spectrum", help="enstrophy spectrum of one frame")
    p.add_argument("--input", default=None, help="trajectory container")
    p.add_argument("--data", default=None, help="dataset manifest path")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default="test")
    p.add_argument("--trajectory", type=int, default=0)
    p.add_argument("--frame", type=int, default=-1)
    p.add_argument("--format", choices=("csv", "json", "both"),
                   default="both")
    _add_common(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("bound-check", help="empirical error-budget probe")
    _add_eval_args(p)
    p.add_argument("--k-c", type=float, default=None)
    p.add_argument("--growth-iters", type=int, default=100)
    p.add_argument("--format", choices=("csv", "json", "both"),
                   default="both")
    _add_common(p)
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--no-model", action="store_true",
                   help="skip the end-to-end model check")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="fast internal invariant suite")
    _add_common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return int(args.func(args) or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, dns.CFLError,
            train_mod.TrainingAbort) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
