"""Command line entry point: ``rvs {variance,gradcheck,invert,recon}``.

Every command first prints its fully resolved configuration as one JSON line.
Passing that line back through ``--config`` reproduces the run exactly.

Exit codes: 0 success, 1 usage or input error, 2 failed numerical check,
3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from importlib import resources

import jsonschema
import numpy as np

from . import bench, gradcheck, recon
from .fields import (
    Mode,
    RayInterval,
    constant_radiance,
    discretize,
    field_from_dict,
    sinusoid_radiance,
)
from .opacity import build_profile, eval_opacity
from .sampler import UniformScheme, rvs_sample

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_DIVERGED = 0, 1, 2, 3
CSV_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_schema(name: str) -> dict:
    return json.loads(resources.files("rvs").joinpath("schemas", f"{name}.schema.json").read_text())


def _int_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out or any(k < 1 for k in out):
        raise argparse.ArgumentTypeError("every k must be a positive integer")
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# -- scenes from the command line --------------------------------------------


def _radiance_from_dict(spec):
    if spec is None:
        return sinusoid_radiance()
    if spec["kind"] == "constant":
        return constant_radiance(spec["value"])
    return sinusoid_radiance(
        spec.get("offset", 0.5), spec.get("amplitude", 0.4), spec.get("frequency", 1.0), spec.get("phase", 0.0)
    )


def load_scene(name_or_path: str, m: int) -> bench.Scene:
    """A calibrated scene by name (``foggy``, ``wall``) or a scene JSON file."""
    if name_or_path == "foggy":
        return bench.foggy_scene(m)
    if name_or_path == "wall":
        return bench.wall_scene(m)
    try:
        with open(name_or_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read field file: {exc}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"field file is not valid JSON: {exc}")
    try:
        jsonschema.validate(doc, load_schema("field"))
    except jsonschema.ValidationError as exc:
        raise UsageError(f"field file does not match the schema: {exc.message}")
    if "field" not in doc:
        doc = {"field": doc}
    try:
        interval = RayInterval(*doc.get("interval", (0.0, 1.0)))
        field = field_from_dict(doc["field"])
        radiance = _radiance_from_dict(doc.get("radiance"))
    except ValueError as exc:
        raise UsageError(str(exc))
    return bench.Scene(doc.get("name", doc["field"]["kind"]), field, radiance, interval, int(doc.get("m", m)))


# -- output helpers --------------------------------------------------------------


def _emit_config(config: dict):
    print(json.dumps(config, sort_keys=True), flush=True)


def _write_csv(path, kind: str, header: list[str], rows, out):
    buf = io.StringIO()
    buf.write(f"# rvs-{kind} csv v{CSV_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        out.write(buf.getvalue())


def _write_json(path, doc, out):
    text = json.dumps(doc, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        out.write(text + "\n")


# -- commands ---------------------------------------------------------------------

VARIANCE_HEADER = ["field", "estimator", "scheme", "k", "trials", "mean", "variance", "stderr"]


def cmd_variance(cfg: dict, out) -> int:
    names = cfg["field"] or ["foggy", "wall"]
    scenes = [load_scene(n, cfg["m"]) for n in names]
    rows = bench.variance_study(
        scenes,
        ks=cfg["k"],
        trials=cfg["trials"],
        seed=cfg["seed"],
        strata_denominator=cfg["strata"],
        workers=cfg["workers"],
    )
    _write_csv(cfg["out"], "variance", VARIANCE_HEADER, ([getattr(r, h) for h in VARIANCE_HEADER] for r in rows), out)
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out) -> int:
    if cfg["replay"]:
        try:
            with open(cfg["replay"], encoding="utf-8") as fh:
                doc = json.load(fh)
            jsonschema.validate(doc, load_schema("gradcheck_case"))
        except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise UsageError(f"cannot replay case: {exc}")
        case = gradcheck.GradCase.from_dict(doc)
        if case.operation == "implicit_gap":
            result = {"operation": case.operation, "max_rel_err": gradcheck.implicit_gap(case)}
        else:
            analytic, fd, err = gradcheck.evaluate_case(case)
            result = {"operation": case.operation, "max_rel_err": err, "analytic": analytic.ravel().tolist(), "fd": fd.ravel().tolist()}
        _write_json(cfg["out"], result, out)
        return EXIT_OK

    errors, gaps, worst = gradcheck.run_suite(cfg["cases"], cfg["seed"])
    report = {
        "schema_version": 1,
        "seed": cfg["seed"],
        "cases": cfg["cases"],
        "threshold": cfg["threshold"],
        "implicit_threshold": cfg["implicit_threshold"],
    }
    failing = []
    for op, err in errors.items():
        report[f"max_rel_err.{op}"] = err
        if not err < cfg["threshold"]:
            failing.append((err / cfg["threshold"], f"max_rel_err.{op}"))
    for mode, gap in gaps.items():
        report[f"implicit_gap.{mode}"] = gap
        if not gap < cfg["implicit_threshold"]:
            failing.append((gap / cfg["implicit_threshold"], f"implicit_gap.{mode}"))
    report["passed"] = not failing
    if failing:
        key = max(failing)[1]
        with open(cfg["failure_out"], "w", encoding="utf-8") as fh:
            json.dump(worst[key].to_dict(), fh)
        report["failure_case"] = cfg["failure_out"]
    _write_json(cfg["out"], report, out)
    return EXIT_OK if not failing else EXIT_CHECK


def cmd_invert(cfg: dict, out) -> int:
    scene = load_scene(cfg["field"], cfg["m"])
    profile = build_profile(discretize(scene.field, scene.interval, scene.m, cfg["mode"]))
    scheme = UniformScheme(cfg["scheme"], cfg["k"][0], cfg["seed"], cfg["strata"])
    batch = rvs_sample(profile, scheme, cfg["sampling"], jacobian=False)
    rows = zip(batch.uniforms.tolist(), batch.positions.tolist(), eval_opacity(profile, batch.positions).tolist())
    _write_csv(cfg["out"], "invert", ["u", "t", "opacity"], rows, out)
    return EXIT_OK


def _fit_problem(seed: int, mode: Mode, noise: float = 0.3):
    """A known random model, its expected color, and a perturbed starting model.

    ``noise`` is the standard deviation added to the raw density parameters;
    colors get a third of it.
    """
    rng = np.random.default_rng(seed)
    truth = recon.TrainableRayModel.uniform(RayInterval(0.0, 1.0), 17, 1.0, mode=mode)
    truth.density_params[:] = recon.softplus_inverse(rng.uniform(0.2, 3.0, truth.density_params.size))
    truth.radiance_table[:] = rng.uniform(0.1, 0.9, truth.radiance_table.shape)
    start = recon.TrainableRayModel(
        truth.knots,
        truth.density_params + rng.normal(0.0, noise, truth.density_params.size),
        np.clip(truth.radiance_table + rng.normal(0.0, noise / 3, truth.radiance_table.shape), 0.0, 1.0),
        mode,
    )
    return recon.render_expected(truth), start


def cmd_recon(cfg: dict, out) -> int:
    steps = cfg["steps"]
    try:
        if cfg["task"] == "fit":
            target, model = _fit_problem(cfg["seed"], Mode(cfg["mode"]), cfg["init_noise"])
            if cfg["target"] is not None:
                target = np.asarray(cfg["target"], dtype=np.float64)
                if target.shape != (3,) or np.any((target < 0) | (target > 1)):
                    raise UsageError("--target needs three values in [0, 1]")
            trace = recon.fit_ray(
                target, model, k=cfg["k"][0], steps=steps, lr=cfg["lr"], loss=cfg["loss"], seed=cfg["seed"], scheme=cfg["scheme"], sampling=cfg["sampling"]
            )
            final = recon.render_expected(model)
            doc = {
                "schema_version": 1,
                "task": "fit",
                "steps": steps,
                "final_loss": float(trace[-1]),
                "final_mse": float(np.mean((final - target) ** 2)),
                "sampling": cfg["sampling"],
                "loss": cfg["loss"],
                "mode": model.mode.value,
                "knots": model.knots.tolist(),
                "densities": model.densities().tolist(),
                "radiance": model.colors().tolist(),
                "target": target.tolist(),
            }
        else:
            if cfg["sampling"] == "bisect":
                raise UsageError("hierarchical training samples with --sampling rvs or nerf")
            if cfg["loss"] != "mse":
                raise UsageError("hierarchical training uses --loss mse")
            scene = recon.wall_recon_scene() if cfg["field"] == "wall" else recon.bump_recon_scene()
            toy = recon.make_toy(scene, sampling=cfg["sampling"], n_fine=cfg["k"][0], n_proposal=cfg["n_proposal"])
            trace = recon.train_hierarchical(toy, scene, steps=steps, seed=cfg["seed"])
            doc = {
                "schema_version": 1,
                "task": "hierarchical",
                "steps": steps,
                "final_loss": float(trace[-1]),
                "final_mse": recon.evaluate_mse(toy, scene),
                "sampling": toy.sampling.value,
                "loss": "mse",
                "mode": toy.fine.mode.value,
                "knots": toy.fine.knots.tolist(),
                "densities": toy.fine.densities().tolist(),
                "radiance": toy.fine.colors().tolist(),
                "proposal_knots": toy.proposal.knots.tolist(),
                "proposal_densities": toy.proposal.densities().tolist(),
            }
            if scene.name == "Wall":
                doc["wall_sample_fraction"] = recon.wall_sample_fraction(toy, scene)
    except recon.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_csv(cfg["out"], "recon", ["step", "loss"], enumerate(trace.tolist()), out)
    if cfg["model_out"]:
        _write_json(cfg["model_out"], doc, out)
    else:
        print(f"final_mse={doc['final_mse']!r} sampling={doc['sampling']} loss={doc['loss']}", file=sys.stderr)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rvs", description="Reparameterized volume sampling experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, k_default):
        p.add_argument("--k", type=_int_list, default=k_default, help="comma-separated sample counts")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        p.add_argument("--config", default=None, help="JSON config line printed by an earlier run; replaces all other options")

    p = sub.add_parser("variance", help="estimator variance against k (CSV)")
    common(p, list(bench.DEFAULT_KS))
    p.add_argument("--field", action="append", default=None, help="'foggy', 'wall' or a scene JSON file; repeatable (default: foggy and wall)")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--m", type=int, default=2048, help="grid bins used to discretize the field")
    p.add_argument("--strata", choices=["k", "k_plus_1"], default="k", help="stratum denominator of stratified uniforms")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite (JSON report)")
    common(p, [gradcheck._K])
    p.add_argument("--cases", type=int, default=200, help="random cases per operation")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--implicit-threshold", type=float, default=1e-6)
    p.add_argument("--failure-out", default="gradcheck_failure.json", help="where the worst failing case is written")
    p.add_argument("--replay", default=None, help="re-evaluate one serialized case")

    p = sub.add_parser("invert", help="draw ray samples from a field (CSV of u, t, opacity)")
    common(p, [16])
    p.add_argument("--field", default="wall")
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--mode", choices=["constant", "linear"], default="constant")
    p.add_argument("--sampling", choices=["rvs", "nerf", "bisect"], default="rvs")
    p.add_argument("--scheme", choices=["iid", "stratified"], default="stratified")
    p.add_argument("--strata", choices=["k", "k_plus_1"], default="k_plus_1")

    p = sub.add_parser("recon", help="optimization demos (CSV loss trace, JSON model)")
    common(p, [8])
    p.add_argument("--task", choices=["fit", "hierarchical"], default="hierarchical")
    p.add_argument("--field", choices=["wall", "bumps"], default="wall", help="hierarchical scene")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--loss", choices=["mse", "two_sample"], default="mse")
    p.add_argument("--sampling", choices=["rvs", "nerf", "bisect"], default="rvs")
    p.add_argument("--scheme", choices=["iid", "stratified"], default="stratified")
    p.add_argument("--mode", choices=["constant", "linear"], default="constant", help="density mode of the fitted ray (fit task)")
    p.add_argument("--lr", type=float, default=None, help="learning rate override (fit task)")
    p.add_argument("--target", type=_float_list, default=None, help="target RGB (fit task)")
    p.add_argument("--init-noise", type=float, default=0.3, help="perturbation of the starting model (fit task)")
    p.add_argument("--n-proposal", type=int, default=8, help="proposal knots per ray (hierarchical task)")
    p.add_argument("--model-out", default=None, help="JSON file for the final model")
    return parser


def _validate(cfg: dict):
    command = cfg["command"]
    if command == "variance" and cfg["trials"] < 2:
        raise UsageError("--trials must be at least 2")
    if command in ("variance", "invert") and cfg["m"] < 1:
        raise UsageError("--m must be positive")
    if command == "gradcheck" and cfg["cases"] < 1:
        raise UsageError("--cases must be positive")
    if command == "recon" and cfg["steps"] < 1:
        raise UsageError("--steps must be positive")
    if command == "recon" and cfg["init_noise"] < 0:
        raise UsageError("--init-noise must be non-negative")
    if command == "recon" and cfg["n_proposal"] < 2:
        raise UsageError("--n-proposal must be at least 2")
    if command == "variance" and cfg["workers"] < 1:
        raise UsageError("--workers must be positive")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = vars(args)
    config_text = cfg.pop("config")
    if config_text is not None:
        try:
            loaded = json.loads(config_text)
        except json.JSONDecodeError as exc:
            print(f"rvs: error: --config is not valid JSON: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if not isinstance(loaded, dict) or loaded.get("command") != cfg["command"] or set(loaded) != set(cfg):
            print("rvs: error: --config does not match this command's options", file=sys.stderr)
            return EXIT_USAGE
        cfg = loaded
    try:
        _validate(cfg)
        _emit_config(cfg)
        handler = {"variance": cmd_variance, "gradcheck": cmd_gradcheck, "invert": cmd_invert, "recon": cmd_recon}[cfg["command"]]
        return handler(cfg, sys.stdout)
    except UsageError as exc:
        print(f"rvs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
