"""``splitwire`` command line.

Every command reads a JSON run config (``--config``), lets flags override
it, honours ``SPLITWIRE_SEED``, and echoes the effective config as
``config.json`` into the output directory. Exit codes: 0 success, 2
config/input error, 3 data-integrity error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, compression, container, data, latency
from . import model as model_io
from .attention import ChannelImportance, compute_importance, ranking_stability
from .nn import TrainingDiverged
from .training import evaluate_accuracy, train

log = logging.getLogger("splitwire")

EXIT_CONFIG = 2
EXIT_INTEGRITY = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    n_samples: int = 2400
    class_count: int = 18
    image_size: int = 32
    width: int = 64
    block_count: int = 2
    split_points: list = field(default_factory=lambda: [1])
    ratios: list = field(default_factory=lambda: list(compression.DEFAULT_RATIOS))
    base_epochs: int = 10
    ca_epochs: int = 2
    prune_epochs: int = 2
    fr_epochs: int = 2
    learning_rate: float = 0.01
    finetune_scale: float = 0.1
    batch_size: int = 32
    fr_only: bool = False
    quant_bits: int = 12
    out_dir: str = "run"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        checks = [
            (self.n_samples >= self.class_count >= 2, "n_samples >= class_count >= 2"),
            (self.width >= 4 and self.block_count >= 1, "width >= 4 and block_count >= 1"),
            (all(1 <= l <= self.block_count + 1 for l in self.split_points),
             f"split_points must lie in 1..{self.block_count + 1}"),
            (all(int(r) >= 2 for r in self.ratios), "ratios must be >= 2"),
            (1 <= self.quant_bits <= 16, "quant_bits must be in 1..16"),
            (self.learning_rate > 0 and self.batch_size >= 1, "learning_rate > 0, batch_size >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"invalid config: {msg}")

    def epochs(self) -> compression.EpochsConfig:
        return compression.EpochsConfig(self.ca_epochs, self.prune_epochs, self.fr_epochs,
                                        self.learning_rate, self.finetune_scale,
                                        self.batch_size, self.fr_only)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


# ---- helpers ----------------------------------------------------------------


def load_config(args) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
    for name in ("seed", "out_dir", "fr_only"):
        v = getattr(args, name, None)
        if v is not None and v is not False:
            d[name] = v
    if os.environ.get("SPLITWIRE_SEED"):
        try:
            d["seed"] = int(os.environ["SPLITWIRE_SEED"])
        except ValueError:
            raise ConfigError("SPLITWIRE_SEED must be an integer") from None
    return RunConfig.from_dict(d)


def prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2) + "\n")
    return out


def datasets(cfg: RunConfig):
    ds = data.generate(cfg.seed, cfg.n_samples, cfg.class_count, cfg.image_size)
    return data.train_test_split(ds)


def need_file(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path} not found; {hint}")
    return path


def emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---- commands ---------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args)
    out = prepare_out(cfg)
    train_set, test_set = datasets(cfg)
    base = model_io.build_toy_resnet(cfg.class_count, cfg.width, cfg.block_count, cfg.seed,
                                     cfg.image_size)
    base, history = train(base, train_set, epochs=cfg.base_epochs,
                          learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                          seed=cfg.seed)
    model_io.save(base, out / "base.swml")
    metrics = {"base_accuracy": evaluate_accuracy(base, test_set),
               "base_loss_history": history, "split_points": {}}
    for l in cfg.split_points:
        ca_model, imp = compression.train_ca(base, l, train_set, cfg.epochs(), cfg.seed)
        model_io.save(ca_model, out / f"ca_l{l}.swml")
        (out / f"importance_l{l}.csv").write_text(imp.to_csv())
        metrics["split_points"][str(l)] = {
            "ca_accuracy": evaluate_accuracy(ca_model, test_set),
            "channels": len(imp.importance),
        }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    emit({"base_accuracy": metrics["base_accuracy"]})


def cmd_rank(args):
    cfg = load_config(args)
    out = prepare_out(cfg)
    train_set, _ = datasets(cfg)
    l = args.split_point
    ca_model = model_io.load(need_file(out / f"ca_l{l}.swml", "run `splitwire train` first"))
    imp = compute_importance(ca_model, l, train_set.images)
    (out / f"importance_l{l}.csv").write_text(imp.to_csv())
    rho = ranking_stability(ca_model, l, train_set.images, args.batches, args.batch_size,
                            cfg.seed)
    emit({"split_point": l, "ranking": imp.ranking.tolist(), "min_spearman_rho": rho})


def _results_path(out: Path) -> Path:
    return out / "results.csv"


def cmd_compress(args):
    cfg = load_config(args)
    out = prepare_out(cfg)
    train_set, test_set = datasets(cfg)
    base = model_io.load(need_file(out / "base.swml", "run `splitwire train` first"))
    splits = [args.split_point] if args.split_point is not None else cfg.split_points
    ratios = [args.ratio] if args.ratio is not None else cfg.ratios
    path = _results_path(out)
    rows = compression.read_results(path.read_text()) if path.exists() else []
    failed = []
    for l in splits:
        imp_path = need_file(out / f"importance_l{l}.csv", "run `splitwire train` first")
        imp = ChannelImportance.from_csv(imp_path.read_text())
        if imp.split_point != l:
            raise ConfigError(f"{imp_path} holds split point {imp.split_point}, expected {l}")
        for k in ratios:
            try:
                compression.retained_set(imp, k)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            b = compression.compress_branch(base, imp, k, train_set, test_set, cfg.epochs(),
                                            cfg.seed, cfg.quant_bits)
            if b.error:
                failed.append(b.error)
                continue
            model_io.save(b.ca_pruned, out / f"ca_pruned_l{l}_r{k}.swml")
            model_io.save(b.aecnn, out / f"aecnn_l{l}_r{k}.swml")
            rows = [r for r in rows if (int(r["split_point"]), int(r["ratio"])) != (l, k)]
            rows.append(compression.result_row(l, k, b))
            path.write_text(compression.results_csv(rows))
    emit({"results": str(path), "rows": len(rows), "failed": failed})
    if failed:
        raise TrainingDiverged("; ".join(failed))


def cmd_table(args):
    cfg = load_config(args)
    path = need_file(_results_path(cfg.out), "run `splitwire compress` first")
    rows = compression.read_results(path.read_text())
    print("| l | ratio | CA_Pruned % | AECNN % | retained | bits/elem | total ratio |")
    print("|---|---|---|---|---|---|---|")
    for r in rows:
        total = codec.total_compression_ratio(int(r["ratio"]), float(r["bits_per_element"]))
        print(f"| {r['split_point']} | {r['ratio']} | {r['accuracy_ca_pruned']} | "
              f"{r['accuracy_aecnn']} | {r['retained_shape']} | {r['bits_per_element']} | "
              f"{total:.1f} |")


def _input_image(cfg: RunConfig, args) -> np.ndarray:
    if args.image:
        try:
            x = np.load(args.image)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read image {args.image}: {exc}") from exc
        return np.asarray(x, dtype=np.float64)
    _, test_set = datasets(cfg)
    if not 0 <= args.index < len(test_set):
        raise ConfigError(f"index {args.index} outside test set of {len(test_set)}")
    return test_set.images[args.index]


def _load_compressed(path) -> model_io.ModelSpec:
    m = model_io.load(need_file(Path(path), "pass a model written by `splitwire compress`"))
    if m.compression is None:
        raise ConfigError(f"{path} is not a compressed model")
    return m


def cmd_encode(args):
    cfg = load_config(args)
    m = _load_compressed(args.model)
    x = _input_image(cfg, args)
    cc = m.compression
    h = m.forward_device(cc.split_point, x)
    packet = codec.encode_tensor(h, cc.split_point, cc.ratio, cfg.quant_bits)
    blob = packet.to_bytes()
    Path(args.out).write_bytes(blob)
    emit({"packet": args.out, "bytes": len(blob),
          "bits_per_element": 8 * len(packet.payload) / h.size})


def cmd_decode(args):
    m = _load_compressed(args.model)
    try:
        blob = Path(args.packet).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read packet {args.packet}: {exc}") from exc
    packet = codec.FeaturePacket.from_bytes(blob)
    cc = m.compression
    if packet.header.split_point != cc.split_point or packet.header.ratio != cc.ratio:
        raise codec.CodecError(
            f"packet is for split {packet.header.split_point} ratio {packet.header.ratio}, "
            f"model expects split {cc.split_point} ratio {cc.ratio}")
    logits = m.forward_server(cc.split_point, codec.decode_packet(packet))
    emit({"class": int(np.argmax(logits))})


def _profile_and_table(args):
    try:
        profile = latency.load_profile(args.profile) if args.profile else latency.demo_profile()
        text = Path(args.results).read_text() if args.results else latency.demo_results()
        table = latency.accuracy_table_from_results(text, args.base_accuracy)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot load profile/results: {exc}") from exc
    return profile, table


def cmd_plan(args):
    profile, table = _profile_and_table(args)
    try:
        p = latency.plan(profile, table, args.rate, args.deadline)
    except KeyError as exc:
        raise ConfigError(f"profile incomplete: {exc}") from exc
    emit(p.to_dict())


def cmd_simulate(args):
    profile, table = _profile_and_table(args)
    if args.trace:
        trace = latency.RateTrace.from_csv(Path(args.trace).read_text())
        arrivals = [float(a) for a in args.arrivals.split(",")]
        decisions = sorted(table)
        rows = [{"decision": str(d), "arrival_s": t0, "completion_s": t}
                for d in decisions
                for t0, t in zip(arrivals, latency.simulate_trace(profile, d, trace, arrivals))]
        text = latency.rows_to_csv(rows, ["decision", "arrival_s", "completion_s"])
    else:
        rates = np.geomspace(args.rate_min, args.rate_max, args.rate_count).tolist()
        text = latency.rows_to_csv(latency.sweep(profile, table, rates))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# ---- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitwire", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_cmd(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.set_defaults(func=func)
        return p

    run_cmd("train", cmd_train, "train the base and channel-attention models")
    p = run_cmd("rank", cmd_rank, "recompute channel importance and its stability")
    p.add_argument("--split-point", type=int, default=1)
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=256)
    p = run_cmd("compress", cmd_compress, "prune, add feature recovery, fine-tune")
    p.add_argument("--split-point", type=int)
    p.add_argument("--ratio", type=int)
    p.add_argument("--fr-only", dest="fr_only", action="store_true",
                   help="fine-tune only the feature-recovery layer")
    run_cmd("table", cmd_table, "print the results table")
    p = run_cmd("encode", cmd_encode, "device side: image -> feature packet")
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, default=0, help="test-set image index")
    p.add_argument("--image", help=".npy file holding one [C, H, W] image")
    p.add_argument("--out", required=True)
    p = sub.add_parser("decode", help="server side: feature packet -> class")
    p.add_argument("--model", required=True)
    p.add_argument("--packet", required=True)
    p.set_defaults(func=cmd_decode)

    for name, func, help_ in (("plan", cmd_plan, "choose split point and ratio"),
                              ("simulate", cmd_simulate, "completion time vs rate or trace")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--profile", help="latency profile JSON (default: shipped demo)")
        p.add_argument("--results", help="results CSV (default: shipped demo)")
        p.add_argument("--base-accuracy", type=float,
                       help="add local and full-offload options with this accuracy")
        p.set_defaults(func=func)
        if name == "plan":
            p.add_argument("--rate", type=float, required=True, help="bit/s")
            p.add_argument("--deadline", type=float, required=True, help="seconds")
        else:
            p.add_argument("--trace", help="CSV time_s,rate_bps")
            p.add_argument("--arrivals", default="0", help="comma-separated task arrival times")
            p.add_argument("--rate-min", type=float, default=1e6)
            p.add_argument("--rate-max", type=float, default=1e9)
            p.add_argument("--rate-count", type=int, default=31)
            p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (codec.CodecError, container.ContainerError) as exc:
        print(f"splitwire: data integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingDiverged as exc:
        print(f"splitwire: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"splitwire: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
