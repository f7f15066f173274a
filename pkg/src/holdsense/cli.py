"""Command-line front end: synth, enroll, identify, evaluate, attack.

Exit codes: 0 ok / identified, 2 usage or input error, 3 unknown holder,
4 jamming detected, 5 internal error.
"""

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from holdsense import __version__, classify, dsp, evalharness, simchan
from holdsense.errors import HoldsenseError, ParameterError, SegmentationError
from holdsense.classify import NEGATIVE_LABEL
from holdsense.pipeline import Pipeline, enroll, merge, negative_cohort, simulate_dataset, subseed
from holdsense.selection import LabeledFeatures
from holdsense.signal import SignalSpec
from holdsense.wavio import read_wav, write_wav

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_UNKNOWN = 3
EXIT_JAMMING = 4
EXIT_INTERNAL = 5

OUTPUT_ENV = "HOLDSENSE_OUTPUT_DIR"


@dataclass
class ExperimentConfig:
    device: str = "note5"
    environment: str = "office"
    cohort_size: int = 20
    sequences: int = 40
    n_chirps: int = 10
    classifier: str = "lda"
    selection_threshold: float = 0.5
    confidence_threshold: float = classify.DEFAULT_CONFIDENCE
    jam_threshold_db: float = dsp.DEFAULT_JAM_THRESHOLD_DB
    validation: str = "kfold"
    folds: int = 10
    nchirp: list = field(default_factory=list)
    takes: int = 1
    attack: str = "replay"
    impersonation_mode: str = "uninformed"
    attackers: int = 20
    attempts: int = 10
    trials: int = 90
    eavesdrop_m: float = 0.2
    replay_m: float = 0.2
    jam_power_db: float = 0.0
    jam_distance_m: float = 0.2
    seed: int = None
    output_dir: str = None

    def validate(self):
        if self.seed is None:
            raise ParameterError("a seed is required (config file or --seed)")
        simchan.get_device(self.device)
        simchan.get_environment(self.environment)
        if self.cohort_size < 1:
            raise ParameterError("cohort_size must be at least 1")
        if self.n_chirps < 1 or self.sequences < 1 or self.takes < 1:
            raise ParameterError("n_chirps, sequences and takes must be at least 1")
        if self.classifier not in ("lda", "svm"):
            raise ParameterError(f"unknown classifier {self.classifier!r}")
        if self.validation not in ("kfold", "holdout"):
            raise ParameterError(f"unknown validation mode {self.validation!r}")
        if not 0 < self.confidence_threshold < 1:
            raise ParameterError("confidence_threshold must lie in (0, 1)")
        return self

    @property
    def out(self):
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "holdsense-out")

    def pipeline(self):
        return Pipeline(SignalSpec(n_chirps=self.n_chirps))

    def echo(self):
        return {"preset": self.device, "environment": self.environment,
                "n_chirps": self.n_chirps, "kind": self.classifier, "seed": self.seed}


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def load_config(path):
    """Read a JSON config; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParameterError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ParameterError(f"unknown config keys: {unknown}")
    return raw


def build_config(args):
    """Layers, later winning: a synth manifest's config (enroll only), the
    config file, then command-line flags."""
    values = {}
    if getattr(args, "manifest", None):
        try:
            saved = json.loads(Path(args.manifest).read_text(encoding="utf-8"))["config"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ParameterError(f"cannot read manifest {args.manifest}: {exc}") from exc
        values.update({k: v for k, v in saved.items() if k in _FIELDS and k != "output_dir"})
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return ExperimentConfig(**values).validate()


# --------------------------------------------------------------------------
# Commands


def _cohort(cfg):
    return simchan.make_hand_cohort(cfg.cohort_size, subseed(cfg.seed, "cohort"))


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(cfg, args):
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    pipe = cfg.pipeline()
    device = simchan.get_device(cfg.device)
    env = simchan.get_environment(cfg.environment)
    fs = pipe.spec.sample_rate
    write_wav(out / "transmit.wav", pipe.transmit.samples, fs)
    entries = [{"file": "transmit.wav", "kind": "transmit", "seed": cfg.seed,
                "n_chirps": cfg.n_chirps}]
    trial_seed = subseed(cfg.seed, "trials")
    for u, hand in enumerate(_cohort(cfg)):
        for t in range(cfg.takes):
            name = f"{hand.user_id}.wav" if cfg.takes == 1 else f"{hand.user_id}_t{t:02d}.wav"
            seed = subseed(trial_seed, "trial", u, t)
            rec = simchan.simulate_hold(pipe.transmit, hand, device, env, seed)
            clipped = write_wav(out / name, rec.samples, fs)
            entries.append({"file": name, "kind": "recording", "user": hand.user_id,
                            "take": t, "seed": seed, "clipped": clipped})
    _write_json(out / "manifest.json", {
        "config": dataclasses.asdict(cfg) | {"output_dir": None},
        "artifacts": entries,
    })
    print(f"wrote {len(entries)} WAV files and manifest.json to {out}")
    return EXIT_OK


def _inputs_from_args(args):
    """(path, label) pairs from a manifest or from explicit files and labels."""
    if args.manifest:
        root = Path(args.manifest).parent
        try:
            manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            return [(root / a["file"], a["user"]) for a in manifest["artifacts"]
                    if a["kind"] == "recording"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ParameterError(f"malformed manifest {args.manifest}: {exc}") from exc
    if not args.recordings:
        raise ParameterError("give recordings with --labels, or a --manifest")
    if len(args.labels or []) != len(args.recordings):
        raise ParameterError("one --labels entry per recording is required")
    return list(zip(map(Path, args.recordings), args.labels))


def _enrolment_rows(blocks, labels):
    """One averaged row per recording, matching how holds are identified. A
    label with a single recording cannot be trained on that way, so then every
    located chirp becomes its own row."""
    takes = {lab: labels.count(lab) for lab in labels}
    if min(takes.values()) >= 2:
        return LabeledFeatures(np.vstack([b.mean(axis=0) for b in blocks]), np.array(labels))
    single = sorted(lab for lab, n in takes.items() if n == 1)
    print(f"note: {len(single)} label(s) have one recording; enrolling per chirp. "
          "Several takes per user (synth --takes) generalize much better.", file=sys.stderr)
    return LabeledFeatures(np.vstack(blocks),
                           np.concatenate([[lab] * len(b) for b, lab in zip(blocks, labels)]))


def cmd_enroll(cfg, args):
    pipe = cfg.pipeline()
    pairs = _inputs_from_args(args)
    users = sorted({label for _, label in pairs})
    if len(users) < 2 and not args.negative_cohort:
        raise ParameterError(
            "enrollment needs recordings from at least two users, or one user plus "
            "--negative-cohort: other holders serve as the negative labels")
    blocks, labels, failures = [], [], []
    for path, label in pairs:
        samples, fs = read_wav(path)
        try:
            blocks.append(pipe.segment_features(simchan.Recording(samples, fs)))
            labels.append(label)
        except SegmentationError as exc:
            failures.append(f"{path}: {exc}")
    if failures:
        for line in failures:
            print(f"segmentation failure: {line}", file=sys.stderr)
        raise ParameterError(f"enrollment aborted: {len(failures)} file(s) failed segmentation")
    data = _enrolment_rows(blocks, labels)
    device = simchan.get_device(cfg.device)
    env = simchan.get_environment(cfg.environment)
    selection_data = None
    if args.negative_cohort:
        hands = negative_cohort(device, env, pipe, cfg.seed, per_hand=True)
        selection_data = merge(data, hands)
        data = merge(data, LabeledFeatures(hands.X, np.full(hands.y.size, NEGATIVE_LABEL)))
    model = enroll(data, cfg.classifier, cfg.selection_threshold, cfg.confidence_threshold,
                   selection_data)
    hands = simchan.make_hand_cohort(5, subseed(cfg.seed, "jam-hands"))
    baseline = evalharness.calibrate_jamming(pipe, device, cfg.seed, hands)
    path = Path(args.profile) if args.profile else cfg.out / "profile.echl"
    path.parent.mkdir(parents=True, exist_ok=True)
    classify.save_profile(model, path, {
        "n_chirps": cfg.n_chirps, "device": cfg.device, "environment": cfg.environment,
        "seed": cfg.seed, "jam_baseline_db": baseline, "jam_threshold_db": cfg.jam_threshold_db,
        "users": users})
    print(f"enrolled {len(users)} user(s), {model.mask.n_selected} features -> {path}")
    return EXIT_OK


def cmd_identify(args):
    model = classify.load_profile(args.profile)
    meta = model.metadata
    pipe = Pipeline(SignalSpec(n_chirps=int(meta.get("n_chirps", 10))))
    samples, fs = read_wav(args.recording)
    rec = simchan.Recording(samples, fs)
    threshold_db = args.jam_threshold_db
    if threshold_db is None:
        threshold_db = float(meta.get("jam_threshold_db", dsp.DEFAULT_JAM_THRESHOLD_DB))
    jam = dsp.detect_jamming(rec, pipe.template, threshold_db, meta.get("jam_baseline_db"),
                             pipe.spec.gap_len)
    if jam.detected:
        print(f"JAMMING band_energy_db={jam.band_energy_db:.2f} "
              f"threshold_db={jam.threshold_db:.2f}")
        return EXIT_JAMMING
    x = pipe.segment_features(rec).mean(axis=0)
    if args.confidence_threshold is not None:
        model = model.with_threshold(args.confidence_threshold)
    decision = classify.verify(model, x)
    if decision.identified:
        print(f"{decision.outcome} confidence={decision.confidence:.4f}")
        return EXIT_OK
    print(f"{classify.UNKNOWN} confidence={decision.confidence:.4f} "
          f"nearest={decision.predicted} typical={str(decision.typical).lower()}")
    return EXIT_UNKNOWN


def _dataset(cfg, pipe=None):
    pipe = pipe or cfg.pipeline()
    return simulate_dataset(_cohort(cfg), simchan.get_device(cfg.device),
                            simchan.get_environment(cfg.environment), pipe, cfg.sequences,
                            subseed(cfg.seed, "trials"))


def cmd_evaluate(cfg, args):
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    data = _dataset(cfg)
    run = evalharness.kfold if cfg.validation == "kfold" else evalharness.holdout
    kw = {"k": cfg.folds} if cfg.validation == "kfold" else {}
    report = run(data, seed=subseed(cfg.seed, "folds"), kind=cfg.classifier,
                 selection_threshold=cfg.selection_threshold,
                 confidence_threshold=cfg.confidence_threshold, config=cfg.echo(), **kw)
    evalharness.write_csv(out / "report.csv", report.rows())
    summary = report.summary()
    if cfg.nchirp:
        acc = evalharness.nchirp_study(_cohort(cfg), simchan.get_device(cfg.device),
                                       simchan.get_environment(cfg.environment), cfg.nchirp,
                                       cfg.seed, cfg.classifier, cfg.sequences, cfg.folds)
        evalharness.write_csv(out / "nchirp.csv",
                              [{"n_chirps": n, "accuracy": f"{a:.6f}"} for n, a in acc.items()])
        summary += "".join(f"n_chirps={n} accuracy={a:.4f}\n" for n, a in acc.items())
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def cmd_attack(cfg, args):
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    data = _dataset(cfg)
    model = enroll(data, cfg.classifier, cfg.selection_threshold, cfg.confidence_threshold)
    spec = evalharness.AttackSpec(
        cfg.attack, mode=cfg.impersonation_mode, attackers=cfg.attackers,
        attempts=cfg.attempts, eavesdrop_m=cfg.eavesdrop_m, replay_m=cfg.replay_m,
        trials=cfg.trials, power_db=cfg.jam_power_db, distance_m=cfg.jam_distance_m,
        threshold_db=cfg.jam_threshold_db)
    report = evalharness.run_attack_suite(
        model, _cohort(cfg), spec, subseed(cfg.seed, "attack"),
        simchan.get_device(cfg.device), simchan.get_environment(cfg.environment),
        cfg.pipeline())
    rows = [dict(r, **{k: v for k, v in cfg.echo().items()}) for r in report.rows()]
    evalharness.write_csv(out / f"attack_{cfg.attack}.csv", rows)
    if report.roc is not None:
        evalharness.write_roc(out / f"roc_{cfg.attack}.dat", report.roc)
    lines = [f"{k}: {v}" for k, v in rows[0].items()]
    summary = "\n".join(lines) + "\n"
    (out / f"attack_{cfg.attack}.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing


def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _experiment_flags(p):
    g = p.add_argument_group("experiment (flags override the config file)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--seed", type=int, help="master seed; every random stream derives from it")
    g.add_argument("--device", help="device preset: note5, nexus5 or taba")
    g.add_argument("--environment", help="environment preset: office or public")
    g.add_argument("--cohort-size", dest="cohort_size", type=int, help="number of users")
    g.add_argument("--sequences", type=int, help="simulated holds per user")
    g.add_argument("--n-chirps", dest="n_chirps", type=int, help="chirps per transmission")
    g.add_argument("--classifier", choices=("lda", "svm"))
    g.add_argument("--selection-threshold", dest="selection_threshold", type=float,
                   help="keep features whose intra/inter distance ratio is below this")
    g.add_argument("--confidence-threshold", dest="confidence_threshold", type=float,
                   help="minimum top-class probability for an identification")
    g.add_argument("--jam-threshold-db", dest="jam_threshold_db", type=float,
                   help="gap-energy excess over the clean baseline that flags jamming")
    g.add_argument("--output-dir", dest="output_dir",
                   help=f"output directory (default: ${OUTPUT_ENV} or ./holdsense-out)")


def make_parser():
    parser = argparse.ArgumentParser(prog="holdsense", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"holdsense {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the transmit WAV, per-user recordings and a manifest")
    _experiment_flags(p)
    p.add_argument("--takes", type=int, help="recordings per user (default 1)")

    p = sub.add_parser("enroll", help="build an ECHL profile from labelled recordings")
    _experiment_flags(p)
    p.add_argument("recordings", nargs="*", help="WAV files")
    p.add_argument("--labels", nargs="+", help="one user label per WAV file")
    p.add_argument("--manifest", help="manifest.json from synth (labels taken from it)")
    p.add_argument("--negative-cohort", dest="negative_cohort", action="store_true",
                   help="add the bundled anonymous negative cohort")
    p.add_argument("--profile", help="profile path (default: OUTPUT_DIR/profile.echl)")

    p = sub.add_parser("identify", help="identify the holder in one recording")
    p.add_argument("recording", help="WAV file")
    p.add_argument("--profile", required=True, help="ECHL profile file")
    p.add_argument("--confidence-threshold", dest="confidence_threshold", type=float)
    p.add_argument("--jam-threshold-db", dest="jam_threshold_db", type=float)

    p = sub.add_parser("evaluate", help="cross-validated identification report")
    _experiment_flags(p)
    p.add_argument("--validation", choices=("kfold", "holdout"))
    p.add_argument("--folds", type=int, help="k for k-fold (default 10)")
    p.add_argument("--nchirp", type=_csv_ints, help="also run the chirp-count study, e.g. 1,3,5,10")

    p = sub.add_parser("attack", help="run an attack scenario against an enrolled cohort")
    _experiment_flags(p)
    p.add_argument("--attack", choices=("impersonation", "replay", "jamming"))
    p.add_argument("--impersonation-mode", dest="impersonation_mode",
                   choices=("informed", "uninformed"))
    p.add_argument("--attackers", type=int)
    p.add_argument("--attempts", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--eavesdrop-m", dest="eavesdrop_m", type=float)
    p.add_argument("--replay-m", dest="replay_m", type=float)
    p.add_argument("--jam-power-db", dest="jam_power_db", type=float)
    p.add_argument("--jam-distance-m", dest="jam_distance_m", type=float)
    return parser


_COMMANDS = {"synth": cmd_synth, "enroll": cmd_enroll, "evaluate": cmd_evaluate,
             "attack": cmd_attack}


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.command == "identify":
            return cmd_identify(args)
        cfg = build_config(args)
        return _COMMANDS[args.command](cfg, args)
    except (HoldsenseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
