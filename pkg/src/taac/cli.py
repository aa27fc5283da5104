"""``taac`` command line: one subcommand per pipeline stage.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
``TAAC_SEED`` overrides the configured seed; an explicit ``--seed`` wins over
both. Every command records its resolved configuration, seed and the package
version next to what it writes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import PHASE_GATE, Vpm, VpmConfig, decide, gate, write_decisions
from .config import RunConfig, load_config
from .encryptor import SecretKey, decrypt, encrypt, read_key, write_sidecar
from .errors import TaacError
from .evaluator import (SWEEP_THRESHOLDS, SpectralEnvelope, calibrate_threshold, cosine_scores,
                        detection_report, linkage_attack, make_pairs, recon_stats, write_confusion_csvs,
                        write_pair_scores)
from .nn_core import load_checkpoint
from .sdae import FeaturePair, Sdae, SdaeConfig, relative_recon_error
from .signal_prep import RawRecording, preprocess_recording, read_annotations, read_audio
from .synthdata import CorpusConfig, gen_corpus, generate, load_corpus, read_clip, split_corpus, write_clip
from .trainer import DpConfig, PhaseConfig, phase_inputs, train_phase1, train_phase2, train_phase3


class UsageError(Exception):
    pass


# flag name -> (section, key)
FLAG_MAP = {
    "phase": ("phase", "phase"),
    "epochs": ("phase", "epochs"),
    "batch_size": ("phase", "batch_size"),
    "threshold": ("phase", "threshold"),
    "lr": ("optimizer", "lr"),
    "sdae_lr": ("optimizer", "sdae_lr"),
    "weight_decay": ("optimizer", "weight_decay"),
    "clip_norm": ("dp", "clip_norm"),
    "noise_multiplier": ("dp", "noise_multiplier"),
    "key": ("encryption", "key"),
    "strength": ("encryption", "strength"),
    "corpus": ("data", "corpus"),
    "split": ("data", "split"),
}


def resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, (section, key) in FLAG_MAP.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg.set(section, key, v, f"--{flag.replace('_', '-')}")
    if getattr(args, "dp", False):
        cfg.dp.enabled = True
    env = os.environ.get("TAAC_SEED")
    if env is not None:
        try:
            cfg.data.seed = int(env)
        except ValueError:
            raise UsageError(f"TAAC_SEED must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
    return cfg


def run_record(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    rec = {"command": command, "config": cfg.to_dict(), "seed": cfg.data.seed, "version": __version__}
    rec.update(extra or {})
    return rec


def write_run(out_dir, cfg: RunConfig, command: str, extra: dict | None = None):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "run.json").write_text(json.dumps(run_record(cfg, command, extra), indent=1, sort_keys=True))


def write_report(out_dir, report: dict):
    Path(out_dir, "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default))
    print(json.dumps(report, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


def _key(cfg: RunConfig) -> SecretKey:
    if not cfg.encryption.key:
        raise UsageError("this command needs --key")
    return read_key(cfg.encryption.key)


def _strength(cfg: RunConfig) -> int:
    if cfg.encryption.strength is None:
        raise UsageError("this command needs --strength")
    return cfg.encryption.strength


def _corpus(cfg: RunConfig):
    if cfg.data.corpus:
        return load_corpus(cfg.data.corpus)
    return generate(CorpusConfig())


def _split(man, cfg: RunConfig):
    splits = split_corpus(man, max(cfg.data.n_splits, cfg.data.split + 1), 0)
    return splits[cfg.data.split]


def _phase_config(cfg: RunConfig, phase: int, key=None, strength=None) -> PhaseConfig:
    p, o = cfg.phase, cfg.optimizer
    return PhaseConfig(phase=phase, lambda_ortho=p.lambda_ortho, lambda_recon=p.lambda_recon,
                       lambda_cls=p.lambda_cls, lr=o.lr, sdae_lr=o.sdae_lr, weight_decay=o.weight_decay,
                       batch_size=p.batch_size, epochs=p.epochs, seed=cfg.data.seed,
                       label_smoothing=p.label_smoothing, key=key, strength=strength, warm_start=p.warm_start)


def _models(L: int, cfg: RunConfig):
    return (Sdae(SdaeConfig(L=L), seed=cfg.data.seed),
            Vpm(VpmConfig(L=L, threshold=cfg.phase.threshold), seed=cfg.data.seed))


def _load_models(path, L: int, cfg: RunConfig):
    state, meta = load_checkpoint(path)
    sdae, vpm = _models(L, cfg)
    sdae.load_state_dict(state)
    vpm.load_state_dict(state)
    return sdae, vpm, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    seed = cfg.data.seed if (args.seed is not None or "TAAC_SEED" in os.environ) else CorpusConfig.seed
    cc = CorpusConfig(seed=seed, n_speakers=args.speakers, clips_per_speaker=args.clips,
                      sample_rate=args.sample_rate, L=args.length)
    X, man = gen_corpus(cc, args.out)
    cfg.data.seed = seed
    write_run(args.out, cfg, "gen-data", {"corpus": vars(cc)})
    print(json.dumps({"clips": len(X), "speakers": cc.n_speakers, "out": str(args.out)}))


def cmd_preprocess(args, cfg):
    x, sr = read_audio(args.input, args.sample_rate)
    rec = RawRecording(x, sr, read_annotations(args.annotations))
    clips = preprocess_recording(rec, args.tag, args.target, args.length)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, c in enumerate(clips):
        f = out / f"clip_{i:04}.f32"
        write_clip(f, c)
        files.append(f.name)
    write_run(out, cfg, "preprocess", {"input": str(args.input), "tag": args.tag, "target": args.target,
                                       "length": args.length, "clips": files})
    print(json.dumps({"clips": len(files), "out": str(out)}))


def cmd_train(args, cfg):
    phase = cfg.phase.phase
    X, man = _corpus(cfg)
    tr, te = _split(man, cfg)
    y = man.labels()
    out = Path(args.out)
    ckpt = out / "checkpoint.taac"
    key = strength = None
    if phase == 3:
        key, strength = _key(cfg), _strength(cfg)
    pcfg = _phase_config(cfg, phase, key, strength)
    t0 = time.perf_counter()
    if phase == 1:
        sdae, vpm = _models(man.L, cfg)
        dp = None
        if cfg.dp.enabled:
            d = cfg.dp
            dp = DpConfig(True, d.clip_norm, d.noise_multiplier, d.epsilon, d.delta)
        rep = train_phase1(sdae, vpm, X[tr], y[tr], pcfg, dp, ckpt)
    else:
        if not args.init:
            raise UsageError(f"phase {phase} needs --from <checkpoint of the previous phase>")
        sdae, vpm, _ = _load_models(args.init, man.L, cfg)
        fn = train_phase2 if phase == 2 else train_phase3
        rep = fn(sdae, vpm, X[tr], y[tr], pcfg, ckpt)
    seconds = time.perf_counter() - t0
    extra = {"split": cfg.data.split, "n_train": len(tr), "n_test": len(te)}
    if key is not None:
        extra["key_fingerprint"] = key.fingerprint()
    write_run(out, cfg, "train", extra)
    report = {"phase": phase, "checkpoint": str(ckpt), "final": {
        t: rep.epoch_means(t)[-1] for t in ("ortho", "recon", "cls", "total") if getattr(rep, t)},
        "dp": rep.dp, "timing": {"seconds": seconds, "epoch_seconds": rep.epoch_seconds}}
    write_report(out, report)


def _transform(args, cfg, fn, name):
    key, T = _key(cfg), _strength(cfg)
    x = read_clip(args.input)
    y = fn(x, key, T).astype(np.float32)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_clip(args.out, y)
    write_sidecar(args.out, key, T, run_record(cfg, name, {"input": str(args.input)}))


def cmd_encrypt(args, cfg):
    _transform(args, cfg, encrypt, "encrypt")


def cmd_decrypt(args, cfg):
    _transform(args, cfg, decrypt, "decrypt")


def _classifier_inputs(sdae, pair: FeaturePair, phase: int, cfg):
    if phase == 3:
        return phase_inputs(pair, 3, _key(cfg), _strength(cfg))
    return gate(pair, PHASE_GATE[phase])


def cmd_classify(args, cfg):
    if args.inputs:
        X = np.stack([read_clip(p) for p in args.inputs])
        ids = [Path(p).name for p in args.inputs]
    else:
        X, man = _corpus(cfg)
        ids = [c.file for c in man.clips]
    sdae, vpm, meta = _load_models(args.checkpoint, X.shape[1], cfg)
    phase = int(meta.get("phase", 2))
    F = _classifier_inputs(sdae, sdae.features(X), phase, cfg)
    vpm.eval()
    logits = np.concatenate([vpm.forward(F[i:i + 256]) for i in range(0, len(F), 256)])
    decisions = decide(logits, cfg.phase.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_decisions(out / "decisions.csv", ids, decisions)
    write_run(out, cfg, "classify", {"checkpoint": str(args.checkpoint), "phase": phase})
    print(json.dumps({"clips": len(ids), "positive": sum(d.label for d in decisions),
                      "out": str(out / "decisions.csv")}))


def _eval_detection(args, cfg, X, man, tr, te, out):
    if not args.checkpoint:
        raise UsageError("eval --task detection needs --checkpoint")
    sdae, vpm, meta = _load_models(args.checkpoint, man.L, cfg)
    phase = int(meta.get("phase", 2))
    F = _classifier_inputs(sdae, sdae.features(X[te]), phase, cfg)
    scores = vpm.scores(F)
    y = man.labels()[te]
    rep = detection_report(y, scores, cfg.phase.threshold)
    rep["sweep"] = {str(t): detection_report(y, scores, t) for t in SWEEP_THRESHOLDS}
    write_confusion_csvs(out, y, scores)
    rep.update(task="detection", phase=phase, n_test=len(te), threshold=cfg.phase.threshold)
    return rep


def _released(sdae, X, key, T):
    """Clips as released: fused through the autoencoder when one is given."""
    if sdae is None:
        return X if not T else encrypt(X, key, T).astype(np.float32)
    pair = sdae.features(X)
    v_nd = pair.v_nd if not T else encrypt(pair.v_nd, key, T).astype(np.float32)
    return gate(FeaturePair(pair.v_d, v_nd), PHASE_GATE[2])


def _eval_linkage(args, cfg, X, man, tr, te, out):
    T = cfg.encryption.strength or 0
    key = None
    if T:
        key = read_key(cfg.encryption.key) if cfg.encryption.key else \
            SecretKey.random(np.random.default_rng([cfg.data.seed, 0x4B]))
    sdae = _load_models(args.checkpoint, man.L, cfg)[0] if args.checkpoint else None
    spk = man.speakers()
    emb = SpectralEnvelope(man.sample_rate)
    counts = {"n_pos": args.n_pos, "n_neg": args.n_neg}
    cal_pairs, cal_same = make_pairs(spk[tr], args.plan, cfg.data.seed, **counts)
    s = cosine_scores(emb(_released(sdae, X[tr], None, 0)), cal_pairs)
    tau = calibrate_threshold(s[cal_same], s[~cal_same])
    pairs, same = make_pairs(spk[te], args.plan, cfg.data.seed + 1, **counts)
    res = linkage_attack(_released(sdae, X[te], key, T), spk[te], pairs, same, emb, tau)
    write_pair_scores(Path(out) / "pair_scores.csv", res)
    rep = res.summary()
    rep.update(task="linkage", strength=T, plan=args.plan,
               key_fingerprint=None if key is None else key.fingerprint())
    return rep


def _eval_recon(args, cfg, X, man, tr, te, out):
    T = cfg.encryption.strength or 1
    key = read_key(cfg.encryption.key) if cfg.encryption.key else \
        SecretKey.random(np.random.default_rng([cfg.data.seed, 0x4B]))
    x = X[te].astype(np.float64)
    st = recon_stats(x.ravel(), encrypt(x, key, T).ravel(), args.peak)
    rep = {"task": "recon", "strength": T,
           "encrypted": {"MSE": st.mse, "MAE": st.mae, "PSNR": st.psnr, "peak": st.peak}}
    if args.checkpoint:
        sdae = _load_models(args.checkpoint, man.L, cfg)[0]
        pair = sdae.features(X[te])
        fz = recon_stats(x.ravel(), (pair.v_d + pair.v_nd).astype(np.float64).ravel(), args.peak)
        rep["autoencoder"] = {"MSE": fz.mse, "MAE": fz.mae, "PSNR": fz.psnr, "peak": fz.peak,
                              "relative_error": relative_recon_error(pair, X[te])}
    return rep


EVAL_TASKS = {"detection": _eval_detection, "linkage": _eval_linkage, "recon": _eval_recon}


def cmd_eval(args, cfg):
    X, man = _corpus(cfg)
    tr, te = _split(man, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rep = EVAL_TASKS[args.task](args, cfg, X, man, tr, te, out)
    rep["split"] = cfg.data.split
    rep["timing"] = {"seconds": time.perf_counter() - t0}
    write_run(out, cfg, "eval", {"task": args.task})
    write_report(out, rep)


def cmd_gradcheck(args, cfg):
    from .gradcheck import TOLERANCE, run_gradient_suite
    t0 = time.perf_counter()
    res = run_gradient_suite(args.points, cfg.data.seed)
    failed = sorted(k for k, v in res.items() if not v < TOLERANCE)
    rep = {"max_relative_error": res, "tolerance": TOLERANCE, "failed": failed,
           "timing": {"seconds": time.perf_counter() - t0}}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_run(args.out, cfg, "gradcheck")
        write_report(args.out, rep)
    else:
        print(json.dumps(rep, sort_keys=True))
    if failed:
        raise TaacError(f"gradient check failed for: {', '.join(failed)}")


# ---------------------------------------------------------------------------
# parser


def _common(p, out_required=True):
    p.add_argument("--config", help="sectioned key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taac", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"taac {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write the synthetic corpus")
    _common(p)
    p.add_argument("--speakers", type=int, default=CorpusConfig.n_speakers)
    p.add_argument("--clips", type=int, default=CorpusConfig.clips_per_speaker)
    p.add_argument("--sample-rate", type=int, default=CorpusConfig.sample_rate)
    p.add_argument("--length", type=int, default=CorpusConfig.L)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("preprocess", help="cut one recording into fixed-length clips")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--tag", required=True)
    p.add_argument("--target", type=float, required=True, help="clip duration in seconds")
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--sample-rate", type=float, help="needed for raw .f32 input")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="run one training phase")
    _common(p)
    p.add_argument("--phase", type=int, choices=(1, 2, 3))
    p.add_argument("--corpus")
    p.add_argument("--split", type=int)
    p.add_argument("--from", dest="init", help="checkpoint of the previous phase")
    p.add_argument("--key")
    p.add_argument("--strength", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sdae-lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--dp", action="store_true")
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--noise-multiplier", type=float)
    p.set_defaults(fn=cmd_train)

    for name, fn in (("encrypt", cmd_encrypt), ("decrypt", cmd_decrypt)):
        p = sub.add_parser(name, help=f"{name} one .f32 clip")
        _common(p)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--key", required=True)
        p.add_argument("--strength", type=int, required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("classify", help="score clips with a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--key")
    p.add_argument("--strength", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("eval", help="detection, linkage or reconstruction report")
    _common(p)
    p.add_argument("--task", required=True, choices=sorted(EVAL_TASKS))
    p.add_argument("--corpus")
    p.add_argument("--split", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--key")
    p.add_argument("--strength", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--plan", choices=("balanced", "skewed"), default="balanced")
    p.add_argument("--n-pos", type=int, help="override the plan's positive pair count")
    p.add_argument("--n-neg", type=int, help="override the plan's negative pair count")
    p.add_argument("--peak", type=float, default=1.0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p, out_required=False)
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve(args)
        args.fn(args, cfg)
    except UsageError as e:
        print(f"taac {args.command}: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2
    except (TaacError, OSError) as e:
        print(f"taac {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
