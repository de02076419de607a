"""Command-line surface: gen-data, train, sample, eval, gradcheck, scaling."""

from __future__ import annotations

import os

# single-threaded BLAS wins on small matrices; set before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config, config_to_text, load_config, save_config
from .corpus import (ALL_CLASSES, default_manifest, export_wav, read_wav,
                     render_reference, sample_example, write_manifest)
from .diffusion import GuidanceScales
from .evalcls import load_classifier, save_classifier
from .evaluate import (EvalReport, build_eval_classifier, evaluate, load_model,
                       scaling_experiment, scaling_table, transfer_batch)
from .train import PseudoSettings, Trainer, train_loop


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = default_manifest(cfg.n_train, cfg.n_val, cfg.n_test)
    write_manifest(out / "manifest.jsonl", records)
    save_config(cfg, out / "config.txt")
    if args.export_wavs > 0:
        wav_dir = out / "wav"
        wav_dir.mkdir(exist_ok=True)
        for i in range(args.export_wavs):
            ex = sample_example(i, "train", sr=cfg.sr, n_samples=cfg.n_samples,
                                n_events=cfg.n_events, gain_min=cfg.gain_min,
                                gain_max=cfg.gain_max, vibrato_hz=cfg.vibrato_hz)
            export_wav(ex.mixture, wav_dir / f"train_{i:04d}_mix.wav", cfg.sr)
            for v, stem in enumerate(ex.stems):
                export_wav(stem, wav_dir / f"train_{i:04d}_stem{v}.wav", cfg.sr)
    print(f"wrote manifest with {len(records)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    steps = args.steps or cfg.total_steps
    if args.resume:
        trainer = Trainer.load(args.resume)
        print(f"resumed from {args.resume} at step {trainer.state.step}")
    else:
        trainer = Trainer(cfg)
    ckpt = train_loop(trainer, steps, args.out, log_every=cfg.log_every,
                      ckpt_every=cfg.ckpt_every)
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_sample(args) -> int:
    model, cfg = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scales = GuidanceScales(args.wc if args.wc is not None else cfg.w_content,
                            args.wtau if args.wtau is not None else cfg.w_timbre)
    steps = args.steps or cfg.sample_steps
    if args.mixture:
        mix, sr = read_wav(args.mixture)
        if sr != cfg.sr or len(mix) != cfg.n_samples:
            raise SystemExit(f"mixture must be {cfg.n_samples} samples at {cfg.sr} Hz")
        if not args.refs or len(args.refs.split(",")) != cfg.n_stems:
            raise SystemExit(f"pass --refs with {cfg.n_stems} comma-separated wavs")
        refs = []
        for p in args.refs.split(","):
            w, sr_r = read_wav(p)
            if sr_r != cfg.sr or len(w) != cfg.n_samples:
                raise SystemExit(f"reference {p} must be {cfg.n_samples} samples at {cfg.sr} Hz")
            refs.append(w)
        refs = np.stack(refs)
    else:
        ex = sample_example(args.test_index, "test", sr=cfg.sr, n_samples=cfg.n_samples,
                            n_events=cfg.n_events, gain_min=cfg.gain_min,
                            gain_max=cfg.gain_max, vibrato_hz=cfg.vibrato_hz)
        mix = ex.mixture
        if args.setting == "rec":
            refs = np.stack([render_reference(ex.specs[v], cfg.sr, cfg.n_samples,
                                              seed=cfg.eval_seed + v, vibrato_hz=cfg.vibrato_hz)
                             for v in range(cfg.n_stems)])
        else:
            from .corpus import other_family_class, render_class_reference
            refs = np.stack([
                render_class_reference(v, other_family_class(ex.specs[v].timbre.id),
                                       cfg.sr, cfg.n_samples, seed=cfg.eval_seed + 17 * v,
                                       n_events=cfg.n_events, vibrato_hz=cfg.vibrato_hz)
                for v in range(cfg.n_stems)])
    gen = transfer_batch(model, mix[None], refs[None], scales, steps, seed=args.seed or 0)
    export_wav(mix, out / "input_mix.wav", cfg.sr)
    remix = gen[0].sum(axis=0)
    peak = max(float(np.abs(remix).max()), 1.0)
    export_wav(remix / peak, out / "generated_mix.wav", cfg.sr)
    for v in range(cfg.n_stems):
        export_wav(refs[v], out / f"reference_{v}.wav", cfg.sr, normalize=True)
        export_wav(gen[0, v] / peak, out / f"generated_stem{v}.wav", cfg.sr, normalize=True)
    print(f"wrote {2 + 2 * cfg.n_stems} wav files to {out}")
    return 0


def _classifier_for(args, cfg, codec):
    clf_path = Path(args.classifier) if args.classifier else Path(args.out) / "eval_classifier.sttc"
    if clf_path.exists():
        return load_classifier(clf_path)
    if not args.fit_classifier:
        raise SystemExit(f"missing eval classifier artifact at {clf_path}; "
                         f"pass --fit-classifier to build it")
    clf = build_eval_classifier(cfg, codec)
    clf_path.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(clf, clf_path)
    print(f"trained and saved eval classifier to {clf_path}")
    return clf


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clf = _classifier_for(args, cfg, model.codec)
    scales = GuidanceScales(args.wc if args.wc is not None else cfg.w_content,
                            args.wtau if args.wtau is not None else cfg.w_timbre)
    steps = args.steps or cfg.sample_steps
    settings = ("rec", "trans") if args.setting == "both" else (args.setting,)
    print(EvalReport.header())
    with open(out / "eval_records.jsonl", "a") as f:
        for setting in settings:
            rep = evaluate(model, clf, setting, split=args.split, n=args.n or cfg.eval_n,
                           scales=scales, steps=steps, eval_seed=cfg.eval_seed)
            print(rep.row())
            f.write(rep.to_json() + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import full_loss_grad_check
    out = full_loss_grad_check(n_coords=args.coords, seed=args.seed or 0)
    print(json.dumps(out))
    ok = out["max_rel_err"] < 1e-3
    print(f"gradient check {'PASS' if ok else 'FAIL'} "
          f"(max rel err {out['max_rel_err']:.2e}, tolerance 1e-3)")
    return 0 if ok else 1


def cmd_scaling(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.classifier and Path(args.classifier).exists():
        clf = load_classifier(args.classifier)
    else:
        from .train import fit_codec
        clf = build_eval_classifier(cfg, fit_codec(cfg))
        if args.classifier:
            save_classifier(clf, args.classifier)
    ratios = tuple(tuple(int(x) for x in r.split(":")) for r in args.ratios.split(","))
    rows = scaling_experiment(cfg, clf, out, ratios=ratios, budget_steps=args.budget,
                              leakage=args.alpha, noise_snr_db=args.snr,
                              eval_n=args.eval_n, quiet=False)
    table = scaling_table(rows)
    print(table)
    (out / "scaling_table.txt").write_text(table + "\n")
    with open(out / "scaling_records.jsonl", "w") as f:
        for (sup, pse), rep in rows:
            f.write(json.dumps({"sup_pct": sup, "pseudo_pct": pse,
                                **json.loads(rep.to_json())}) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stemtt",
                                description="joint per-stem timbre transfer from mixtures, desk scale")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="config file (key = value lines)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("gen-data", help="write the corpus manifest (and optional wavs)")
    common(sp, "out/data")
    sp.add_argument("--export-wavs", type=int, default=0, metavar="N",
                    help="also export the first N train examples as wav files")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train the transfer model")
    common(sp, "out/run")
    sp.add_argument("--steps", type=int, help="override total training steps")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="re-render stems from a mixture and references")
    common(sp, "out/samples")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mixture", help="input mixture wav (else a test-set example)")
    sp.add_argument("--refs", help="comma-separated reference wavs, one per stem")
    sp.add_argument("--test-index", type=int, default=0)
    sp.add_argument("--setting", choices=("rec", "trans"), default="trans")
    sp.add_argument("--wc", type=float, help="content guidance scale")
    sp.add_argument("--wtau", type=float, help="timbre guidance scale")
    sp.add_argument("--steps", type=int, help="sampler steps")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="objective evaluation of a checkpoint")
    common(sp, "out/eval")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--setting", choices=("rec", "trans", "both"), default="both")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--n", type=int, help="number of examples (default from config)")
    sp.add_argument("--classifier", help="eval classifier artifact path")
    sp.add_argument("--fit-classifier", action="store_true",
                    help="train and save the eval classifier if missing")
    sp.add_argument("--wc", type=float)
    sp.add_argument("--wtau", type=float)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="autodiff vs finite differences on the full loss")
    sp.add_argument("--coords", type=int, default=50)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("scaling", help="supervision-ratio scaling harness")
    common(sp, "out/scaling")
    sp.add_argument("--budget", type=int, default=2000, help="training steps per ratio")
    sp.add_argument("--ratios", default="100:0,50:50,10:90,5:95,0:100")
    sp.add_argument("--alpha", type=float, default=0.1, help="pseudo-stem leakage")
    sp.add_argument("--snr", type=float, default=20.0, help="pseudo-stem noise SNR (dB)")
    sp.add_argument("--eval-n", type=int, default=32)
    sp.add_argument("--classifier", help="eval classifier artifact path")
    sp.set_defaults(fn=cmd_scaling)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
