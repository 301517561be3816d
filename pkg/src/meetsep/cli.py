"""Command-line entry point: ``meetsep <subcommand> [options]``.

Every subcommand prints one line of JSON to stdout.  Exit status is 0 on
success, 2 when the inputs or the configuration are invalid and 1 when
processing fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .dereverb import dereverberate
from .diarize import Annotation, activity_to_annotation
from .maskmodel import sliding_window_gss
from .pipeline import (_mvdr_streams, activity_on_spec, csd, enhance_for_clustering,
                       run_diarization_stages, run_pipeline, run_separation)
from .scoring import der, parse_segments_jsonl, tcpwer
from .sessionio import (FormatError, emit_rttm, read_mask, read_rttm, read_wav, write_mask,
                        write_rttm, write_wav)
from .simulate import SimConfig, simulate_session
from .spectral import stft


class ValidationError(Exception):
    """Bad arguments, unreadable inputs or an invalid configuration."""


def _load(fn, *args):
    try:
        return fn(*args)
    except (OSError, FormatError, ConfigError, ValueError, KeyError) as exc:
        raise ValidationError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> PipelineConfig:
    cfg = _load(load_config, args.config)
    if args.seed is not None:
        cfg = cfg.replace(diarize=dataclasses.replace(cfg.diarize, seed=args.seed))
    return cfg


def cmd_simulate(args, cfg):
    sim = _load(lambda: SimConfig(speakers=args.speakers, channels=args.channels,
                                  duration=args.duration, overlap_ratio=args.overlap,
                                  snr=args.snr, reverb_t60=args.t60,
                                  seed=args.seed if args.seed is not None else 0))
    sess = _load(simulate_session, sim)
    out = _out_dir(args)
    write_wav(sess.mixture, out / "mixture.wav")
    for spk, src in zip(sess.speaker_ids, sess.sources):
        write_wav(src, out / f"source_{spk}.wav")
    write_rttm(sess.annotation, out / "reference.rttm")
    lines = [json.dumps({"session": sess.annotation.session, "speaker": w.speaker,
                         "start_s": w.start, "end_s": w.end, "words": w.word})
             for w in sess.words]
    (out / "words.jsonl").write_text("\n".join(lines) + "\n")
    return {"session": sess.annotation.session, "speakers": list(sess.speaker_ids),
            "duration": sim.duration, "segments": len(sess.annotation.segments),
            "out": str(out)}


def cmd_wpe(args, cfg):
    wave = _load(read_wav, args.input)
    out = _out_dir(args)
    write_wav(dereverberate(wave, cfg.wpe, cfg.wpe_stft), out / "dereverberated.wav")
    return {"channels": wave.channels, "samples": wave.num_samples,
            "output": str(out / "dereverberated.wav")}


def cmd_gss(args, cfg):
    wave = _load(read_wav, args.input)
    priors = _load(read_rttm, args.rttm)
    spec = stft(wave, cfg.stft)
    mask = sliding_window_gss(spec, activity_on_spec(priors, spec), cfg.cacgmm)
    out = _out_dir(args)
    write_mask(mask, out / "mask.mctf")
    return {"classes": list(mask.class_ids), "frames": spec.frames, "bins": spec.bins,
            "output": str(out / "mask.mctf")}


def cmd_mvdr(args, cfg):
    wave = _load(read_wav, args.input)
    mask = _load(read_mask, args.mask)
    spec = stft(wave, cfg.stft)
    if mask.values.shape[1:] != (spec.frames, spec.bins):
        raise ValidationError(f"mask grid {mask.values.shape[1:]} does not match the STFT "
                              f"grid {(spec.frames, spec.bins)}")
    waves, refs = _mvdr_streams(spec, mask, cfg, wave.num_samples)
    out = _out_dir(args)
    for spk, w in sorted(waves.items()):
        write_wav(w, out / f"beamformed_{spk}.wav")
    return {"speakers": sorted(waves), "reference_channels": refs}


def cmd_diarize(args, cfg):
    wave = _load(read_wav, args.input)
    ann = csd(enhance_for_clustering(wave, cfg), cfg, args.session)
    out = _out_dir(args)
    write_rttm(ann, out / "csd.rttm")
    return {"speakers": list(ann.speakers), "segments": len(ann.segments),
            "output": str(out / "csd.rttm")}


def cmd_rectify(args, cfg):
    wave = _load(read_wav, args.input)
    priors = _load(read_rttm, args.rttm)
    cfg = cfg.replace(recluster="off")
    stages = run_diarization_stages(wave, priors, cfg, args.session)
    ann = dict(stages)["rectified"]
    out = _out_dir(args)
    write_rttm(ann, out / "rectified.rttm")
    return {"speakers": list(ann.speakers), "segments": len(ann.segments),
            "output": str(out / "rectified.rttm")}


def cmd_separate(args, cfg):
    cfg = _load(lambda: cfg.replace(variant=args.variant))
    wave = _load(read_wav, args.input)
    priors = _load(read_rttm, args.rttm)
    tf = _load(read_mask, args.tf_prior) if args.tf_prior else None
    if cfg.variant == "v3" and tf is None:
        raise ValidationError("variant v3 needs --tf-prior")
    result = run_separation(wave, priors, tf, cfg)
    out = _out_dir(args)
    for spk, w in sorted(result.waves.items()):
        write_wav(w, out / f"separated_{spk}.wav")
    return {"variant": cfg.variant, "speakers": sorted(result.waves),
            "segments": len(result.segments), "reference_channels": result.refs}


def cmd_score_der(args, cfg):
    ref = _load(read_rttm, args.ref)
    hyp = _load(read_rttm, args.hyp)
    collar = cfg.scoring.der_collar if args.collar is None else args.collar
    r = _load(der, ref, hyp, collar)
    return {"der": r.der, "fa": r.fa, "miss": r.miss, "spkerr": r.spkerr,
            "scored_speech": r.scored_speech, "mapping": r.mapping}


def cmd_score_tcpwer(args, cfg):
    ref = _load(lambda: parse_segments_jsonl(Path(args.ref).read_text()))
    hyp = _load(lambda: parse_segments_jsonl(Path(args.hyp).read_text()))
    collar = cfg.scoring.tcpwer_collar if args.collar is None else args.collar
    rule = args.rule or cfg.scoring.tcpwer_rule
    r = _load(tcpwer, ref, hyp, collar, rule)
    return {"tcpwer": r.tcpwer, "substitutions": r.substitutions,
            "insertions": r.insertions, "deletions": r.deletions,
            "reference_words": r.reference_words, "assignment": r.assignment}


def cmd_pipeline(args, cfg):
    wave = _load(read_wav, args.input)
    priors = _load(read_rttm, args.rttm) if args.rttm else None
    tf = _load(read_mask, args.tf_prior) if args.tf_prior else None
    manifest = run_pipeline(wave, _out_dir(args), cfg, priors, tf, args.session)
    return {"out": str(args.out), "stages": manifest["stages"],
            "speakers": manifest["speakers"], "config_sha256": manifest["config_sha256"]}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="random seed (non-negative)")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="meetsep", parents=[common],
                                description="Multi-channel meeting separation front-end")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text,
                            argument_default=argparse.SUPPRESS)
        sp.set_defaults(func=fn)
        return sp

    sp = add("simulate", cmd_simulate, "write a simulated meeting")
    sp.add_argument("--speakers", type=int, default=2)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--duration", type=float, default=10.0)
    sp.add_argument("--overlap", type=float, default=0.0)
    sp.add_argument("--snr", type=float, default=20.0)
    sp.add_argument("--t60", type=float, default=0.0)

    sp = add("wpe", cmd_wpe, "dereverberate a multi-channel WAV")
    sp.add_argument("input")

    sp = add("gss", cmd_gss, "guided cACGMM masks from a WAV and an RTTM prior")
    sp.add_argument("input")
    sp.add_argument("--rttm", required=True)

    sp = add("mvdr", cmd_mvdr, "mask-based MVDR per speaker")
    sp.add_argument("input")
    sp.add_argument("--mask", required=True)

    sp = add("diarize", cmd_diarize, "clustering-based diarization")
    sp.add_argument("input")
    sp.add_argument("--session", default="session")

    sp = add("rectify", cmd_rectify, "refine an RTTM prior with the cACGMM")
    sp.add_argument("input")
    sp.add_argument("--rttm", required=True)
    sp.add_argument("--session", default="session")

    sp = add("separate", cmd_separate, "separate speakers (V1, V2 or V3)")
    sp.add_argument("input")
    sp.add_argument("--rttm", required=True)
    sp.add_argument("--variant", choices=("v1", "v2", "v3"), default="v1")
    sp.add_argument("--tf-prior", dest="tf_prior", default=None)

    sp = add("score-der", cmd_score_der, "diarization error rate of two RTTMs")
    sp.add_argument("ref")
    sp.add_argument("hyp")
    sp.add_argument("--collar", type=float, default=None)

    sp = add("score-tcpwer", cmd_score_tcpwer, "tcpWER of two segment JSONL files")
    sp.add_argument("ref")
    sp.add_argument("hyp")
    sp.add_argument("--collar", type=float, default=None)
    sp.add_argument("--rule", choices=("midpoint", "overlap"), default=None)

    sp = add("pipeline", cmd_pipeline, "full diarization and separation run")
    sp.add_argument("input")
    sp.add_argument("--rttm", default=None)
    sp.add_argument("--tf-prior", dest="tf_prior", default=None)
    sp.add_argument("--session", default="session")
    return p


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = 0 if exc.code in (0, None) else 2
        if code:
            _emit({"status": "error", "kind": "validation", "message": "invalid arguments"})
        return code
    try:
        if args.seed is not None and args.seed < 0:
            raise ValidationError("--seed must be non-negative")
        cfg = _config(args)
        result = args.func(args, cfg)
    except ValidationError as exc:
        _emit({"status": "error", "kind": "validation", "command": args.command,
               "message": str(exc)})
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        _emit({"status": "error", "kind": "runtime", "command": args.command,
               "message": f"{type(exc).__name__}: {exc}"})
        return 1
    _emit({"status": "ok", "command": args.command, **result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
