"""Command-line entry points.

Thin client over the library: every subcommand loads the layered config,
runs one library call, and writes its artifact plus a run manifest next to
it. Identical invocations produce byte-identical artifacts, so nothing here
records wall-clock time. Errors leave a JSON record on stderr and a nonzero
exit code. Set EDITLM_LOG=debug|info|warning to adjust logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import config as cfgmod
from .codec import EditSpec, extract_context_tokens
from .corpus import _sections_from_meta, build_corpus, read_corpus, write_corpus
from .grammar import make_style_prompt, separate
from .lyrics import edit_view, encode_sections, encode_song_lyrics
from .metrics import edit_prediction_accuracy, feature_matrix, frechet_distance, syllable_error_rate
from .model import KIND_NONE, KIND_VOCAL, SOURCE_KINDS, SongEditLM
from .sampling import (
    Conditioning,
    SampleConfig,
    candidate_select,
    generate_edit,
    read_tokens,
    splice_edit,
    story_mode,
    write_tokens,
)
from .tokenizer import load_tokenizer, save_tokenizer, train_tokenizer
from .training import load_checkpoint, style_prompt_tokens, train

log = logging.getLogger("editlm")


def _write_run_manifest(out_path: str, command: str, cfg: dict, seed: Optional[int],
                        inputs: dict, outputs: dict, extra: Optional[dict] = None) -> str:
    rec = {
        "command": command,
        "config": cfg,
        "config_digest": cfgmod.config_digest(cfg),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    }
    if extra:
        rec.update(extra)
    path = out_path + ".run.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rec, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def _load_model(path: str) -> tuple[SongEditLM, dict]:
    model, manifest, _ = load_checkpoint(path)
    model.eval()
    return model, manifest


def _check_digest(ckpt_manifest: dict, tokenizer) -> None:
    want = ckpt_manifest.get("tokenizer_digest", "")
    if want and want != tokenizer.digest():
        log.warning("checkpoint was trained against a different tokenizer (digest mismatch)")


def _sections_from_file(path: str) -> list:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data["sections"]
    return _sections_from_meta(data, path)


def _source_tokens(tokenizer, song, gcfg, kind: int, seed: int) -> Optional[np.ndarray]:
    if kind == KIND_NONE:
        return None
    sep = separate(song, gcfg, rng_seed=seed)
    zeros = np.zeros_like(song.vocal_frames)
    if kind == KIND_VOCAL:
        return tokenizer.tokenize(sep.vocal, zeros)
    return tokenizer.tokenize(zeros, sep.accomp)


# ---------- subcommands ----------


def cmd_gen_corpus(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg["corpus"]["seed"]
    corpus = build_corpus(cfg["corpus"]["n_songs"], seed, cfgmod.grammar_config(cfg))
    write_corpus(args.out, corpus)
    _write_run_manifest(args.out, "gen-corpus", cfg, seed, {}, {"corpus": args.out},
                        {"n_songs": len(corpus.songs)})
    print(f"wrote {len(corpus.songs)} songs to {args.out}")
    return 0


def cmd_train_tokenizer(args, cfg) -> int:
    corpus = read_corpus(args.corpus)
    tt = cfg["tokenizer_train"]
    seed = args.seed if args.seed is not None else 0
    result = train_tokenizer(
        corpus, cfgmod.tokenizer_config(cfg), steps=tt["steps"], lr=tt["lr"],
        batch_frames=tt["batch_frames"], dead_steps=tt["dead_steps"], seed=seed,
    )
    save_tokenizer(args.out, result.tokenizer)
    final = result.losses[-1] if result.losses else None
    _write_run_manifest(args.out, "train-tokenizer", cfg, seed, {"corpus": args.corpus},
                        {"tokenizer": args.out},
                        {"final_loss": final, "reseeds": result.reseeds})
    print(f"trained tokenizer for {tt['steps']} steps (final loss {final}), wrote {args.out}")
    return 0


def cmd_train_lm(args, cfg) -> int:
    corpus = read_corpus(args.corpus)
    tokenizer = load_tokenizer(args.tokenizer)
    tcfg = cfgmod.train_config(cfg)
    if args.seed is not None:
        tcfg.seed = args.seed
    model = SongEditLM(cfgmod.model_config(cfg))
    os.makedirs(args.out_dir, exist_ok=True)
    result = train(
        corpus, tokenizer, model, tcfg,
        out_dir=args.out_dir,
        log_path=os.path.join(args.out_dir, "train_log.jsonl"),
        resume_from=args.resume,
    )
    _write_run_manifest(
        os.path.join(args.out_dir, "train-lm"), "train-lm", cfg, tcfg.seed,
        {"corpus": args.corpus, "tokenizer": args.tokenizer, "resume": args.resume},
        {"checkpoint": result.final_checkpoint},
        {"final_loss": result.final_loss, "final_masked_acc": result.final_acc, "steps": tcfg.steps},
    )
    print(f"trained {tcfg.steps} steps, final checkpoint {result.final_checkpoint}")
    return 0


def cmd_generate(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    tokenizer = load_tokenizer(args.tokenizer)
    _check_digest(manifest, tokenizer)
    scfg = cfgmod.sample_config(cfg)
    seed = args.seed if args.seed is not None else 0
    k = model.config.k_streams

    entries = None
    expected = None
    if args.lyrics:
        sections = _sections_from_file(args.lyrics)
        entries = encode_sections(sections).entries
        expected = sum(s.duration_frames for s in sections)
        scfg.max_new_frames = expected + cfg["story"]["round_margin_frames"]
    style = None
    if args.style_song is not None:
        corpus = read_corpus(args.corpus)
        prompt_seconds = cfg["eval"]["prompt_seconds"]
        style = make_style_prompt(corpus.songs[args.style_song], tokenizer, prompt_seconds).tokens

    empty = np.empty((0, k), dtype=np.int64)
    res = generate_edit(model, empty, empty, Conditioning(style_tokens=style, entries=entries),
                        scfg, seed=seed)
    write_tokens(args.out, res.tokens, {
        "codebook_size": model.config.codebook_size,
        "k_streams": k,
        "frame_rate": cfg["grammar"]["frame_rate"],
        "truncated": res.truncated,
    })
    _write_run_manifest(args.out, "generate", cfg, seed,
                        {"checkpoint": args.checkpoint, "tokenizer": args.tokenizer,
                         "lyrics": args.lyrics},
                        {"tokens": args.out},
                        {"n_frames": int(res.tokens.shape[0]), "expected_frames": expected,
                         "truncated": res.truncated})
    print(f"generated {res.tokens.shape[0]} frames to {args.out}")
    return 0


def cmd_edit(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    tokenizer = load_tokenizer(args.tokenizer)
    _check_digest(manifest, tokenizer)
    corpus = read_corpus(args.corpus)
    song = corpus.songs[args.song_index]
    scfg = cfgmod.sample_config(cfg)
    seed = args.seed if args.seed is not None else 0

    tokens = tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
    first, last = args.sentences
    spec = EditSpec.from_sentences(song, first, last)
    ctx = extract_context_tokens(tokens, spec)
    style = style_prompt_tokens(tokens, song.frame_rate, cfg["train"]["prompt_seconds"])
    entries = edit_view(encode_song_lyrics(song), (first, last)).entries
    kind = SOURCE_KINDS[args.source]
    cond = Conditioning(
        style_tokens=style, entries=entries, source_kind=kind,
        source_tokens=_source_tokens(tokenizer, song, corpus.config, kind, seed),
    )

    first_pass = generate_edit(model, ctx.pre, ctx.post, cond, scfg, seed=seed)
    chosen, scores, chosen_index = first_pass, [], 0
    if scfg.n_candidates > 1:
        sel = candidate_select(model, ctx.pre, ctx.post, cond, scfg, seed, first_pass,
                               frame_rate=song.frame_rate)
        chosen, scores, chosen_index = sel.chosen, sel.scores, sel.chosen_index

    edited = splice_edit(tokens, spec.frame_start, spec.frame_end, chosen.tokens)
    write_tokens(args.out, edited, {
        "codebook_size": model.config.codebook_size,
        "k_streams": model.config.k_streams,
        "frame_rate": song.frame_rate,
        "song_id": song.song_id,
        "edited_sentences": [first, last],
        "edited_frames": [spec.frame_start, spec.frame_start + int(chosen.tokens.shape[0])],
    })
    _write_run_manifest(args.out, "edit", cfg, seed,
                        {"corpus": args.corpus, "checkpoint": args.checkpoint,
                         "tokenizer": args.tokenizer, "song_index": args.song_index},
                        {"tokens": args.out},
                        {"sentences": [first, last],
                         "frame_span": [spec.frame_start, spec.frame_end],
                         "new_edit_frames": int(chosen.tokens.shape[0]),
                         "scores": scores, "chosen_index": chosen_index,
                         "source": args.source, "truncated": chosen.truncated})
    print(f"edited sentences {first}..{last} of {song.song_id}, wrote {args.out}")
    return 0


def cmd_track_complete(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    tokenizer = load_tokenizer(args.tokenizer)
    _check_digest(manifest, tokenizer)
    corpus = read_corpus(args.corpus)
    song = corpus.songs[args.song_index]
    scfg = cfgmod.sample_config(cfg)
    scfg.max_new_frames = song.n_frames  # complete to the song's own length
    seed = args.seed if args.seed is not None else 0

    tokens = tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
    kind = SOURCE_KINDS[args.have]
    if kind == KIND_NONE:
        raise ValueError("track-complete needs --have vocal or --have accomp")
    cond = Conditioning(
        style_tokens=style_prompt_tokens(tokens, song.frame_rate, cfg["train"]["prompt_seconds"]),
        entries=encode_song_lyrics(song).entries,
        source_kind=kind,
        source_tokens=_source_tokens(tokenizer, song, corpus.config, kind, seed),
    )
    k = model.config.k_streams
    empty = np.empty((0, k), dtype=np.int64)
    res = generate_edit(model, empty, empty, cond, scfg, seed=seed)
    write_tokens(args.out, res.tokens, {
        "codebook_size": model.config.codebook_size,
        "k_streams": k,
        "frame_rate": song.frame_rate,
        "song_id": song.song_id,
        "have": args.have,
    })
    _write_run_manifest(args.out, "track-complete", cfg, seed,
                        {"corpus": args.corpus, "checkpoint": args.checkpoint,
                         "tokenizer": args.tokenizer, "song_index": args.song_index},
                        {"tokens": args.out},
                        {"have": args.have, "n_frames": int(res.tokens.shape[0]),
                         "truncated": res.truncated})
    print(f"completed {res.tokens.shape[0]} frames conditioned on {args.have}, wrote {args.out}")
    return 0


def cmd_story(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    tokenizer = load_tokenizer(args.tokenizer)
    _check_digest(manifest, tokenizer)
    corpus = read_corpus(args.corpus)
    scfg = cfgmod.sample_config(cfg)
    stcfg = cfgmod.story_config(cfg)
    seed = args.seed if args.seed is not None else 0

    with open(args.rounds, "r", encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        if "mode" in data:
            stcfg.mode = data["mode"]
        data = data["rounds"]
    rounds = []
    for i, rec in enumerate(data):
        secs = rec["sections"] if isinstance(rec, dict) else rec
        rounds.append(_sections_from_meta(secs, f"{args.rounds}: round {i}"))

    prompt_seconds = cfg["eval"]["prompt_seconds"]
    prompts = [
        make_style_prompt(corpus.songs[i], tokenizer, prompt_seconds).tokens
        for i in args.prompt_songs
    ]
    frame_rate = cfg["grammar"]["frame_rate"]
    res = story_mode(model, rounds, prompts, scfg, stcfg, frame_rate, seed)
    write_tokens(args.out, res.tokens, {
        "codebook_size": model.config.codebook_size,
        "k_streams": model.config.k_streams,
        "frame_rate": frame_rate,
        "mode": stcfg.mode,
    })
    _write_run_manifest(args.out, "story", cfg, seed,
                        {"corpus": args.corpus, "checkpoint": args.checkpoint,
                         "tokenizer": args.tokenizer, "rounds": args.rounds},
                        {"tokens": args.out},
                        {"mode": stcfg.mode, "n_frames": int(res.tokens.shape[0]),
                         "rounds": [
                             {"round_index": r.round_index, "prompt_index": r.prompt_index,
                              "prefix_frames": r.prefix_frames, "new_frames": r.new_frames,
                              "truncated": r.truncated}
                             for r in res.rounds
                         ]})
    print(f"story mode ({stcfg.mode}) produced {res.tokens.shape[0]} frames over "
          f"{len(res.rounds)} rounds, wrote {args.out}")
    return 0


def cmd_eval(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    tokenizer = load_tokenizer(args.tokenizer)
    _check_digest(manifest, tokenizer)
    corpus = read_corpus(args.corpus)
    gcfg = corpus.config
    ecfg = cfg["eval"]
    seed = args.seed if args.seed is not None else ecfg["seed"]
    songs = corpus.songs[: ecfg["max_songs"]]

    from .grammar import GrammarTables

    tables = GrammarTables(gcfg)
    accuracy = {}
    for name, kind in SOURCE_KINDS.items():
        acc, _ = edit_prediction_accuracy(
            model, tokenizer, songs, gcfg, seed=seed, source_kind=kind,
            prompt_seconds=ecfg["prompt_seconds"],
        )
        accuracy[name] = acc

    sers = []
    real_rows, recon_rows = [], []
    for song in songs:
        tokens = tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
        sers.append(syllable_error_rate(tokens, song, tokenizer, tables))
        accomp, vocal = tokenizer.decode_tokens(tokens)
        real_rows.append(feature_matrix(song.vocal_frames, song.accomp_frames))
        recon_rows.append(feature_matrix(vocal, accomp))
    fre = frechet_distance(np.concatenate(real_rows), np.concatenate(recon_rows))

    report = {
        "n_songs": len(songs),
        "edit_accuracy": accuracy,
        "ser_reconstruction_mean": float(np.mean(sers)),
        "frechet_reconstruction": {"value": fre.value, "regularized": fre.regularized},
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_run_manifest(args.out, "eval", cfg, seed,
                        {"corpus": args.corpus, "checkpoint": args.checkpoint,
                         "tokenizer": args.tokenizer},
                        {"report": args.out}, report)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


# ---------- parser ----------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering values parsed
    # before the subcommand name (subparsers copy their namespace over the parent's)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file merged over defaults")
    common.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="dotted config override, value parsed as JSON (repeatable)")
    common.add_argument("--seed", type=int, help="seed override for this command")
    parser = argparse.ArgumentParser(prog="editlm", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name: str, help: str):
        return sub.add_parser(name, help=help, parents=[common])

    p = add_parser("gen-corpus", help="generate a synthetic song corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = add_parser("train-tokenizer", help="fit RVQ codebooks on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = add_parser("train-lm", help="train the edit LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train_lm)

    p = add_parser("generate", help="generate a song from scratch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lyrics", default=None, help="JSON section file to condition on")
    p.add_argument("--corpus", default=None, help="corpus supplying the style prompt song")
    p.add_argument("--style-song", type=int, default=None, help="corpus index for the style prompt")
    p.set_defaults(func=cmd_generate)

    p = add_parser("edit", help="regenerate a sentence span of a corpus song")
    p.add_argument("--corpus", required=True)
    p.add_argument("--song-index", type=int, required=True)
    p.add_argument("--sentences", type=int, nargs=2, required=True, metavar=("FIRST", "LAST"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=sorted(SOURCE_KINDS), default="none",
                   help="separated-track condition fed through cross-attention")
    p.set_defaults(func=cmd_edit)

    p = add_parser("track-complete", help="regenerate a song from one separated track")
    p.add_argument("--corpus", required=True)
    p.add_argument("--song-index", type=int, required=True)
    p.add_argument("--have", choices=["vocal", "accomp"], required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track_complete)

    p = add_parser("story", help="round-by-round long-form generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--corpus", required=True, help="corpus supplying style prompt songs")
    p.add_argument("--rounds", required=True, help="JSON file of per-round section lists")
    p.add_argument("--prompt-songs", type=int, nargs="+", required=True,
                   help="corpus indices whose tails become the alternating style prompts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_story)

    p = add_parser("eval", help="evaluation report on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("EDITLM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.config = getattr(args, "config", None)
    args.set = getattr(args, "set", None) or []
    args.seed = getattr(args, "seed", None)
    try:
        cfg = cfgmod.load_config(args.config, args.set)
        return int(args.func(args, cfg) or 0)
    except Exception as e:  # argparse exits on its own; everything else becomes a record
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        log.debug("command failed", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
