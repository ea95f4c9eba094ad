"""Command-line entry point: ``recomposer <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 vocabulary mismatch.
Errors print a single ``error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (atomic_write, fingerprint, load_checkpoint,
                         prior_checkpoint, prior_from_checkpoint, save_checkpoint,
                         vqvae_checkpoint, vqvae_from_checkpoint)
from .dataset import (CodeFile, build_dataset, kern_files, load_scores, read_codes, read_dataset,
                      write_codes, write_dataset)
from .harmony import ChordVocab
from .midi import roll_to_ppm, rolls_to_midi
from .prior import CondSpec, PriorConfig, PriorModel, PriorTrainConfig, generate_sequence, train_prior
from .synth import write_synth_corpus
from .vqvae import TrainConfig, VqVae, VqVaeConfig, encode_grids, reconstruct, train_vqvae

log = logging.getLogger("recomposer")

EXIT_ERROR = 1
EXIT_VOCAB = 3


class VocabMismatch(Exception):
    """Checkpoints, codes and dataset disagree about a vocabulary."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {text!r}")
    return text == "on"


def _write_loss_csv(path, losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in losses:
            w.writerow([step, repr(loss)])


def _vocab_echo(ds) -> dict:
    return {
        "tone_pitches": list(ds.tone_vocab.pitches),
        "tone_fingerprint": ds.tone_fingerprint(),
        "chord_vocab": ds.chord_vocab.to_text(),
        "chord_fingerprint": ds.chord_fingerprint(),
    }


def _require(expected: str, actual: str, what: str) -> None:
    if expected != actual:
        raise VocabMismatch(f"{what} fingerprint {actual} does not match {expected}")


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    paths = write_synth_corpus(args.out, args.seed, args.pieces, args.measures, args.transpose)
    log.info("wrote %d synthetic pieces to %s", len(paths), args.out)
    return 0


def cmd_build_dataset(args) -> int:
    files = kern_files(args.input)
    if not files:
        raise FileNotFoundError(f"no .krn files in {args.input}")
    ds = build_dataset(load_scores(files), args.holdout)
    write_dataset(ds, args.out)
    log.info("dataset: %d pieces, %d measures (%d held out), tone vocab %d->%d, %d chords",
             len(ds.pieces), ds.measure_count, args.holdout, ds.tone_vocab.raw_size,
             ds.tone_vocab.padded_size, len(ds.chord_vocab))
    return 0


def cmd_train_vqvae(args) -> int:
    ds = read_dataset(args.data)
    cfg = VqVaeConfig(height=ds.tone_vocab.padded_size, width=ds.timesteps, voices=ds.voices,
                      channels=tuple(args.channels), beta=args.beta)
    model = VqVae.init(cfg, seed=args.seed)
    result = train_vqvae(model, ds.rolls, TrainConfig(args.steps, args.batch, args.seed,
                                                      log_every=args.log_every),
                         train_indices=ds.train_indices())
    extra = {"train": {"steps": args.steps, "batch": args.batch, "seed": args.seed}, **_vocab_echo(ds)}
    save_checkpoint(vqvae_checkpoint(result.model, result.optimizer, extra), args.out)
    if args.loss_csv:
        _write_loss_csv(args.loss_csv, result.losses)
    log.info("saved vqvae checkpoint to %s", args.out)
    return 0


def cmd_encode(args) -> int:
    ds = read_dataset(args.data)
    ckpt = load_checkpoint(args.vqvae, expect_kind="vqvae")
    _require(ckpt.config["tone_fingerprint"], ds.tone_fingerprint(), "dataset tone vocab")
    model = vqvae_from_checkpoint(ckpt)
    grids = encode_grids(model, ds.rolls)
    write_codes(CodeFile(ds.tone_fingerprint(), grids), args.out)
    log.info("encoded %d measures to %s", len(grids), args.out)
    return 0


def _spatial_maps(ds, grids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    prev = ds.previous_in_piece()
    maps = np.where(prev[:, None, None] >= 0, grids[np.maximum(prev, 0)], 0)
    return maps, prev >= 0


def cmd_train_prior(args) -> int:
    ds = read_dataset(args.data)
    codes = read_codes(args.codes)
    _require(ds.tone_fingerprint(), codes.tone_fingerprint, "code file tone vocab")
    if len(codes.grids) != ds.measure_count:
        raise VocabMismatch(f"{len(codes.grids)} code grids for {ds.measure_count} measures")
    grids = codes.grids
    triplets = ds.triplet_ids()
    if args.spatial:
        maps, present = _spatial_maps(ds, grids)
        cond = CondSpec(triplets, maps, present)
    else:
        cond = CondSpec(triplets)
    cfg = PriorConfig(codebook_size=args.codebook_size, chord_vocab_size=len(ds.chord_vocab),
                      grid_shape=grids.shape[1:], spatial=args.spatial)
    model = PriorModel.init(cfg, seed=args.seed)
    result = train_prior(model, grids, cond, PriorTrainConfig(args.steps, args.batch, args.seed,
                                                              log_every=args.log_every),
                         train_indices=ds.train_indices())
    extra = {"train": {"steps": args.steps, "batch": args.batch, "seed": args.seed}, **_vocab_echo(ds)}
    save_checkpoint(prior_checkpoint(result.model, result.optimizer, extra), args.out)
    if args.loss_csv:
        _write_loss_csv(args.loss_csv, result.losses)
    log.info("saved prior checkpoint to %s", args.out)
    return 0


def _parse_chords(text: str, vocab: ChordVocab) -> list[int]:
    labels = [c.strip() for c in text.split(",") if c.strip()]
    if len(labels) < 3:
        raise ValueError("--chords needs at least 3 labels (boundary repeats included)")
    unknown = [c for c in labels if c not in vocab]
    if unknown:
        raise VocabMismatch(f"unknown chord label(s) {','.join(unknown)}; "
                            f"vocabulary: {','.join(vocab.labels)}")
    return [vocab[c] for c in labels]


def cmd_generate(args) -> int:
    vq_ckpt = load_checkpoint(args.vqvae, expect_kind="vqvae")
    pr_ckpt = load_checkpoint(args.prior, expect_kind="prior")
    _require(vq_ckpt.config["tone_fingerprint"], pr_ckpt.config["tone_fingerprint"],
             "prior tone vocab")
    if args.data:
        ds = read_dataset(args.data)
        _require(pr_ckpt.config["chord_fingerprint"], ds.chord_fingerprint(), "dataset chord vocab")
        _require(vq_ckpt.config["tone_fingerprint"], ds.tone_fingerprint(), "dataset tone vocab")
    vocab = ChordVocab.from_text(pr_ckpt.config["chord_vocab"])
    if fingerprint(vocab.to_text()) != pr_ckpt.config["chord_fingerprint"]:
        raise VocabMismatch("prior chord vocab does not match its recorded fingerprint")
    ids = _parse_chords(args.chords, vocab)

    vq = vqvae_from_checkpoint(vq_ckpt)
    prior = prior_from_checkpoint(pr_ckpt)
    if tuple(prior.config.grid_shape) != vq.config.latent_shape:
        raise VocabMismatch(f"prior grid {prior.config.grid_shape} vs vqvae latent {vq.config.latent_shape}")
    use_spatial = prior.config.spatial if args.spatial is None else args.spatial
    if use_spatial and not prior.config.spatial:
        log.warning("prior was trained without spatial maps; --spatial on uses untrained weights")
    grids = generate_sequence(prior, ids, use_spatial, args.temperature, args.seed)
    rolls = reconstruct(vq, np.stack(grids))
    pitches = vq_ckpt.config["tone_pitches"]
    rolls[:, len(pitches):] = 0  # padding rows carry no pitch
    atomic_write(args.out_midi, rolls_to_midi(rolls, pitches))
    if args.out_ppm:
        atomic_write(args.out_ppm, roll_to_ppm(rolls))
    if args.out_codes:
        write_codes(CodeFile(vq_ckpt.config["tone_fingerprint"], np.stack(grids)), args.out_codes)
    log.info("generated %d measures (%d timesteps)", len(rolls), len(rolls) * rolls.shape[2])
    return 0


def cmd_holdout_chords(args) -> int:
    ds = read_dataset(args.data)
    labels = [ds.chord_vocab.label(i) for i in ds.holdout_chords]
    if labels:
        labels = [labels[0]] + labels + [labels[-1]]
    print(",".join(labels))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recomposer", description="Chord-conditioned measure recomposition.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic four-voice kern corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pieces", type=int, default=2)
    s.add_argument("--measures", type=int, default=4)
    s.add_argument("--transpose", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-dataset", help="parse kern files into a dataset file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--holdout", type=int, required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train-vqvae", help="train the measure autoencoder")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--channels", type=_int_list, default=[64, 128, 256, 256])
    s.add_argument("--beta", type=float, default=0.25)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--loss-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vqvae)

    s = sub.add_parser("encode", help="encode every measure to a code grid")
    s.add_argument("--data", required=True)
    s.add_argument("--vqvae", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train-prior", help="train the conditional code prior")
    s.add_argument("--codes", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--batch", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spatial", type=_on_off, default=False, metavar="on|off")
    s.add_argument("--codebook-size", type=int, default=256)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--loss-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("generate", help="sample measures over a chord sequence")
    s.add_argument("--vqvae", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--chords", required=True, help="comma-separated labels incl. boundary repeats")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spatial", type=_on_off, default=None, metavar="on|off",
                   help="default: whatever the prior was trained with")
    s.add_argument("--data", help="optional dataset to cross-check vocabularies against")
    s.add_argument("--out-midi", required=True)
    s.add_argument("--out-ppm")
    s.add_argument("--out-codes")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("holdout-chords", help="print the held-out chord sequence with boundary repeats")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_holdout_chords)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "temperature", 0) is not None and getattr(args, "temperature", 0) < 0:
        parser.error("--temperature must be >= 0")
    try:
        return args.func(args)
    except VocabMismatch as exc:
        print(f"error: VocabMismatch: {exc}", file=sys.stderr)
        return EXIT_VOCAB
    except (OSError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
