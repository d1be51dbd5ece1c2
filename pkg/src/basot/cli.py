"""Command-line entry point.

Subcommands: serialize, score, synth, train, eval, grad-check, attention.
Exit codes: 0 success, 2 user/data error, 3 internal failure. Every command
that writes artifacts drops a manifest.json next to them (atomic rename).
``BASOT_THREADS`` caps the worker pool used for per-session fan-out.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import BasotError, InvalidArgumentError
from .losses import LossWeights
from .metrics import (
    EditCounts,
    cer_counts,
    boundary_confusion,
    flags_from_sot_tokens,
    ud_cer,
)
from .model import (
    ModelConfig,
    TrainState,
    build_model,
    grad_check,
    greedy_decode,
    load_checkpoint,
    prepare_sample,
    reformat_to_sot,
    save_checkpoint,
    train_step,
)
from .model.config import config_from_dict
from .model.training import probe_attention_mass
from .model.vocab import Vocab
from .serialize import (
    make_asr_and_scd_targets,
    parse_sot_hypothesis,
    serialize_sot,
    serialize_tsot,
    write_trn,
    read_trn,
)
from .synthdata import (
    SynthSpec,
    gen_session,
    load_spec,
    make_templates,
    read_features,
    render,
    write_features,
)
from .transcripts import Session, load_sessions, save_sessions

TRAIN_FIELDS = {
    "lr": 0.1,
    "momentum": 0.9,
    "clip_norm": 5.0,
    "epochs": 10,
    "batch_size": 8,
    "probe_size": 8,
    "lambda1": 0.2,
    "lambda2": 0.2,
    "alpha1": 0.2,
    "alpha2": 0.1,
}


def thread_count() -> int:
    env = os.environ.get("BASOT_THREADS", "")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidArgumentError(f"BASOT_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise InvalidArgumentError("BASOT_THREADS must be >= 1")
        return n
    return min(4, os.cpu_count() or 1)


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def write_manifest(
    dir_or_path,
    command: str,
    seed: Optional[int],
    inputs: Sequence[str],
    outputs: Sequence[str],
    config_hash: str = "",
    started: float = 0.0,
) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_time_s": round(time.time() - started, 3) if started else 0.0,
    }
    if os.path.isdir(dir_or_path):
        path = os.path.join(dir_or_path, "manifest.json")
    else:
        path = f"{dir_or_path}.manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _hash_config(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# serialize

def cmd_serialize(args) -> int:
    started = time.time()
    sessions = load_sessions(args.input)
    outputs = []
    if args.mode in ("sot", "tsot"):
        fn = serialize_sot if args.mode == "sot" else serialize_tsot
        entries = [(s.id, list(fn(s).tokens)) for s in sessions]
        write_trn(entries, args.out)
        outputs.append(args.out)
    else:  # asr_scd
        asr_entries = []
        scd_lines = []
        for s in sessions:
            asr, scd = make_asr_and_scd_targets(s)
            asr_entries.append((s.id, list(asr.tokens)))
            scd_lines.append(f"{s.id}\t{''.join(str(f) for f in scd.flags)}\n")
        write_trn(asr_entries, f"{args.out}.asr")
        with open(f"{args.out}.scd", "w", encoding="utf-8") as f:
            f.writelines(scd_lines)
        outputs = [f"{args.out}.asr", f"{args.out}.scd"]
    write_manifest(args.out, "serialize", None, [args.input], outputs, started=started)
    return 0


# ---------------------------------------------------------------------------
# score

def _score_one(
    session: Session, hyp_tokens: List[str], search_cap: int
) -> Tuple[str, dict, EditCounts, int, int]:
    c = cer_counts(hyp_tokens, session)
    segs = parse_sot_hypothesis(hyp_tokens)
    u = ud_cer(segs, session, search_cap)
    entry = {
        "cer": c.rate,
        "ud_cer": u.rate,
        "ud_cer_exact": u.exact,
        "assignment": list(u.assignment),
        "counts": {"cer": c.as_dict(), "ud_cer": u.counts.as_dict()},
    }
    return session.id, entry, c, u.counts.total, u.counts.ref_len


def cmd_score(args) -> int:
    started = time.time()
    sessions = {s.id: s for s in load_sessions(args.ref)}
    hyps = read_trn(args.hyp)
    seen = set()
    for utt_id, _ in hyps:
        if utt_id not in sessions:
            raise InvalidArgumentError(f"hypothesis id {utt_id!r} not in reference")
        if utt_id in seen:
            raise InvalidArgumentError(f"duplicate hypothesis id {utt_id!r}")
        seen.add(utt_id)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        rows = list(
            pool.map(
                lambda pair: _score_one(sessions[pair[0]], pair[1], args.search_cap),
                hyps,
            )
        )
    rows.sort(key=lambda r: r[0])
    per_utt = {sid: entry for sid, entry, _, _, _ in rows}
    cer_total = EditCounts()
    ud_err = 0
    ud_ref = 0
    for _, _, c, ue, ur in rows:
        cer_total = cer_total + c
        ud_err += ue
        ud_ref += ur
    report = {
        "num_sessions": len(rows),
        "cer": cer_total.rate if cer_total.ref_len else None,
        "ud_cer": (ud_err / ud_ref) if ud_ref else None,
        "counts": {"cer": cer_total.as_dict()},
        "per_utt": per_utt,
    }
    atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "score", None, [args.ref, args.hyp], [args.out], started=started)
    return 0


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    started = time.time()
    spec = load_spec(args.spec)
    os.makedirs(args.out, exist_ok=True)
    feat_dir = os.path.join(args.out, "features")
    templates = make_templates(spec)
    sessions = []
    for i in range(args.count):
        s = gen_session(spec, i)
        feats, _, _ = render(s, templates, spec, subsample=args.subsample)
        write_features(feat_dir, s.id, feats)
        sessions.append(s)
    sess_path = os.path.join(args.out, "sessions.jsonl")
    save_sessions(sessions, sess_path)
    write_manifest(
        args.out,
        "synth",
        spec.seed,
        [args.spec],
        [sess_path, feat_dir],
        config_hash=_hash_config(spec.__dict__),
        started=started,
    )
    return 0


# ---------------------------------------------------------------------------
# train

@dataclass
class TrainSettings:
    lr: float = TRAIN_FIELDS["lr"]
    momentum: float = TRAIN_FIELDS["momentum"]
    clip_norm: float = TRAIN_FIELDS["clip_norm"]
    epochs: int = TRAIN_FIELDS["epochs"]
    batch_size: int = TRAIN_FIELDS["batch_size"]
    probe_size: int = TRAIN_FIELDS["probe_size"]
    weights: LossWeights = field(default_factory=LossWeights)


def _split_config(raw: dict) -> Tuple[dict, dict]:
    model_keys = set(ModelConfig.__dataclass_fields__)
    model_part = {k: v for k, v in raw.items() if k in model_keys}
    train_part = {k: v for k, v in raw.items() if k not in model_keys}
    unknown = set(train_part) - set(TRAIN_FIELDS)
    if unknown:
        raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
    return model_part, train_part


def _corpus_vocab(sessions: Sequence[Session]) -> Vocab:
    symbols = set()
    for s in sessions:
        for u in s.utterances:
            symbols.update(t.text for t in u.tokens)
    return Vocab.from_symbols(sorted(symbols))


def _load_corpus(data_dir) -> Tuple[List[Session], dict]:
    sess_path = os.path.join(data_dir, "sessions.jsonl")
    if not os.path.exists(sess_path):
        raise InvalidArgumentError(f"no sessions.jsonl under {data_dir}")
    sessions = load_sessions(sess_path)
    feat_dir = os.path.join(data_dir, "features")
    feats = {s.id: read_features(feat_dir, s.id) for s in sessions}
    return sessions, feats


def cmd_train(args) -> int:
    started = time.time()
    with open(args.config, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{args.config}: malformed JSON: {e}") from e
    model_part, train_part = _split_config(raw)
    sessions, feats = _load_corpus(args.data)
    vocab = _corpus_vocab(sessions)
    if "vocab_size" not in model_part:
        model_part["vocab_size"] = vocab.size
    elif model_part["vocab_size"] != vocab.size:
        raise InvalidArgumentError(
            f"config vocab_size {model_part['vocab_size']} != corpus vocab {vocab.size}"
        )
    if args.baseline_sot:
        model_part["baseline_sot"] = True
        model_part.pop("bc_layers", None)
    if args.bc_mode:
        model_part["bc_mode"] = args.bc_mode
    if args.seed is not None:
        model_part["seed"] = args.seed
    cfg = config_from_dict(model_part)

    merged = dict(TRAIN_FIELDS, **train_part)
    if args.epochs is not None:
        merged["epochs"] = args.epochs
    if args.lr is not None:
        merged["lr"] = args.lr
    if args.batch_size is not None:
        merged["batch_size"] = args.batch_size
    if args.baseline_sot:
        merged["lambda2"] = 0.0
        merged["alpha1"] = 0.0
        merged["alpha2"] = 0.0
    weights = LossWeights(
        lambda1=merged["lambda1"],
        lambda2=merged["lambda2"],
        alpha1=merged["alpha1"],
        alpha2=merged["alpha2"],
    )
    settings = TrainSettings(
        lr=float(merged["lr"]),
        momentum=float(merged["momentum"]),
        clip_norm=float(merged["clip_norm"]),
        epochs=int(merged["epochs"]),
        batch_size=int(merged["batch_size"]),
        probe_size=int(merged["probe_size"]),
        weights=weights,
    )
    if settings.epochs < 1 or settings.batch_size < 1:
        raise InvalidArgumentError("epochs and batch_size must be >= 1")

    model = build_model(cfg, vocab)
    samples = [prepare_sample(s, feats[s.id], model) for s in sessions]
    probe = samples[: settings.probe_size]
    state = TrainState(
        model=model, lr=settings.lr, momentum=settings.momentum, clip_norm=settings.clip_norm
    )
    os.makedirs(args.out, exist_ok=True)
    resolved = dict(model_part, vocab_size=vocab.size, **{k: merged[k] for k in TRAIN_FIELDS})
    atomic_write_text(
        os.path.join(args.out, "resolved_config.json"),
        json.dumps(resolved, indent=2, sort_keys=True) + "\n",
    )

    step_cols = [
        "epoch", "step", "att_ce", "sot_ctc", "tsot_ctc", "scd", "bc",
        "total", "used", "skipped", "pos_weight", "grad_norm",
    ]
    epoch_cols = ["epoch", "att_ce", "sot_ctc", "tsot_ctc", "scd", "bc", "total", "wall_s"]
    steps_path = os.path.join(args.out, "losses.csv")
    epochs_path = os.path.join(args.out, "epochs.csv")
    mass_path = os.path.join(args.out, "attention_mass.csv")
    ckpt_path = os.path.join(args.out, "ckpt_final.bin")
    order_rng = np.random.default_rng([cfg.seed, 4])

    with open(steps_path, "w", newline="", encoding="utf-8") as sf, open(
        epochs_path, "w", newline="", encoding="utf-8"
    ) as ef, open(mass_path, "w", newline="", encoding="utf-8") as mf:
        sw = csv.writer(sf)
        ew = csv.writer(ef)
        mw = csv.writer(mf)
        sw.writerow(step_cols)
        ew.writerow(epoch_cols)
        mw.writerow(["epoch", "in_span_mass"])
        step_idx = 0
        for epoch in range(1, settings.epochs + 1):
            t_ep = time.time()
            order = order_rng.permutation(len(samples))
            sums = dict.fromkeys(("att_ce", "sot_ctc", "tsot_ctc", "scd", "bc", "total"), 0.0)
            n_batches = 0
            for lo in range(0, len(order), settings.batch_size):
                batch = [samples[i] for i in order[lo : lo + settings.batch_size]]
                state, br = train_step(
                    state, batch, weights, use_ots=args.use_ots, freeze_asr=args.freeze_asr
                )
                step_idx += 1
                # repr round-trips float64 exactly; downstream checks re-read these
                sw.writerow(
                    [epoch, step_idx]
                    + [repr(float(br[c])) for c in step_cols[2:8]]
                    + [int(br["used"]), int(br["skipped"]), f"{br['pos_weight']:.6g}",
                       f"{br.get('grad_norm', 0.0):.6g}"]
                )
                for k in sums:
                    sums[k] += br[k]
                n_batches += 1
            mass = probe_attention_mass(model, probe)
            mw.writerow([epoch, f"{mass:.12g}"])
            mf.flush()
            ew.writerow(
                [epoch]
                + [f"{sums[k] / max(1, n_batches):.12g}" for k in epoch_cols[1:7]]
                + [f"{time.time() - t_ep:.3f}"]
            )
            ef.flush()
            sf.flush()
            if args.save_every:
                save_checkpoint(os.path.join(args.out, f"ckpt_epoch{epoch}.bin"), model)

    save_checkpoint(
        ckpt_path,
        model,
        {"epochs": settings.epochs, "skipped_total": state.skipped, "steps": state.step},
    )
    write_manifest(
        args.out,
        "train",
        cfg.seed,
        [args.config, args.data],
        [steps_path, epochs_path, mass_path, ckpt_path],
        config_hash=_hash_config(resolved),
        started=started,
    )
    return 0


# ---------------------------------------------------------------------------
# eval

def _eval_one(model, session: Session, feats: np.ndarray, max_len: int):
    tokens, flags, _ = greedy_decode(model, feats, max_len)
    if model.cfg.baseline_sot:
        hyp_sot = list(tokens)  # "<sc>" arrives inline
        content, bflags = flags_from_sot_tokens(tokens)
    else:
        hyp_sot = reformat_to_sot(tokens, flags)
        content, bflags = list(tokens), list(flags)
        if bflags:
            bflags[-1] = 0  # a change flag on the final token separates nothing
    asr, scd = make_asr_and_scd_targets(session)
    c = cer_counts(hyp_sot, session)
    u = ud_cer(parse_sot_hypothesis(hyp_sot), session)
    tp, fp, fn = boundary_confusion(content, bflags, list(asr.tokens), list(scd.flags))
    return session.id, hyp_sot, c, u, (tp, fp, fn)


def cmd_eval(args) -> int:
    started = time.time()
    model, _meta = load_checkpoint(args.ckpt)
    sessions, feats = _load_corpus(args.data)
    os.makedirs(args.out, exist_ok=True)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        rows = list(
            pool.map(lambda s: _eval_one(model, s, feats[s.id], args.max_len), sessions)
        )
    rows.sort(key=lambda r: r[0])
    hyp_path = os.path.join(args.out, "hyp.trn")
    write_trn([(sid, hyp) for sid, hyp, _, _, _ in rows], hyp_path)
    cer_total = EditCounts()
    ud_err = ud_ref = 0
    tp = fp = fn = 0
    per_utt = {}
    for sid, _, c, u, (a, b, d) in rows:
        cer_total = cer_total + c
        ud_err += u.counts.total
        ud_ref += u.counts.ref_len
        tp += a
        fp += b
        fn += d
        per_utt[sid] = {"cer": c.rate, "ud_cer": u.rate, "ud_cer_exact": u.exact}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    report = {
        "num_sessions": len(rows),
        "cer": cer_total.rate if cer_total.ref_len else None,
        "ud_cer": (ud_err / ud_ref) if ud_ref else None,
        "scd": {"precision": precision, "recall": recall, "f1": f1},
        "counts": {"cer": cer_total.as_dict(), "boundary": {"tp": tp, "fp": fp, "fn": fn}},
        "per_utt": per_utt,
    }
    report_path = os.path.join(args.out, "report.json")
    atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(
        args.out, "eval", None, [args.ckpt, args.data], [hyp_path, report_path], started=started
    )
    return 0


# ---------------------------------------------------------------------------
# grad-check

def cmd_grad_check(args) -> int:
    started = time.time()
    spec = SynthSpec(
        vocab_size=6,
        template_frames=4,
        feature_dim=3,
        speakers=2,
        utterances_per_speaker=1,
        overlap=0.3,
        noise_std=0.05,
        seed=args.seed,
    )
    templates = make_templates(spec)
    session = gen_session(spec, 0)
    feats, _, _ = render(session, templates, spec, subsample=2)
    vocab = Vocab.from_symbols(spec.symbols())
    cfg = ModelConfig(
        feature_dim=spec.feature_dim,
        model_dim=8,
        heads=2,
        enc_layers_stage1=1,
        enc_layers_stage2=1,
        dec_layers=1,
        scd_layers=1,
        vocab_size=vocab.size,
        subsample=2,
        seed=args.seed,
    )
    model = build_model(cfg, vocab)
    sample = prepare_sample(session, feats, model)
    report = grad_check(
        model,
        sample,
        LossWeights(),
        use_ots=args.use_ots,
        coords_per_param=args.coords,
        seed=args.seed,
    )
    worst = max(report.values())
    for term, err in sorted(report.items()):
        print(f"{term:10s} max_rel_err {err:.3e}")
    print(f"worst {worst:.3e} ({'ok' if worst <= 1e-4 else 'SUSPECT'})")
    if args.out:
        atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_manifest(args.out, "grad-check", args.seed, [], [args.out], started=started)
    return 0


# ---------------------------------------------------------------------------
# attention

def cmd_attention(args) -> int:
    started = time.time()
    model, _meta = load_checkpoint(args.ckpt)
    sessions, feats = _load_corpus(args.data)
    by_id = {s.id: s for s in sessions}
    if args.session not in by_id:
        raise InvalidArgumentError(f"session {args.session!r} not in {args.data}")
    session = by_id[args.session]
    sample = prepare_sample(session, feats[session.id], model)
    dec_input = np.concatenate(([model.vocab.eos_id], sample.dec_teacher[:-1]))
    g = model.build_graph(sample.features, dec_input)
    n_rows = len(sample.pos_to_utt)
    stack = np.stack([t.data[:n_rows] for t in g.attn.values()])
    avg = stack.mean(axis=0)  # over monitored sites
    texts = model.vocab.decode(sample.dec_teacher[:n_rows])
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["token", "utt", *(f"t{t}" for t in range(avg.shape[1]))])
        for row, ((n, _), text) in enumerate(zip(sample.pos_to_utt, texts)):
            w.writerow([text, n, *(f"{v:.12g}" for v in avg[row])])
    masses = [
        float(avg[row, a : b + 1].sum())
        for row, (n, _) in enumerate(sample.pos_to_utt)
        for a, b in [sample.spans[n]]
    ]
    sidecar = {
        "session": session.id,
        "monitored_sites": list(g.attn),
        "spans": [list(sp) for sp in sample.spans.spans],
        "in_span_mass": float(np.mean(masses)) if masses else None,
    }
    atomic_write_text(f"{args.out}.spans.json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    write_manifest(
        args.out,
        "attention",
        None,
        [args.ckpt, args.data],
        [args.out, f"{args.out}.spans.json"],
        started=started,
    )
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="basot", description=__doc__)
    p.add_argument("--version", action="version", version=f"basot {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serialize", help="sessions.jsonl -> target text files")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--mode", choices=("sot", "tsot", "asr_scd"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_serialize)

    s = sub.add_parser("score", help="score a hypothesis file against reference sessions")
    s.add_argument("--ref", required=True, help="reference sessions.jsonl")
    s.add_argument("--hyp", required=True, help="hypothesis .trn")
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--search-cap", type=int, default=10**6)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", required=True, help="synth spec JSON")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subsample", type=int, default=4, help="encoder frame rate divisor")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a synth corpus")
    s.add_argument("--config", required=True, help="model+train config JSON")
    s.add_argument("--data", required=True, help="corpus dir (synth output)")
    s.add_argument("--out", required=True)
    s.add_argument("--use-ots", action="store_true", help="span-guided boundary loss")
    s.add_argument("--bc-mode", choices=("complement", "literal", "deficit"), default=None)
    s.add_argument("--freeze-asr", action="store_true", help="update only the SCD branch")
    s.add_argument("--baseline-sot", action="store_true", help="ablation: plain SOT decoder")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--save-every", action="store_true", help="checkpoint each epoch")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="decode a corpus and score it")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-len", type=int, default=64)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference check on a tiny model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--use-ots", action="store_true")
    s.add_argument("--coords", type=int, default=2, help="coordinates checked per tensor")
    s.add_argument("--out", default=None, help="optional report JSON path")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("attention", help="dump head-averaged cross-attention to CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--session", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BasotError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 0
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
