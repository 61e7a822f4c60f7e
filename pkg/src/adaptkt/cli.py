"""Command-line pipeline driver.

One subcommand per pipeline stage keeps ablations as command compositions:
the no-transfer baseline is `train` followed by `eval`, the full pipeline
inserts `adapt` and `finetune` between them.  Every command takes --config
(TOML, see config.py) plus overrides for seed, output directory, variant,
and checkpoint path, and leaves artifacts (checkpoints, history CSVs,
reports, figures) under the output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Each failure prints a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import adapt as ad
from . import autoenc as ae_mod
from . import checkpoint as cp
from . import evaluation as ev
from . import ktmodel as kt
from . import report as rp
from .config import (
    VARIANT_FLAGS,
    VARIANTS,
    RunConfig,
    VariantFlags,
    load_config,
    single,
)
from .corpus import (
    ROLE_SOURCE,
    ROLE_TARGET_UNLABELED,
    DomainDataset,
    SyntheticSpec,
    Vocab,
    build_vocab,
    generate_synthetic_detailed,
    load_interactions,
    load_question_bank,
    read_embedding_file,
    split_labeled,
    write_interactions,
    write_question_bank,
)
from .errors import AdaptKTError, DataError, NumericError, UsageError

AE_CKPT = "ae.aktc"
MODEL_CKPT = "model.aktc"
ADAPTED_CKPT = "adapted.aktc"
FINAL_CKPT = "final.aktc"

PRETRAIN_HISTORY_COLUMNS = ("epoch", "source_error", "target_error",
                            "selected", "regularizer")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="override [run] seed")
    common.add_argument("--out", metavar="DIR", default=None,
                        help="override [run] out_dir")
    common.add_argument("--checkpoint", metavar="PATH", default=None,
                        help="checkpoint to read or write")
    common.add_argument("--variant", choices=VARIANTS, default=None,
                        help="override [run] variant")

    parser = _Parser(prog="adaptkt",
                     description="domain-adaptive knowledge tracing pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, help_text in (
        ("gen-synthetic", "write a synthetic two-domain dataset"),
        ("pretrain-ae", "pretrain the question autoencoder and select instances"),
        ("train", "train the tracer on the selected source data"),
        ("adapt", "align source and target state distributions"),
        ("finetune", "re-fit the output layer on labeled target data"),
        ("eval", "score a checkpoint on the held-out target split"),
        ("report", "aggregate runs into tables, sweeps, and figures"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.out is not None:
        run = replace(run, out_dir=args.out)
    if args.variant is not None:
        run = replace(run, variant=args.variant)
    return replace(cfg, run=run)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_paths(cfg: RunConfig, out: Path) -> dict[str, Path]:
    p = cfg.paths
    return {
        "source_questions": Path(p.source_questions or out / "source_questions.jsonl"),
        "source_interactions": Path(p.source_interactions or out / "source_interactions.jsonl"),
        "target_questions": Path(p.target_questions or out / "target_questions.jsonl"),
        "target_interactions": Path(p.target_interactions or out / "target_interactions.jsonl"),
    }


def _synthetic_spec(cfg: RunConfig, seed: int) -> SyntheticSpec:
    c = cfg.corpus
    return SyntheticSpec(
        concepts=c.concepts, questions=c.questions, students=c.students,
        seq_len=c.seq_len, guess=c.guess, slip=c.slip, shift=c.shift,
        seed=seed, target_students=c.target_students or None,
    )


def _load_domains(cfg: RunConfig, out: Path, vocab: Vocab | None = None
                  ) -> tuple[DomainDataset, DomainDataset, Vocab]:
    """Read both domains; build the vocab from the question files unless a
    checkpoint already fixed one."""
    paths = _data_paths(cfg, out)
    for key, path in paths.items():
        if not path.exists():
            raise UsageError(f"{key} file {path} does not exist "
                             f"(run gen-synthetic or set [paths])")
    if vocab is None:
        vocab = build_vocab([paths["source_questions"], paths["target_questions"]])
    max_len = cfg.corpus.max_text_len
    src_bank = load_question_bank(paths["source_questions"], vocab, max_len)
    tgt_bank = load_question_bank(paths["target_questions"], vocab, max_len)
    source = DomainDataset(
        src_bank,
        tuple(load_interactions(paths["source_interactions"], src_bank)),
        ROLE_SOURCE,
    )
    target = DomainDataset(
        tgt_bank,
        tuple(load_interactions(paths["target_interactions"], tgt_bank)),
        ROLE_TARGET_UNLABELED,
    )
    return source, target, vocab


def _init_model(cfg: RunConfig, flags: VariantFlags, source: DomainDataset,
                target: DomainDataset, ae: ae_mod.AutoencoderParams | None,
                seed: int) -> kt.Model:
    d_a = cfg.ktmodel.d_a if flags.adapt_layer else None
    if flags.text:
        if ae is None:
            raise UsageError("text variants need a pretrained autoencoder checkpoint")
        params = kt.init_kt(cfg.d_q, n_out=len(source.bank), d_h=cfg.ktmodel.d_h,
                            d_a=d_a, slip_guess=flags.slip_guess, seed=seed)
        return kt.Model(kt=params, ae=ae, text_mode=True,
                        in_qids=(), out_qids=source.bank.qids)
    in_qids = tuple(source.bank.qids) + tuple(
        q for q in target.bank.qids if q not in set(source.bank.qids))
    params = kt.init_kt(cfg.d_q, n_out=len(source.bank), d_h=cfg.ktmodel.d_h,
                        d_a=d_a, slip_guess=flags.slip_guess, seed=seed,
                        id_questions=len(in_qids))
    return kt.Model(kt=params, ae=None, text_mode=False,
                    in_qids=in_qids, out_qids=source.bank.qids)


def _adapt_cfg(cfg: RunConfig, seed: int, epochs: int | None = None) -> ad.AdaptConfig:
    a = cfg.adapt
    return ad.AdaptConfig(
        gamma=single("[adapt] gamma", a.gamma),
        lam=single("[autoenc] lam", cfg.autoenc.lam),
        batch_size=a.batch_size,
        mmd_cap=a.mmd_cap,
        mmd_steps=a.mmd_steps,
        epochs=a.epochs if epochs is None else epochs,
        lr=a.lr,
        seed=seed,
    )


def _kernel(cfg: RunConfig) -> ad.KernelSpec:
    bandwidth = cfg.adapt.bandwidth or None
    return ad.KernelSpec(cfg.adapt.kernel, bandwidth)


def _load_model_checkpoint(path: Path) -> tuple[kt.Model, Vocab | None,
                                                ae_mod.SelectionMask | None]:
    ckpt = cp.load(str(path))
    model = cp.model_from_checkpoint(ckpt)
    vocab = cp.vocab_from_checkpoint(ckpt)
    got = cp.mask_from_checkpoint(ckpt)
    return model, vocab, got[0] if got else None


def _save_model(path: Path, model: kt.Model, vocab: Vocab | None,
                mask: ae_mod.SelectionMask | None, mask_qids: tuple[str, ...]) -> None:
    ckpt = cp.checkpoint_from_model(model, vocab=vocab, mask=mask,
                                    mask_qids=mask_qids if mask else ())
    cp.save(str(path), ckpt)


def _require_single_lam(cfg: RunConfig) -> float:
    return single("[autoenc] lam", cfg.autoenc.lam)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    spec = _synthetic_spec(cfg, cfg.run.seed)
    source, target, vocab, _, _ = generate_synthetic_detailed(spec)
    paths = _data_paths(cfg, out)
    write_question_bank(paths["source_questions"], source.bank, vocab)
    write_interactions(paths["source_interactions"], source.sequences)
    write_question_bank(paths["target_questions"], target.bank, vocab)
    write_interactions(paths["target_interactions"], target.sequences)
    print(f"wrote 2 domains ({len(source.bank)} + {len(target.bank)} questions, "
          f"{len(source.sequences)} + {len(target.sequences)} sequences) to {out}")


def cmd_pretrain_ae(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    source, target, vocab = _load_domains(cfg, out)
    a = cfg.autoenc
    pretrained = None
    if cfg.paths.embeddings:
        pretrained = read_embedding_file(cfg.paths.embeddings)
    ae = ae_mod.init_autoencoder(vocab.size, d_embed=a.d_embed,
                                 enc_hidden=a.enc_hidden, seed=cfg.run.seed,
                                 pretrained=pretrained, vocab=vocab)
    lam = _require_single_lam(cfg)
    ae, mask, history = ae_mod.pretrain_selective(
        ae, source.bank, target.bank, lam=lam, epochs=a.epochs, lr=a.lr,
        batch_size=a.batch_size, seed=cfg.run.seed,
    )
    ckpt_path = Path(args.checkpoint or out / AE_CKPT)
    cp.save(str(ckpt_path), cp.checkpoint_from_autoencoder(
        ae, vocab, mask=mask, mask_qids=source.bank.qids))
    history_path = out / "pretrain_history.csv"
    with history_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRETRAIN_HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row.epoch, f"{row.source_error:.10g}",
                             f"{row.target_error:.10g}", row.selected,
                             f"{row.regularizer:.10g}"])
    print(f"pretrained autoencoder, selected {mask.selected_count} of "
          f"{len(source.bank)} source questions -> {ckpt_path}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    flags = VARIANT_FLAGS[cfg.run.variant]
    ae = None
    vocab = None
    mask = None
    mask_qids: tuple[str, ...] = ()
    if flags.text:
        ae_ckpt = cp.load(str(args.checkpoint or out / AE_CKPT))
        ae = cp.autoencoder_from_checkpoint(ae_ckpt)
        vocab = cp.vocab_from_checkpoint(ae_ckpt)
        got = cp.mask_from_checkpoint(ae_ckpt)
        if got is not None:
            mask, mask_qids = got
    source, target, vocab = _load_domains(cfg, out, vocab)
    if mask is not None and mask_qids and mask_qids != tuple(source.bank.qids):
        raise DataError(
            "the checkpoint's selection mask was made for a different "
            "source bank (qid ordering does not match)")
    if mask is not None and len(mask.u) != len(source.bank):
        raise DataError(
            f"selection mask covers {len(mask.u)} questions but the source "
            f"bank has {len(source.bank)}")
    if mask is None:
        mask = ae_mod.SelectionMask.all_ones(len(source.bank),
                                             _require_single_lam(cfg))
    model = _init_model(cfg, flags, source, target, ae, cfg.run.seed)
    history = ad.train_source(model, source, mask, _adapt_cfg(cfg, cfg.run.seed))
    model_path = out / MODEL_CKPT
    _save_model(model_path, model, vocab if flags.text else None,
                mask, source.bank.qids)
    ad.write_history(history, out / "train_history.csv")
    final = history[-1].kt_loss if history else math.nan
    print(f"trained {cfg.run.variant} on {mask.selected_count} selected "
          f"questions, final loss/pair {final:.4f} -> {model_path}")


def cmd_adapt(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    flags = VARIANT_FLAGS[cfg.run.variant]
    if not flags.transfer:
        raise UsageError(f"variant {cfg.run.variant} has no transfer stage")
    model, vocab, mask = _load_model_checkpoint(
        Path(args.checkpoint or out / MODEL_CKPT))
    source, target, vocab = _load_domains(cfg, out, vocab)
    if mask is None:
        mask = ae_mod.SelectionMask.all_ones(len(source.bank),
                                             _require_single_lam(cfg))
    _, unlabeled = split_labeled(target, cfg.corpus.labeled_fraction,
                                 cfg.run.seed)
    acfg = _adapt_cfg(cfg, cfg.run.seed)
    before = ad.domain_mmd2(model, source, unlabeled, _kernel(cfg),
                            cap=acfg.mmd_cap, seed=acfg.seed)
    history = ad.adapt(model, source, mask, unlabeled, _kernel(cfg), acfg)
    after = ad.domain_mmd2(model, source, unlabeled, _kernel(cfg),
                           cap=acfg.mmd_cap, seed=acfg.seed)
    path = out / ADAPTED_CKPT
    _save_model(path, model, vocab if model.text_mode else None,
                mask, source.bank.qids)
    ad.write_history(history, out / "adapt_history.csv")
    print(f"adapted over {len(history)} epochs, discrepancy "
          f"{before:.6f} -> {after:.6f} -> {path}")


def cmd_finetune(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    flags = VARIANT_FLAGS[cfg.run.variant]
    if not flags.transfer:
        raise UsageError(f"variant {cfg.run.variant} has no transfer stage")
    model, vocab, mask = _load_model_checkpoint(
        Path(args.checkpoint or out / ADAPTED_CKPT))
    source, target, vocab = _load_domains(cfg, out, vocab)
    labeled, _ = split_labeled(target, cfg.corpus.labeled_fraction, cfg.run.seed)
    acfg = _adapt_cfg(cfg, cfg.run.seed, epochs=cfg.adapt.finetune_epochs)
    history = ad.finetune(model, labeled, acfg, unfreeze=cfg.adapt.unfreeze)
    path = out / FINAL_CKPT
    _save_model(path, model, vocab if model.text_mode else None, mask,
                source.bank.qids)
    ad.write_history(history, out / "finetune_history.csv")
    final = history[-1].kt_loss if history else math.nan
    print(f"finetuned output layer on {len(labeled.sequences)} labeled "
          f"sequences, final loss/pair {final:.4f} -> {path}")


def cmd_eval(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    ckpt_path = Path(args.checkpoint or out / FINAL_CKPT)
    model, vocab, _ = _load_model_checkpoint(ckpt_path)
    _, target, _ = _load_domains(cfg, out, vocab)
    _, unlabeled = split_labeled(target, cfg.corpus.labeled_fraction,
                                 cfg.run.seed)
    out_index = None
    if tuple(model.out_qids) != tuple(target.bank.qids):
        out_index = ad.remap_output(target.bank, model.kt.n_out)
    rep = ev.evaluate(model, unlabeled, threshold=cfg.eval.threshold,
                      run_fingerprint=cfg.fingerprint(), out_index=out_index)
    doc = {
        "model": cfg.run.variant,
        "dataset": "target",
        "task": "source->target",
        "s_dim": cfg.ktmodel.d_h if model.kt.has_slip_guess else 0,
        "adapt_dim": model.kt.d_a or 0,
        "auc": rep.auc,
        "f1": rep.f1,
        "threshold": rep.threshold,
        "pairs": rep.pairs,
        "fingerprint": rep.fingerprint,
        "remapped": out_index is not None,
    }
    eval_path = out / f"eval_{cfg.run.variant}.json"
    eval_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    print(f"{cfg.run.variant}: auc={rep.auc:.4f} f1={rep.f1:.4f} "
          f"pairs={rep.pairs} -> {eval_path}")


def _sweep_pipeline_auc(cfg: RunConfig, flags: VariantFlags, lam: float,
                        gamma: float, seed: int) -> float:
    """One end-to-end desk-scale run, returning held-out target AUC.

    With an empty selection the source stages are skipped and the model
    goes into fine-tuning untrained, which is the degenerate low end a
    sweep is meant to expose.
    """
    spec = _synthetic_spec(cfg, seed)
    source, target, vocab, _, _ = generate_synthetic_detailed(spec)
    labeled, unlabeled = split_labeled(target, cfg.corpus.labeled_fraction, seed)
    a = cfg.autoenc
    ae = None
    mask = ae_mod.SelectionMask.all_ones(len(source.bank), lam)
    if flags.text:
        ae = ae_mod.init_autoencoder(vocab.size, d_embed=a.d_embed,
                                     enc_hidden=a.enc_hidden, seed=seed)
        ae, mask, _ = ae_mod.pretrain_selective(
            ae, source.bank, target.bank, lam=lam, epochs=a.epochs,
            lr=a.lr, batch_size=a.batch_size, seed=seed)
    model = _init_model(cfg, flags, source, target, ae, seed)
    acfg = ad.AdaptConfig(gamma=gamma, lam=lam, batch_size=cfg.adapt.batch_size,
                          mmd_cap=cfg.adapt.mmd_cap, mmd_steps=cfg.adapt.mmd_steps,
                          epochs=cfg.adapt.epochs, lr=cfg.adapt.lr, seed=seed)
    if mask.selected_count > 0:
        ad.train_source(model, source, mask, acfg)
        if flags.transfer:
            ad.adapt(model, source, mask, unlabeled, _kernel(cfg), acfg)
    if flags.transfer:
        ftcfg = ad.AdaptConfig(gamma=0.0, lam=lam, batch_size=cfg.adapt.batch_size,
                               epochs=cfg.adapt.finetune_epochs, lr=cfg.adapt.lr,
                               seed=seed)
        ad.finetune(model, labeled, ftcfg, unfreeze=cfg.adapt.unfreeze)
        return ev.evaluate(model, unlabeled, threshold=cfg.eval.threshold).auc
    out_index = None
    if tuple(model.out_qids) != tuple(target.bank.qids):
        out_index = ad.remap_output(target.bank, model.kt.n_out)
    return ev.evaluate(model, unlabeled, threshold=cfg.eval.threshold,
                       out_index=out_index).auc


def cmd_report(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    wrote = []

    results: list[rp.ResultRow] = []
    transfer_auc: list[rp.TransferRow] = []
    transfer_f1: list[rp.TransferRow] = []
    for path in sorted(out.glob("eval_*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        results.append(rp.ResultRow(doc["model"], doc["s_dim"], doc["dataset"],
                                    doc["auc"], doc["f1"]))
        transfer_auc.append(rp.TransferRow(doc["model"], doc["adapt_dim"],
                                           doc["task"], doc["auc"]))
        transfer_f1.append(rp.TransferRow(doc["model"], doc["adapt_dim"],
                                          doc["task"], doc["f1"]))
    if results:
        rp.write_results_csv(out / "results.csv", results)
        rp.write_json(out / "results.json", cfg.fingerprint(), results)
        rp.write_transfer_csv(out / "transfer_auc.csv", transfer_auc)
        rp.write_transfer_csv(out / "transfer_f1.csv", transfer_f1)
        rp.plot_comparison(out / "comparison.png", results)
        wrote += ["results.csv", "results.json", "transfer_auc.csv",
                  "transfer_f1.csv", "comparison.png"]

    for history_path in sorted(out.glob("*_history.csv")):
        try:
            history = rp.read_history_csv(history_path)
        except UsageError:
            continue
        if history:
            png = history_path.with_suffix(".png")
            rp.plot_history(png, history)
            wrote.append(png.name)

    flags = VARIANT_FLAGS[cfg.run.variant]
    sweeps = []
    if len(cfg.autoenc.lam) > 1:
        sweeps.append(("lam", cfg.autoenc.lam))
    if len(cfg.adapt.gamma) > 1:
        sweeps.append(("gamma", cfg.adapt.gamma))
    if len(sweeps) > 1:
        raise UsageError("config sweeps lam and gamma at once; sweep one at a time")
    for param, values in sweeps:
        if param == "lam" and not flags.text:
            raise UsageError("a lam sweep needs a text variant (selection "
                             "is driven by reconstruction error)")
        points = []
        for value in values:
            lam = value if param == "lam" else _require_single_lam(cfg)
            gamma = value if param == "gamma" else single("[adapt] gamma",
                                                          cfg.adapt.gamma)
            auc = _sweep_pipeline_auc(cfg, flags, lam, gamma, cfg.run.seed)
            points.append(rp.SweepPoint(value, auc))
            print(f"sweep {param}={value}: auc={auc:.4f}")
        rp.write_sweep_csv(out / f"sweep_{param}.csv", param, points)
        rp.plot_sweep(out / f"sweep_{param}.png", param, points)
        wrote += [f"sweep_{param}.csv", f"sweep_{param}.png"]

    if not wrote:
        print(f"nothing to report in {out} (no eval_*.json, histories, or sweeps)")
    else:
        print(f"report: wrote {', '.join(wrote)} in {out}")


_COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain-ae": cmd_pretrain_ae,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("no command given (see adaptkt --help)")
        cfg = _load_cfg(args)
        _COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except AdaptKTError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
