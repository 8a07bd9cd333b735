#!/usr/bin/env python3
"""
Ligne de commande du moteur LMF.

Usage:
    python cli.py train --data textures/ --out model.lmf --steps 2000 --seed 0
    python cli.py upsample --model model.lmf --in img.ppm --scale 3.5 --out sr.ppm
    python cli.py build-table --model model.lmf --data textures/ --tau 2e-5 --out table.s2m
    python cli.py cmsr --model model.lmf --table table.s2m --in img.ppm --scale 4 --out sr.ppm
    python cli.py profile --dims-preset lm-liif --h 48 --w 48 --scale 4
    python cli.py eval --ref hr.ppm --test sr.ppm
    python cli.py compare-cmsr --model model.lmf --table table.s2m --in img.ppm --scale 4
"""

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from cmsr import (COMPOSITE_MODES, cmsr_render, load_table, measure_bucket_errors, min_scale_curve,
                  save_table, table_from_errors)
from config import get_config
from cost_model import (DIMS_PRESETS, PUBLISHED_DIMS, CostReport, instrumented_count, macs_lmf,
                        macs_lmf_at, macs_vanilla, macs_vanilla_at)
from decoder import output_size, upsample, upsample_c2f, upsample_vanilla
from errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, LmfError
from image_io import load_dataset, read_image, write_image
from models import (DECODERS, PRESETS, attach_ablation_mlps, build_model, build_vanilla_mlp,
                    c2f_dims, dims_from_model, load_model, save_model, vanilla_dims)
from trainer import TrainConfig, psnr, save_loss_curve, train
from validation import (collect, validate_choice, validate_existing_path, validate_integer,
                        validate_positive_number, validate_scale_list)

logger = logging.getLogger(__name__)


def _usage(errors: List[str]) -> int:
    for e in errors:
        print(f"Erreur: {e}", file=sys.stderr)
    return EXIT_USAGE


# =====================================================
# COMMANDES
# =====================================================

def cmd_train(args, cfg) -> int:
    (data, steps, seed, patch, scale_min, scale_max, preset, decoder), errors = collect(
        validate_existing_path(args.data, '--data', directory=True),
        validate_integer(args.steps, '--steps', min_val=1),
        validate_integer(args.seed, '--seed'),
        validate_integer(args.patch, '--patch', min_val=4),
        validate_positive_number(args.scale_min, '--scale-min', min_val=1),
        validate_positive_number(args.scale_max, '--scale-max', min_val=1),
        validate_choice(args.preset or cfg.MODEL_PRESET, list(PRESETS), '--preset'),
        validate_choice(args.decoder, DECODERS, '--decoder'),
    )
    if errors:
        return _usage(errors)

    dataset = load_dataset(data)
    train_cfg = TrainConfig.from_config(cfg, steps=steps, seed=seed, patch=patch,
                                        scale_min=scale_min, scale_max=scale_max, lr=args.lr,
                                        decoder=decoder)
    model = build_model(preset, channels=dataset[0].shape[2], seed=train_cfg.seed)
    print(f"Entrainement {preset} ({decoder}): {train_cfg.steps} etapes...")
    model, curve = train(model, dataset, train_cfg)
    save_model(model, args.out)
    if args.loss_csv:
        save_loss_curve(curve, args.loss_csv)
    if len(curve):
        print(f"Termine: perte {curve['loss'].iloc[0]:.5f} -> {curve['loss'].iloc[-1]:.5f}")
    return EXIT_OK


def _ablation_decoder(model, name: str, seed: int):
    """MLP vanilla ou c2f du fichier modele, sinon initialises (non entraines)."""
    if attach_ablation_mlps(model, name, seed):
        logger.warning(f"[CLI] pas de MLP {name} dans le modele: initialisation aleatoire "
                       f"(entrainer avec train --decoder {name})")
    if name == 'vanilla':
        return model.vanilla_mlp
    return model.c2f_latent, model.c2f_render


def cmd_upsample(args, cfg) -> int:
    (model_path, in_path, scale, decoder), errors = collect(
        validate_existing_path(args.model, '--model'),
        validate_existing_path(args.input, '--in'),
        validate_positive_number(args.scale, '--scale', min_val=1),
        validate_choice(args.decoder, DECODERS, '--decoder'),
    )
    if errors:
        return _usage(errors)

    model = load_model(model_path)
    img = read_image(in_path)
    h, w = img.shape[:2]
    out_h, out_w = output_size(h, w, scale)
    workers = args.workers or cfg.WORKERS

    if decoder == 'lmf':
        analytic = macs_lmf_at(dims_from_model(model), h, w, out_h, out_w)
        run = lambda c: upsample(model, img, scale, c, workers, cfg.RENDER_CHUNK)
    elif decoder == 'vanilla':
        theta = _ablation_decoder(model, 'vanilla', cfg.SEED)
        analytic = macs_vanilla_at(vanilla_dims(theta), out_h, out_w)
        run = lambda c: upsample_vanilla(model, img, scale, theta, c, workers)
    else:
        theta_l, theta_r = _ablation_decoder(model, 'c2f', cfg.SEED)
        analytic = macs_lmf_at(c2f_dims(theta_l, theta_r), h, w, out_h, out_w)
        run = lambda c: upsample_c2f(model, img, scale, theta_l, theta_r, c, workers)

    report, out = instrumented_count(run, analytic, scale, h, w)
    write_image(out, args.out)
    print(f"{h}x{w} -> {out_h}x{out_w} ({decoder}): {args.out}")
    if args.count_macs:
        print(report.to_lines())
    return EXIT_OK


def cmd_build_table(args, cfg) -> int:
    (model_path, data, tau, scales, u), errors = collect(
        validate_existing_path(args.model, '--model'),
        validate_existing_path(args.data, '--data', directory=True),
        validate_positive_number(args.tau if args.tau is not None else cfg.CMSR_TAU, '--tau',
                                 min_val=0, strict=True),
        validate_scale_list(args.scales or ','.join(f"{s:g}" for s in cfg.CMSR_SCALES)),
        validate_positive_number(args.u if args.u is not None else cfg.CMSR_U, '--u',
                                 min_val=0, max_val=1, strict=True),
    )
    if errors:
        return _usage(errors)

    model = load_model(model_path)
    images = load_dataset(data)
    bucket_errors = measure_bucket_errors(model, images, scales, u, args.workers or cfg.WORKERS,
                                          cfg.RENDER_CHUNK)
    table = table_from_errors(bucket_errors, tau)
    save_table(table, args.out)
    print(table.to_frame().to_string(index=False))
    if args.curve_csv:
        min_scale_curve(bucket_errors, tau).to_csv(args.curve_csv, index=False)
        print(f"Courbe echelle minimale: {args.curve_csv}")
    return EXIT_OK


def _cmsr_args(args):
    return collect(
        validate_existing_path(args.model, '--model'),
        validate_existing_path(args.table, '--table'),
        validate_existing_path(args.input, '--in'),
        validate_positive_number(args.scale, '--scale', min_val=1),
        validate_choice(args.composite, COMPOSITE_MODES, '--composite'),
    )


def cmd_cmsr(args, cfg) -> int:
    (model_path, table_path, in_path, scale, composite), errors = _cmsr_args(args)
    if errors:
        return _usage(errors)

    model = load_model(model_path)
    table = load_table(table_path)
    img = read_image(in_path)
    workers = args.workers or cfg.WORKERS
    report, (out, stats) = instrumented_count(
        lambda c: cmsr_render(model, img, scale, table, composite, c, workers, cfg.RENDER_CHUNK,
                              return_stats=True),
        None, scale, img.shape[0], img.shape[1])
    write_image(out, args.out)
    print(f"CMSR s={scale:g}: {stats.rendered_total}/{stats.full_pixels} pixels rendus -> {args.out}")
    if args.count_macs:
        print(report.to_lines())
    return EXIT_OK


def cmd_compare_cmsr(args, cfg) -> int:
    (model_path, table_path, in_path, scale, composite), errors = _cmsr_args(args)
    if errors:
        return _usage(errors)

    model = load_model(model_path)
    table = load_table(table_path)
    img = read_image(in_path)
    workers = args.workers or cfg.WORKERS
    full_report, full = instrumented_count(
        lambda c: upsample(model, img, scale, c, workers, cfg.RENDER_CHUNK))
    cmsr_report, (out, stats) = instrumented_count(
        lambda c: cmsr_render(model, img, scale, table, composite, c, workers, cfg.RENDER_CHUNK,
                              return_stats=True))

    value = psnr(out, full)
    print(f"PSNR(cmsr, rendu complet): {'inf' if np.isinf(value) else f'{value:.3f}'} dB")
    print(f"Pixels rendus: {stats.rendered_total} / {stats.full_pixels}")
    for s, n in sorted(stats.rendered.items()):
        print(f"  s={s:g}: {n}")
    saving = 1.0 - cmsr_report.render / full_report.render if full_report.render else 0.0
    print(f"MACs rendu: {cmsr_report.render:,} / {full_report.render:,} (economie {100 * saving:.2f}%)")
    print(f"MACs total: {cmsr_report.instrumented_total:,} / {full_report.instrumented_total:,}")
    return EXIT_OK


def _profile_run(preset: str, h: int, w: int, s: float, seed: int):
    """Execute le decodeur aux dimensions publiees sur une image aleatoire."""
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3))
    model = build_model('lm-liif', seed=seed)
    if DIMS_PRESETS[preset] == 'vanilla':
        theta = build_vanilla_mlp(model.encoder.out_depth, seed=seed)
        return lambda c: upsample_vanilla(model, img, s, theta, c)
    return lambda c: upsample(model, img, s, c)


def cmd_profile(args, cfg) -> int:
    (preset, h, w, scale), errors = collect(
        validate_choice(args.dims_preset, list(DIMS_PRESETS), '--dims-preset'),
        validate_integer(args.h, '--h', min_val=1),
        validate_integer(args.w, '--w', min_val=1),
        validate_positive_number(args.scale, '--scale', min_val=1),
    )
    if errors:
        return _usage(errors)

    dims = PUBLISHED_DIMS
    vanilla = DIMS_PRESETS[preset] == 'vanilla'
    out_h, out_w = output_size(h, w, scale)
    if float(scale).is_integer():
        formula = macs_vanilla if vanilla else macs_lmf
        analytic = formula(dims, h, w, int(scale))
    elif vanilla:
        analytic = macs_vanilla_at(dims, out_h, out_w)
    else:
        analytic = macs_lmf_at(dims, h, w, out_h, out_w)

    if args.execute:
        report, _ = instrumented_count(_profile_run(preset, h, w, scale, cfg.SEED), analytic,
                                       scale, h, w)
    else:
        report = CostReport(analytic, None, scale=scale, h=h, w=w)
    report.extra['preset'] = preset
    if args.format == 'kv':
        print(report.to_keyvalue(), end='')
    else:
        print(report.to_lines())
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    (ref_path, test_path), errors = collect(
        validate_existing_path(args.ref, '--ref'),
        validate_existing_path(args.test, '--test'),
    )
    if errors:
        return _usage(errors)
    ref = read_image(ref_path)
    test = read_image(test_path)
    value = psnr(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    print(f"psnr={'inf' if np.isinf(value) else f'{value:.6f}'}")
    print(f"mse={mse:.10g}")
    return EXIT_OK


# =====================================================
# PARSEUR
# =====================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Super-resolution a echelle arbitraire (LMF)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='Entrainer un modele')
    p.add_argument('--data', required=True, help='Dossier d\'images HR')
    p.add_argument('--out', required=True, help='Fichier modele')
    p.add_argument('--steps', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--patch', type=int)
    p.add_argument('--scale-min', type=float)
    p.add_argument('--scale-max', type=float)
    p.add_argument('--lr', type=float)
    p.add_argument('--preset', help='lm-liif | desk | tiny')
    p.add_argument('--decoder', default='lmf', help='lmf | vanilla | c2f')
    p.add_argument('--loss-csv', help='Courbe de perte (CSV step,loss,lr)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('upsample', help='Agrandir une image')
    p.add_argument('--model', required=True)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--scale', type=float, required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--decoder', default='lmf')
    p.add_argument('--count-macs', action='store_true')
    p.add_argument('--workers', type=int)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser('build-table', help='Construire une table Scale2Mods')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--tau', type=float)
    p.add_argument('--scales')
    p.add_argument('--u', type=float)
    p.add_argument('--out', required=True)
    p.add_argument('--curve-csv', help='Echelle minimale par seau (CSV mean,pixels,min_scale)')
    p.add_argument('--workers', type=int)
    p.set_defaults(func=cmd_build_table)

    for name, func, helptext in (('cmsr', cmd_cmsr, 'Rendu multi-echelle controlable'),
                                 ('compare-cmsr', cmd_compare_cmsr, 'Comparer CMSR au rendu complet')):
        p = sub.add_parser(name, help=helptext)
        p.add_argument('--model', required=True)
        p.add_argument('--table', required=True)
        p.add_argument('--in', dest='input', required=True)
        p.add_argument('--scale', type=float, required=True)
        p.add_argument('--composite', default='chain')
        p.add_argument('--workers', type=int)
        if name == 'cmsr':
            p.add_argument('--out', required=True)
            p.add_argument('--count-macs', action='store_true')
        p.set_defaults(func=func)

    p = sub.add_parser('profile', help='Nombre de multiplications des decodeurs')
    p.add_argument('--dims-preset', required=True)
    p.add_argument('--h', type=int, required=True)
    p.add_argument('--w', type=int, required=True)
    p.add_argument('--scale', type=float, required=True)
    p.add_argument('--execute', action='store_true', help='Executer et compter')
    p.add_argument('--format', choices=('text', 'kv'), default='text')
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser('eval', help='PSNR et MSE entre deux images')
    p.add_argument('--ref', required=True)
    p.add_argument('--test', required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    cfg = get_config()
    logging.basicConfig(
        level=getattr(logging, str(cfg.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, cfg)
    except LmfError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        print(f"Erreur: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Erreur: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
