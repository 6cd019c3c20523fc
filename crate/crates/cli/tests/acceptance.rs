//! Acceptance gate. Every criterion prints one PASS/FAIL line; the process
//! fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use attriqa::attribute_model::{
    attribute_prob, check_simplex, distortion_loss, extract_attribute_probs, simplex_weights,
    train_distortion_model, AttributeFile, AttributeRegistry, DistortionModel, EmbeddingSource, ModelConfig,
    ProbabilityTable, TrainSchedule, TrainingSet, THETA,
};
use attriqa::datagen::{
    generate, load_manifest, split_by_source, write_procedural_sources, GeneratorConfig, ManifestRecord,
};
use attriqa::diffcore::layers::{mlp_block, multi_head_attention, AttentionWeights};
use attriqa::diffcore::{
    bce_term, fd_check, fd_check_input, randn, Adam, FdConfig, Grads, Mode, ParamStore, Tape, Tensor,
    Var,
};
use attriqa::digest::file_sha256;
use attriqa::encoder::{patchify, unpatchify, PromptMode, TuneMode, VitConfig};
use attriqa::imaging::{DistortionType, Image, RandomStream};
use attriqa::metrics::{interval_accuracy, plcc, srcc, strength_rmse, IntervalScheme, StrengthMatrix};
use attriqa::regressor::{train_regressor, Regressor, RegressorConfig, RegressorSchedule};
use attriqa::saliency::input_gradient;
use rand::{Rng, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

const THREE: [DistortionType; 3] = [
    DistortionType::GaussianBlur,
    DistortionType::ImpulseNoise,
    DistortionType::ContrastScale,
];

// criterion thresholds
const COMPLEMENT_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;
const SPOT_TOL: f64 = 1e-12;
const FD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_INSTANCES: u64 = 100;
const CHI2_MIN_P: f64 = 0.01;
const MIN_ACCURACY: f64 = 0.85;
const MAX_RMSE: f64 = 0.12;
const MAX_TRAIN_SECS: f64 = 600.0;
const MIN_SRCC: f64 = 0.90;
const MIN_PLCC: f64 = 0.90;
const MAX_REG_SECS: f64 = 120.0;
const MAX_SRCC_DROP: f64 = 0.15;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn math_core() -> Outcome {
    let mut rng = RandomStream::seed_from_u64(1);
    let mut worst_complement: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.gen_range(1..32);
        let mut v = || (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (e, a, b) = (v(), v(), v());
        let p = attribute_prob(&e, &a, &b).map_err(e2s)?;
        let q = attribute_prob(&e, &b, &a).map_err(e2s)?;
        worst_complement = worst_complement.max((p + q - 1.0).abs());
    }
    check(worst_complement <= COMPLEMENT_TOL, format!("complement error {worst_complement:e}"))?;

    // simplex after optimizer steps on the raw weights
    let mut store = ParamStore::new();
    let theta = store.insert(THETA, "w", Tensor::zeros(&[3, 5])).map_err(e2s)?;
    let mut adam = Adam::new(&store);
    let mut worst_simplex: f64 = 0.0;
    for step in 0..200 {
        let mut grads = Grads::zeros_like(&store);
        let mut tape = Tape::new(&store, Mode::Train);
        let t = tape.param(theta);
        let w = tape.softmax_rows(t);
        let r = tape.constant(randn(3, 5, 1.0, &mut rng));
        let y = tape.mul(w, r).map_err(e2s)?;
        let l = tape.mean(y);
        tape.backward(l).map_err(e2s)?;
        tape.accumulate_param_grads(&mut grads).map_err(e2s)?;
        adam.step(&mut store, &grads, 0.05 * (1.0 + step as f64 / 50.0)).map_err(e2s)?;
        for row in 0..3 {
            let w = simplex_weights(store.get(theta).row(row));
            check_simplex(&w).map_err(e2s)?;
            worst_simplex = worst_simplex.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_simplex <= SIMPLEX_TOL, format!("simplex error {worst_simplex:e}"))?;

    let ln2 = (bce_term(0.5, 1.0) - std::f64::consts::LN_2).abs();
    let ln09 = (bce_term(0.9, 1.0) + 0.9f64.ln()).abs();
    check(ln2 <= SPOT_TOL && ln09 <= SPOT_TOL, format!("spot values off by {ln2:e}, {ln09:e}"))?;
    let mut min_bce = f64::INFINITY;
    for _ in 0..10_000 {
        min_bce = min_bce.min(bce_term(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)));
    }
    check(min_bce >= 0.0, format!("negative loss {min_bce}"))?;
    // mean of the two spot terms
    let pred = StrengthMatrix::from_rows(&[vec![0.5, 0.9]]).map_err(e2s)?;
    let ones = StrengthMatrix::from_rows(&[vec![1.0, 1.0]]).map_err(e2s)?;
    let mean = distortion_loss(&pred, &ones).map_err(e2s)?;
    let mean_err = (mean - (std::f64::consts::LN_2 - 0.9f64.ln()) / 2.0).abs();
    check(mean_err <= SPOT_TOL, format!("matrix loss off by {mean_err:e}"))?;

    let mut worst_row: f64 = 0.0;
    let store = ParamStore::new();
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..40));
        let mut tape = Tape::new(&store, Mode::Eval);
        let x = tape.constant(randn(r, c, 20.0, &mut rng));
        let s = tape.softmax_rows(x);
        for row in 0..r {
            worst_row = worst_row.max((tape.value(s).row(row).iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_row <= 1e-12, format!("softmax row sum error {worst_row:e}"))?;
    Ok(format!(
        "complement {worst_complement:.1e}, simplex {worst_simplex:.1e}, ln2 {ln2:.1e}, -ln0.9 {ln09:.1e}, rows {worst_row:.1e}"
    ))
}

// ---------------------------------------------------------------- 2

type Build = fn(&mut Tape<'_>, Var, Var) -> attriqa::Result<Var>;

fn op_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |t, a, b| {
            let bt = t.reshape(b, &[4, 3])?;
            t.matmul(a, bt)
        }),
        ("matmul_nt", |t, a, b| t.matmul_nt(a, b)),
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("add_row", |t, a, b| {
            let row = t.slice_rows(b, 0, 1)?;
            t.add_row(a, row)
        }),
        ("scale", |t, a, _| Ok(t.scale(a, 2.3))),
        ("layer_norm", |t, a, b| {
            let g = t.slice_rows(b, 0, 1)?;
            let be = t.slice_rows(b, 1, 2)?;
            t.layer_norm(a, g, be)
        }),
        ("softmax", |t, a, _| Ok(t.softmax_rows(a))),
        ("gelu", |t, a, _| Ok(t.gelu(a))),
        ("selu", |t, a, _| Ok(t.selu(a))),
        ("sigmoid", |t, a, _| Ok(t.sigmoid(a))),
        ("l2_normalize", |t, a, _| Ok(t.l2_normalize_rows(a))),
        ("concat_slice_rows", |t, a, b| {
            let c = t.concat_rows(&[a, b])?;
            t.slice_rows(c, 2, 5)
        }),
        ("concat_slice_cols", |t, a, b| {
            let c = t.concat_cols(&[a, b])?;
            t.slice_cols(c, 1, 6)
        }),
        ("sum_rows", |t, a, _| Ok(t.sum_rows(a))),
        ("mean", |t, a, _| Ok(t.mean(a))),
        ("bce_mean", |t, a, _| {
            let p = t.sigmoid(a);
            t.bce_mean(p, &Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) % 6) as f64 / 5.0))
        }),
        ("mse_mean", |t, a, _| t.mse_mean(a, &Tensor::full(&[3, 4], -0.2))),
        ("attention", |t, a, b| {
            let mut p = |n: &str| t.param_by_name(n);
            let w = AttentionWeights {
                wq: p("wq")?,
                bq: p("bq")?,
                wk: p("wk")?,
                bk: p("bk")?,
                wv: p("wv")?,
                bv: p("bv")?,
                wo: p("wo")?,
                bo: p("bo")?,
            };
            let x = t.add(a, b)?;
            multi_head_attention(t, x, &w, 2)
        }),
        ("mlp_block", |t, a, _| {
            let w1 = t.param_by_name("w1")?;
            let b1 = t.param_by_name("b1")?;
            let w2 = t.param_by_name("w2")?;
            let b2 = t.param_by_name("b2")?;
            mlp_block(t, a, w1, b1, w2, b2)
        }),
    ]
}

fn op_gradients() -> Result<f64, String> {
    let mut rng = RandomStream::seed_from_u64(5);
    let mut store = ParamStore::new();
    let mut put = |store: &mut ParamStore, n: &str, g: &str, r: usize, c: usize, s: f64| {
        store.insert(n, g, randn(r, c, s, &mut rng)).map(|_| ())
    };
    put(&mut store, "a", "in", 3, 4, 1.0).map_err(e2s)?;
    put(&mut store, "b", "in", 3, 4, 1.0).map_err(e2s)?;
    for n in ["wq", "wk", "wv", "wo"] {
        put(&mut store, n, "attn", 4, 4, 0.6).map_err(e2s)?;
    }
    for n in ["bq", "bk", "bv", "bo"] {
        put(&mut store, n, "attn", 1, 4, 0.3).map_err(e2s)?;
    }
    put(&mut store, "w1", "mlp", 4, 8, 0.6).map_err(e2s)?;
    put(&mut store, "b1", "mlp", 1, 8, 0.3).map_err(e2s)?;
    put(&mut store, "w2", "mlp", 8, 4, 0.6).map_err(e2s)?;
    put(&mut store, "b2", "mlp", 1, 4, 0.3).map_err(e2s)?;
    let readout: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let mut worst: f64 = 0.0;
    for (name, build) in op_cases() {
        let eval = |s: &ParamStore, grads: Option<&mut Grads>| -> attriqa::Result<f64> {
            let mut t = Tape::new(s, Mode::Train);
            let a = t.param_by_name("a")?;
            let b = t.param_by_name("b")?;
            let y = build(&mut t, a, b)?;
            let (m, n) = (t.value(y).rows(), t.value(y).cols());
            let r = t.constant(Tensor::from_fn(m, n, |i, j| readout[(i * n + j) % 32]));
            let prod = t.mul(y, r)?;
            let l = t.mean(prod);
            if let Some(g) = grads {
                t.backward(l)?;
                t.accumulate_param_grads(g)?;
            }
            Ok(t.value(l).item())
        };
        let mut grads = Grads::zeros_like(&store);
        eval(&store, Some(&mut grads)).map_err(e2s)?;
        let report = fd_check(&store, &grads, |s| eval(s, None), &FdConfig::default()).map_err(e2s)?;
        check(report.passed(), format!("op {name}: {:.2e}", report.max_rel_error))?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn tiny_model(tune: TuneMode, size: usize, seed: u64) -> attriqa::Result<(DistortionModel, AttributeRegistry)> {
    let reg = AttributeRegistry::build(&AttributeFile::shipped().select(&THREE)?, EmbeddingSource::Toy { dim: 16 })?;
    let vit = VitConfig {
        patch_size: 8,
        d_model: 16,
        layers: 2,
        heads: 2,
        embed_dim: 16,
        mlp_ratio: 2,
        channels: 3,
        image_size: size,
        prompt_mode: tune.prompt_mode(),
        prompt_len: if tune == TuneMode::Full { 0 } else { 2 },
    };
    let config = ModelConfig {
        vit,
        tune,
        ..ModelConfig::default()
    };
    let model = DistortionModel::new(config, &reg, seed)?;
    Ok((model, reg))
}

fn texture(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = RandomStream::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    Image::new(h, w, 3, data).expect("valid image")
}

fn chain_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let img = texture(16, 16, 3);
    let target = Tensor::matrix(3, 1, vec![0.2, 0.0, 0.8]).map_err(e2s)?;
    for tune in [TuneMode::Shallow, TuneMode::Deep, TuneMode::Full] {
        let (mut model, _) = tiny_model(tune, 16, 2).map_err(e2s)?;
        // leave the uniform start so the weight gradients are informative
        let id = model.params.id(THETA).map_err(e2s)?;
        let mut rng = RandomStream::seed_from_u64(9);
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let eval = |s: &ParamStore, grads: Option<&mut Grads>| -> attriqa::Result<f64> {
            let mut tape = Tape::new(s, Mode::Train);
            let f = model.record(&mut tape, &img, false)?;
            let l = tape.bce_mean(f.dist_probs, &target)?;
            if let Some(g) = grads {
                tape.backward(l)?;
                tape.accumulate_param_grads(g)?;
            }
            Ok(tape.value(l).item())
        };
        let mut grads = Grads::zeros_like(&model.params);
        eval(&model.params, Some(&mut grads)).map_err(e2s)?;
        let report = fd_check(&model.params, &grads, |s| eval(s, None), &FdConfig::default()).map_err(e2s)?;
        check(report.passed(), format!("{tune}: {:.2e}", report.max_rel_error))?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn regressor_gradients() -> Result<f64, String> {
    let cols: Vec<String> = (0..6).map(|i| format!("gaussian_blur/{i}")).collect();
    let reg = Regressor::new(
        RegressorConfig {
            hidden: [8, 8],
            dropout: 0.2,
        },
        cols,
        4,
    )
    .map_err(e2s)?;
    let mut rng = RandomStream::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let targets: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (_, grads) = reg
        .loss_and_grads(&rows, &targets, Mode::Eval, RandomStream::seed_from_u64(0))
        .map_err(e2s)?;
    let report = fd_check(
        &reg.params,
        &grads,
        |s| {
            let mut r = reg.clone();
            r.params = s.clone();
            r.loss_and_grads(&rows, &targets, Mode::Eval, RandomStream::seed_from_u64(0))
                .map(|(l, _)| l)
        },
        &FdConfig::default(),
    )
    .map_err(e2s)?;
    check(report.passed(), format!("regressor: {:.2e}", report.max_rel_error))?;
    Ok(report.max_rel_error)
}

fn saliency_gradients() -> Result<f64, String> {
    let (model, _) = tiny_model(TuneMode::Full, 16, 4).map_err(e2s)?;
    let img = texture(16, 16, 8);
    let (grad, _) = input_gradient(&model, &img, DistortionType::ImpulseNoise).map_err(e2s)?;
    // scatter pixel-layout gradients into the patch layout
    let base = patchify(&img, 8, 3).map_err(e2s)?;
    let slots = Tensor::matrix(base.rows(), base.cols(), (0..base.len()).map(|i| i as f64).collect()).map_err(e2s)?;
    let slot_of_pixel = unpatchify(&slots, 16, 16, 8, 3).map_err(e2s)?;
    let mut analytic = Tensor::zeros(base.shape());
    for (px, slot) in slot_of_pixel.iter().enumerate() {
        analytic.data_mut()[*slot as usize] = grad[px];
    }
    let prob = |patches: &Tensor| -> attriqa::Result<f64> {
        let mut tape = Tape::new(&model.params, Mode::Eval);
        let f = model.record_patches(&mut tape, patches.clone(), (2, 2), false)?;
        Ok(tape.value(f.dist_probs).data()[1])
    };
    let worst = fd_check_input(&base, &analytic, prob, &FdConfig::default()).map_err(e2s)?;
    check(worst <= FD_TOL, format!("saliency: {worst:.2e}"))?;
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let ops = op_gradients()?;
    let chain = chain_gradients()?;
    let reg = regressor_gradients()?;
    let sal = saliency_gradients()?;
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "max rel error: ops {ops:.1e}, prompt/full chain {chain:.1e}, regressor {reg:.1e}, saliency {sal:.1e} ({secs:.1}s)"
    ))
}

// ---------------------------------------------------------------- 3

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// 1-based rank with ties sharing the mean of the positions they occupy.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_level(p: f64, boundaries: &[f64]) -> usize {
    boundaries.iter().filter(|&&b| p >= b).count()
}

fn metric_oracles() -> Outcome {
    let scheme = IntervalScheme::new(5).map_err(e2s)?;
    let boundaries = scheme.boundaries();
    let expected = [0.1, 0.3, 0.5, 0.7, 0.9];
    check(
        boundaries.len() == 5 && boundaries.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-15),
        format!("boundaries {boundaries:?}"),
    )?;
    let mut worst: f64 = 0.0;
    for seed in 0..ORACLE_INSTANCES {
        let mut rng = RandomStream::seed_from_u64(1000 + seed);
        let n = rng.gen_range(3..60);
        // a coarse grid guarantees ties in every instance
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let p = plcc(&x, &y).map_err(e2s)?;
        let s = srcc(&x, &y).map_err(e2s)?;
        worst = worst
            .max((p - oracle_pearson(&x, &y)).abs())
            .max((s - oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y))).abs());

        let (rows, cols) = (rng.gen_range(1..20), rng.gen_range(1..4));
        let t: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| f64::from(rng.gen_range(0..=5u32)) / 5.0).collect())
            .collect();
        let q: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| {
                        if rng.gen_bool(0.2) {
                            expected[rng.gen_range(0..5)]
                        } else {
                            rng.gen_range(0.0..=1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let (tm, qm) = (
            StrengthMatrix::from_rows(&t).map_err(e2s)?,
            StrengthMatrix::from_rows(&q).map_err(e2s)?,
        );
        let cells: Vec<(f64, f64)> = q.iter().flatten().copied().zip(t.iter().flatten().copied()).collect();
        let rmse = (cells.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / cells.len() as f64).sqrt();
        let hits = cells
            .iter()
            .filter(|(p, t)| oracle_level(*p, &expected) == (t * 5.0).round() as usize)
            .count() as f64
            / cells.len() as f64;
        worst = worst
            .max((strength_rmse(&qm, &tm).map_err(e2s)? - rmse).abs())
            .max((interval_accuracy(&qm, &tm, scheme).map_err(e2s)? - hits).abs());
    }
    check(worst <= ORACLE_TOL, format!("oracle mismatch {worst:e}"))?;
    Ok(format!("{ORACLE_INSTANCES} instances, max deviation {worst:.1e}; boundaries {boundaries:?}"))
}

// ---------------------------------------------------------------- 4

fn generator_statistics(dir: &Path) -> Outcome {
    let sources = write_procedural_sources(dir.join("src"), 1000, 21, 16).map_err(e2s)?;
    let mut cfg = GeneratorConfig::new(sources, THREE.to_vec());
    cfg.master_seed = 4;
    let a = generate(&cfg, dir.join("a"), "acceptance").map_err(e2s)?;
    let records = &a.manifest.records;
    check(records.len() == 10_000, format!("{} records", records.len()))?;
    let mut per_source = std::collections::BTreeMap::<&str, u32>::new();
    for r in records {
        *per_source.entry(r.source_id.as_str()).or_default() += 1;
    }
    check(per_source.values().all(|&c| c == 10), "a source does not have exactly 10 variants")?;
    let dups = records
        .iter()
        .filter(|r| r.applied.iter().enumerate().any(|(i, x)| r.applied[..i].iter().any(|y| y.distortion == x.distortion)))
        .count();
    check(dups == 0, format!("{dups} records repeat a distortion"))?;
    let mut counts = [0f64; 3];
    for r in records {
        counts[r.applied.len() - 1] += 1.0;
    }
    let e = records.len() as f64 / 3.0;
    let stat: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    let p = 1.0 - ChiSquared::new(2.0).map_err(e2s)?.cdf(stat);
    check(p > CHI2_MIN_P, format!("K counts {counts:?}, chi2 {stat:.2}, p {p:.4}"))?;
    let b = generate(&cfg, dir.join("b"), "acceptance").map_err(e2s)?;
    let (ma, mb) = (
        std::fs::read(&a.manifest_path).map_err(e2s)?,
        std::fs::read(&b.manifest_path).map_err(e2s)?,
    );
    check(ma == mb, "manifests differ between reruns")?;
    Ok(format!("10 variants/source, K counts {counts:?}, chi2 {stat:.2} p {p:.3}, 0 duplicates, reruns identical"))
}

// ---------------------------------------------------------------- 5-7

struct Desk {
    model: DistortionModel,
    column_names: Vec<String>,
    records: Vec<ManifestRecord>,
    root: PathBuf,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    train_secs: f64,
}

fn desk_dataset(dir: &Path, sources: u32, source_seed: u64, master_seed: u64) -> attriqa::Result<Vec<ManifestRecord>> {
    let paths = write_procedural_sources(dir.join("src"), sources, source_seed, 64)?;
    let mut cfg = GeneratorConfig::new(paths, THREE.to_vec());
    cfg.master_seed = master_seed;
    cfg.synthetic_scores = true;
    Ok(generate(&cfg, dir.join("data"), "acceptance")?.manifest.records)
}

fn desk_model(dir: &Path) -> attriqa::Result<Desk> {
    let records = desk_dataset(dir, 200, 7, 11)?;
    let root = dir.join("data");
    let split = split_by_source(&records, 3);
    let reg = AttributeRegistry::build(&AttributeFile::shipped().select(&THREE)?, EmbeddingSource::Toy { dim: 64 })?;
    let vit = VitConfig {
        patch_size: 8,
        d_model: 64,
        layers: 2,
        heads: 2,
        embed_dim: 64,
        mlp_ratio: 2,
        channels: 3,
        image_size: 64,
        prompt_mode: PromptMode::None,
        prompt_len: 0,
    };
    let mut model = DistortionModel::new(
        ModelConfig {
            vit,
            tune: TuneMode::Full,
            ..ModelConfig::default()
        },
        &reg,
        1,
    )?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let t0 = Instant::now();
    let train = TrainingSet::from_records(&pick(&split.train), &root, &THREE, 64)?;
    let schedule = TrainSchedule {
        epochs: 90,
        warmup_epochs: 3,
        max_lr: 3e-3,
        min_lr: 0.0,
        batch_size: 32,
        weight_decay: 0.0,
        seed: 0,
        augment: true,
        crop: 0,
    };
    train_distortion_model(&mut model, &train, &schedule, |_, _, _| Ok(()))?;
    Ok(Desk {
        model,
        column_names: reg.column_names(),
        records,
        root,
        train: split.train,
        val: split.val,
        test: split.test,
        train_secs: t0.elapsed().as_secs_f64(),
    })
}

fn identification(desk: &Desk) -> Outcome {
    let recs: Vec<ManifestRecord> = desk.test.iter().map(|&i| desk.records[i].clone()).collect();
    let test = TrainingSet::from_records(&recs, &desk.root, &THREE, 64).map_err(e2s)?;
    let rows = test
        .images
        .iter()
        .map(|im| desk.model.predict(im).map(|p| p.dist_probs))
        .collect::<attriqa::Result<Vec<_>>>()
        .map_err(e2s)?;
    let pred = StrengthMatrix::from_rows(&rows).map_err(e2s)?;
    let acc = interval_accuracy(&pred, &test.targets, IntervalScheme::new(5).map_err(e2s)?).map_err(e2s)?;
    let rmse = strength_rmse(&pred, &test.targets).map_err(e2s)?;
    let line = format!(
        "held-out accuracy {acc:.3} (>= {MIN_ACCURACY}), RMSE {rmse:.4} (<= {MAX_RMSE}), {} test images, trained in {:.0}s",
        recs.len(),
        desk.train_secs
    );
    if acc >= MIN_ACCURACY && rmse <= MAX_RMSE && desk.train_secs <= MAX_TRAIN_SECS {
        Ok(line)
    } else {
        Err(line)
    }
}

fn probs_and_scores(
    model: &DistortionModel,
    columns: &[String],
    recs: &[ManifestRecord],
    root: &Path,
) -> attriqa::Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let table: ProbabilityTable = extract_attribute_probs(model, columns, recs, root)?;
    let scores = recs.iter().map(|r| r.score.unwrap_or_else(|| 1.0 - r.mean_applied_strength())).collect();
    Ok((table.rows, scores))
}

struct Regression {
    model: Regressor,
    srcc: f64,
    plcc: f64,
    secs: f64,
}

fn quality_regression(desk: &Desk) -> Result<Regression, String> {
    let part = |ix: &[usize]| ix.iter().map(|&i| desk.records[i].clone()).collect::<Vec<_>>();
    let probs = |ix: &[usize]| probs_and_scores(&desk.model, &desk.column_names, &part(ix), &desk.root).map_err(e2s);
    let (xtr, ytr) = probs(&desk.train)?;
    let (xva, yva) = probs(&desk.val)?;
    let (xte, yte) = probs(&desk.test)?;
    let t0 = Instant::now();
    let schedule = RegressorSchedule {
        seed: 1,
        ..RegressorSchedule::default()
    };
    let (model, _) = train_regressor(
        RegressorConfig::default(),
        desk.column_names.clone(),
        (&xtr, &ytr),
        Some((&xva, &yva)),
        &schedule,
    )
    .map_err(e2s)?;
    let secs = t0.elapsed().as_secs_f64();
    let pred: Vec<f64> = model.predict(&xte).map_err(e2s)?.iter().map(|p| p.score).collect();
    Ok(Regression {
        srcc: srcc(&pred, &yte).map_err(e2s)?,
        plcc: plcc(&pred, &yte).map_err(e2s)?,
        model,
        secs,
    })
}

fn judge_regression(r: &Regression) -> Outcome {
    let line = format!(
        "held-out SRCC {:.4} (>= {MIN_SRCC}), PLCC {:.4} (>= {MIN_PLCC}), regressor trained in {:.1}s",
        r.srcc, r.plcc, r.secs
    );
    if r.srcc >= MIN_SRCC && r.plcc >= MIN_PLCC && r.secs <= MAX_REG_SECS {
        Ok(line)
    } else {
        Err(line)
    }
}

fn disjoint_pool(desk: &Desk, reg: &Regressor, in_domain: f64, dir: &Path) -> Outcome {
    let recs = desk_dataset(dir, 40, 8, 12).map_err(e2s)?;
    let (x, y) = probs_and_scores(&desk.model, &desk.column_names, &recs, &dir.join("data")).map_err(e2s)?;
    let pred: Vec<f64> = reg.predict(&x).map_err(e2s)?.iter().map(|p| p.score).collect();
    let s = srcc(&pred, &y).map_err(e2s)?;
    let drop = in_domain - s;
    let line = format!("disjoint-pool SRCC {s:.4} vs held-out {in_domain:.4}, drop {drop:.4} (<= {MAX_SRCC_DROP})");
    if drop <= MAX_SRCC_DROP {
        Ok(line)
    } else {
        Err(line)
    }
}

// ---------------------------------------------------------------- 8

const PIPELINE_CONFIG: &str = r#"
seed = 5
split_seed = 2

[generate]
procedural = 30
procedural_size = 32
repeats = 4

[registry]
toy_dim = 16

[train_dist.model]
tune = "full"
[train_dist.model.vit]
patch_size = 8
d_model = 16
layers = 1
heads = 2
embed_dim = 16
mlp_ratio = 2
channels = 3
image_size = 32
prompt_mode = "none"
prompt_len = 0

[train_dist.schedule]
epochs = 2
warmup_epochs = 0
max_lr = 0.003
batch_size = 16

[train_reg.schedule]
epochs = 10
warmup_epochs = 1
max_lr = 0.001
batch_size = 16

[eval]
checkpoint = "dist/model.ckpt"
probabilities = "extract/probabilities.csv"
regressor = "reg/regressor.ckpt"

[saliency]
limit = 4
"#;

fn run_cli(dir: &Path, cmd: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attriqa"))
        .arg(cmd)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .output()
        .map_err(e2s)?;
    check(
        out.status.success(),
        format!("{cmd} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn json(path: &Path) -> Result<serde_json::Value, String> {
    serde_json::from_str(&std::fs::read_to_string(path).map_err(e2s)?).map_err(e2s)
}

fn pipeline(dir: &Path) -> Outcome {
    std::fs::write(dir.join("run.toml"), PIPELINE_CONFIG).map_err(e2s)?;
    for cmd in ["generate", "build-registry", "train-dist", "extract", "train-reg", "eval", "saliency"] {
        run_cli(dir, cmd)?;
    }
    let sha = |p: &str| file_sha256(dir.join(p)).map_err(e2s);
    let manifest = sha("data/manifest.jsonl")?;
    let registry = AttributeRegistry::load(dir.join("registry/registry.json")).map_err(e2s)?.digest();
    let model = sha("dist/model.ckpt")?;
    let regressor = sha("reg/regressor.ckpt")?;
    let mut bindings = 0;
    let mut bind = |what: &str, found: Option<&str>, expected: &str| -> Result<(), String> {
        bindings += 1;
        check(found == Some(expected), format!("{what}: {found:?} != {expected}"))
    };

    let ck = attriqa::diffcore::Checkpoint::load(dir.join("dist/model.ckpt")).map_err(e2s)?;
    let extra = &ck.metadata["extra"];
    bind("model/manifest", extra["inputs"]["manifest"].as_str(), &manifest)?;
    bind("model/registry", extra["inputs"]["registry"].as_str(), &registry)?;

    let table = ProbabilityTable::load(dir.join("extract/probabilities.csv")).map_err(e2s)?;
    bind("probabilities/registry", table.meta.get("registry_digest").map(String::as_str), &registry)?;
    bind("probabilities/checkpoint", table.meta.get("checkpoint_digest").map(String::as_str), &model)?;
    bind("probabilities/manifest", table.meta.get("manifest_digest").map(String::as_str), &manifest)?;

    let rk = attriqa::diffcore::Checkpoint::load(dir.join("reg/regressor.ckpt")).map_err(e2s)?;
    let rextra = &rk.metadata["extra"];
    bind("regressor/registry", rextra["registry_digest"].as_str(), &registry)?;
    bind("regressor/checkpoint", rextra["checkpoint_digest"].as_str(), &model)?;
    bind("regressor/manifest", rextra["inputs"]["manifest"].as_str(), &manifest)?;

    let report = json(&dir.join("eval/report.json"))?;
    bind("eval/manifest", report["inputs"]["manifest"].as_str(), &manifest)?;
    bind("eval/checkpoint", report["inputs"]["checkpoint"].as_str(), &model)?;
    check(report["distortion"].is_object() && report["score"].is_object(), "eval report lacks metrics")?;

    let index = json(&dir.join("saliency/index.json"))?;
    bind("saliency/checkpoint", index["inputs"]["checkpoint"].as_str(), &model)?;
    bind("saliency/registry", index["inputs"]["registry"].as_str(), &registry)?;

    // every map: source dimensions, values in [0, 1], max exactly 0 or 1
    let manifest_doc = load_manifest(dir.join("data/manifest.jsonl")).map_err(e2s)?;
    let maps: Vec<PathBuf> = std::fs::read_dir(dir.join("saliency"))
        .map_err(e2s)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_map.csv"))
        .collect();
    check(!maps.is_empty(), "no saliency maps")?;
    for p in &maps {
        let text = std::fs::read_to_string(p).map_err(e2s)?;
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse::<f64>()).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        let (h, w) = (rows.len(), rows[0].len());
        check(rows.iter().all(|r| r.len() == w), format!("{} is ragged", p.display()))?;
        let img_h = manifest_doc.records.first().map(|r| {
            Image::load_png(dir.join("data").join(&r.output_path)).map(|i| (i.height(), i.width()))
        });
        if let Some(Ok(dims)) = img_h {
            check((h, w) == dims, format!("{}: {h}x{w}, image {dims:?}", p.display()))?;
        }
        let max = rows.iter().flatten().copied().fold(0.0, f64::max);
        check(
            rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)) && (max == 1.0 || max == 0.0),
            format!("{} is not max-normalized", p.display()),
        )?;
        let overlay = PathBuf::from(p.to_string_lossy().replace("_map.csv", "_overlay.png"));
        let o = Image::load_png(&overlay).map_err(e2s)?;
        check((o.height(), o.width()) == (h, w), format!("{} size", overlay.display()))?;
    }

    // a registry that no longer matches the checkpoint must be refused
    let reg_path = dir.join("registry/registry.json");
    let mut doc = json(&reg_path)?;
    doc["anchors"]["pairs"][0]["positive"][0] = serde_json::json!(0.123);
    std::fs::write(&reg_path, serde_json::to_string(&doc).map_err(e2s)?).map_err(e2s)?;
    let refused = Command::new(env!("CARGO_BIN_EXE_attriqa"))
        .args(["extract", "--out", "extract_tampered", "--config"])
        .arg(dir.join("run.toml"))
        .output()
        .map_err(e2s)?;
    check(refused.status.code() == Some(2), format!("tampered registry gave {:?}", refused.status.code()))?;
    bind("eval/regressor", report["score"]["checkpoint_digest"].as_str(), &regressor)?;
    Ok(format!("7 commands ran, {bindings} digest bindings hold, {} saliency maps checked, tampered registry refused", maps.len()))
}

// ----------------------------------------------------------------

fn report(n: u32, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
        Err(detail) => println!("criterion {n} FAIL  {name}: {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut ok = true;
    ok &= report(1, "math-core invariants", &math_core());
    ok &= report(2, "gradient suite", &gradient_suite());
    ok &= report(3, "metric oracles", &metric_oracles());
    let gen_dir = tmp.path().join("gen");
    ok &= report(4, "generator statistics", &generator_statistics(&gen_dir));
    std::fs::remove_dir_all(&gen_dir).ok();

    match desk_model(&tmp.path().join("desk")) {
        Err(e) => {
            for (n, name) in [(5, "distortion identification"), (6, "quality regression"), (7, "disjoint source pool")] {
                ok &= report(n, name, &Err(format!("training failed: {e}")));
            }
        }
        Ok(desk) => {
            ok &= report(5, "distortion identification", &identification(&desk));
            let regression = quality_regression(&desk);
            ok &= report(6, "quality regression", &regression.as_ref().map_err(Clone::clone).and_then(judge_regression));
            // the drop is judged against whatever criterion 6 reached
            let seven = match &regression {
                Ok(r) => disjoint_pool(&desk, &r.model, r.srcc, &tmp.path().join("pool")),
                Err(e) => Err(format!("no regressor: {e}")),
            };
            ok &= report(7, "disjoint source pool", &seven);
        }
    }
    let pipe = tmp.path().join("pipeline");
    std::fs::create_dir_all(&pipe).expect("pipeline dir");
    ok &= report(8, "pipeline integrity", &pipeline(&pipe));
    if !ok {
        std::process::exit(1);
    }
}
