//! One function per subcommand. Each writes its artifacts plus the resolved
//! configuration into its output directory and prints a short summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use attriqa::attribute_model::{
    evaluate_loss, extract_attribute_probs, load_at, train_distortion_model, AttributeFile, AttributeRegistry,
    DistortionModel, EmbeddingSource, ProbabilityTable, TrainingSet,
};
use attriqa::datagen::{
    generate, ground_truth_matrix, load_manifest, split_by_source, write_procedural_sources, GeneratorConfig,
    Manifest, ManifestRecord,
};
use attriqa::diffcore::{Checkpoint, DType};
use attriqa::digest::{file_sha256, sha256_hex};
use attriqa::encoder::TextAnchorSet;
use attriqa::imaging::{DistortionType, Image};
use attriqa::metrics::{interval_accuracy, plcc, srcc, strength_rmse, IntervalScheme, MetricReport, StrengthMatrix};
use attriqa::regressor::{train_regressor, Polarity, Regressor, ScoreEntry, ScoreNormalizer, ScoresFile};
use attriqa::saliency::{render_overlay, saliency_map};
use attriqa::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Paths, RunConfig, SplitPart};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const EVAL_FORMAT: &str = "attriqa-eval";
pub const SALIENCY_FORMAT: &str = "attriqa-saliency";

pub struct Context {
    pub config: RunConfig,
    pub paths: Paths,
    /// `attriqa <version> <command>`, stamped into every artifact.
    pub creator: String,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        self.paths.resolve(p)
    }

    /// Creates `out` and writes the resolved configuration into it.
    fn prepare_out(&self, out: &Path) -> Result<PathBuf> {
        let dir = self.path(out);
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let mut snapshot = self.config.clone();
        snapshot.data_root = Some(self.paths.root.clone());
        write(&dir.join(SNAPSHOT_FILE), snapshot.to_toml())?;
        Ok(dir)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn json_string(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes")
}

struct Dataset {
    manifest: Manifest,
    root: PathBuf,
    digest: String,
}

fn load_dataset(ctx: &Context, manifest: &Path) -> Result<Dataset> {
    let path = ctx.path(manifest);
    let m = load_manifest(&path)?;
    Ok(Dataset {
        manifest: m,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        digest: file_sha256(&path)?,
    })
}

impl Dataset {
    fn part(&self, seed: u64, part: SplitPart) -> Vec<ManifestRecord> {
        let records = &self.manifest.records;
        let split = split_by_source(records, seed);
        let idx: Vec<usize> = match part {
            SplitPart::Train => split.train,
            SplitPart::Val => split.val,
            SplitPart::Test => split.test,
            SplitPart::All => (0..records.len()).collect(),
        };
        idx.into_iter().map(|i| records[i].clone()).collect()
    }
}

fn load_registry(ctx: &Context, path: &Path) -> Result<(AttributeRegistry, String)> {
    let path = ctx.path(path);
    let reg = AttributeRegistry::load(&path)?;
    let digest = reg.digest();
    Ok((reg, digest))
}

fn load_model(ctx: &Context, checkpoint: &Path, registry: &AttributeRegistry) -> Result<(DistortionModel, String)> {
    let path = ctx.path(checkpoint);
    let digest = file_sha256(&path)?;
    let model = DistortionModel::from_checkpoint(Checkpoint::load(&path)?, registry)?;
    Ok((model, digest))
}

fn check_digest(what: &str, expected: Option<&str>, found: &str) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(Error::DigestMismatch {
            what: what.to_string(),
            expected: e.to_string(),
            found: found.to_string(),
        }),
        _ => Ok(()),
    }
}

pub fn generate_cmd(ctx: &Context) -> Result<()> {
    let g = &ctx.config.generate;
    let out = ctx.prepare_out(&g.out)?;
    let sources = if g.procedural > 0 {
        write_procedural_sources(out.join("sources"), g.procedural, ctx.config.seed, g.procedural_size)?
    } else {
        let dir = g
            .sources
            .as_ref()
            .map(|p| ctx.path(p))
            .ok_or_else(|| Error::Config("generate needs `sources` or `procedural > 0`".into()))?;
        let mut pngs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_error(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        pngs.sort();
        if pngs.is_empty() {
            return Err(Error::Data(format!("no PNG sources in {}", dir.display())));
        }
        pngs
    };
    let mut gc = GeneratorConfig::new(sources, g.distortions.clone());
    gc.master_seed = ctx.config.seed;
    gc.repeats = g.repeats;
    gc.level_count = g.level_count;
    gc.synthetic_scores = g.synthetic_scores;
    let result = generate(&gc, &out, &ctx.creator)?;
    if g.synthetic_scores {
        let unit = ScoreNormalizer::new(0.0, 1.0, Polarity::HigherBetter)?;
        let scores = ScoresFile {
            entries: result
                .manifest
                .records
                .iter()
                .filter_map(|r| {
                    r.score.map(|s| ScoreEntry {
                        id: r.id(),
                        raw: s,
                        normalizer: unit,
                    })
                })
                .collect(),
        };
        scores.save(out.join("scores.csv"))?;
    }
    println!(
        "generated {} records from {} sources ({} rejected) -> {}",
        result.manifest.records.len(),
        result.manifest.header.inputs.len(),
        result.rejects.len(),
        result.manifest_path.display()
    );
    Ok(())
}

pub fn build_registry_cmd(ctx: &Context) -> Result<()> {
    let r = &ctx.config.registry;
    let out = ctx.prepare_out(&r.out)?;
    let (file, attributes_digest) = match &r.attributes {
        Some(p) => {
            let p = ctx.path(p);
            (AttributeFile::load(&p)?, file_sha256(&p)?)
        }
        None => (
            AttributeFile::shipped(),
            format!("builtin:{}", sha256_hex(attriqa::attribute_model::SHIPPED_ATTRIBUTES.as_bytes())),
        ),
    };
    let distortions = if r.distortions.is_empty() {
        load_manifest(ctx.path(&r.manifest))?.header.distortions
    } else {
        r.distortions.clone()
    };
    let file = file.select(&distortions)?;
    let (source, embeddings) = match &r.embeddings {
        Some(p) => {
            let p = ctx.path(p);
            (EmbeddingSource::Imported(TextAnchorSet::load_import(&p)?), file_sha256(&p)?)
        }
        None => (EmbeddingSource::Toy { dim: r.toy_dim }, format!("toy-hash:{}", r.toy_dim)),
    };
    let mut reg = AttributeRegistry::build(&file, source)?;
    reg.provenance = BTreeMap::from([
        ("creator".to_string(), ctx.creator.clone()),
        ("attributes".to_string(), attributes_digest),
        ("embeddings".to_string(), embeddings),
    ]);
    let path = out.join("registry.json");
    reg.save(&path)?;
    println!(
        "registry: {} distortions x {} attributes, digest {} -> {}",
        reg.distortions.len(),
        reg.attrs_per_distortion,
        reg.digest(),
        path.display()
    );
    Ok(())
}

pub fn train_dist_cmd(ctx: &Context) -> Result<()> {
    let t = &ctx.config.train_dist;
    let (registry, registry_digest) = load_registry(ctx, &t.registry)?;
    let data = load_dataset(ctx, &t.manifest)?;
    for d in registry.distortion_types() {
        if !data.manifest.header.distortions.contains(&d) {
            return Err(Error::Config(format!(
                "registry distortion {} never occurs in the manifest",
                d.id()
            )));
        }
    }
    let out = ctx.prepare_out(&t.out)?;
    let mut schedule = t.schedule.clone();
    schedule.seed = ctx.config.seed;
    let mut model = DistortionModel::new(t.model.clone(), &registry, ctx.config.seed)?;
    let size = t.model.vit.image_size;
    let distortions = model.distortions.clone();
    let train = TrainingSet::from_records(&data.part(ctx.config.split_seed, SplitPart::Train), &data.root, &distortions, size)?;
    let val = TrainingSet::from_records(&data.part(ctx.config.split_seed, SplitPart::Val), &data.root, &distortions, size)?;
    println!(
        "training on {} images ({} validation), {} trainable scalars",
        train.len(),
        val.len(),
        model.params.trainable_scalars()
    );
    let mut history = String::from("epoch,train_loss,val_loss\n");
    let report = train_distortion_model(&mut model, &train, &schedule, |epoch, loss, m| {
        let v = if val.is_empty() { f64::NAN } else { evaluate_loss(m, &val)? };
        history.push_str(&format!("{epoch},{loss},{v}\n"));
        println!("epoch {epoch}: train loss {loss:.5} val loss {v:.5}");
        Ok(())
    })?;
    write(&out.join("history.csv"), &history)?;
    let extra = json!({
        "creator": ctx.creator,
        "inputs": {"manifest": data.digest, "registry": registry_digest},
        "split_seed": ctx.config.split_seed,
        "schedule": schedule,
        "epoch_losses": report.epoch_losses,
    });
    let path = out.join("model.ckpt");
    model.to_checkpoint(extra).save(&path, DType::F64)?;
    println!("checkpoint {} -> {}", file_sha256(&path)?, path.display());
    Ok(())
}

pub fn extract_cmd(ctx: &Context) -> Result<()> {
    let e = &ctx.config.extract;
    let (registry, _) = load_registry(ctx, &e.registry)?;
    let (model, checkpoint_digest) = load_model(ctx, &e.checkpoint, &registry)?;
    let data = load_dataset(ctx, &e.manifest)?;
    let out = ctx.prepare_out(&e.out)?;
    let mut table = extract_attribute_probs(&model, &registry.column_names(), &data.manifest.records, &data.root)?;
    table.meta.insert("creator".into(), ctx.creator.clone());
    table.meta.insert("checkpoint_digest".into(), checkpoint_digest);
    table.meta.insert("manifest_digest".into(), data.digest.clone());
    let path = out.join("probabilities.csv");
    table.save(&path)?;
    println!(
        "{} records x {} attribute probabilities, digest {} -> {}",
        table.ids.len(),
        table.columns.len(),
        file_sha256(&path)?,
        path.display()
    );
    Ok(())
}

fn score_rows(
    table: &ProbabilityTable,
    scores: &ScoresFile,
    records: &[ManifestRecord],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let ids: Vec<String> = records.iter().map(ManifestRecord::id).collect();
    let rows = table.rows_for(&ids)?;
    let (targets, _) = scores.normalized_for(&ids)?;
    Ok((rows, targets))
}

pub fn train_reg_cmd(ctx: &Context) -> Result<()> {
    let t = &ctx.config.train_reg;
    let probs_path = ctx.path(&t.probabilities);
    let table = ProbabilityTable::load(&probs_path)?;
    let scores_path = ctx.path(&t.scores);
    let scores = ScoresFile::load(&scores_path)?;
    let data = load_dataset(ctx, &t.manifest)?;
    check_digest("manifest", table.meta.get("manifest_digest").map(String::as_str), &data.digest)?;
    let out = ctx.prepare_out(&t.out)?;
    let (xtr, ytr) = score_rows(&table, &scores, &data.part(ctx.config.split_seed, SplitPart::Train))?;
    let (xva, yva) = score_rows(&table, &scores, &data.part(ctx.config.split_seed, SplitPart::Val))?;
    let mut schedule = t.schedule.clone();
    schedule.seed = ctx.config.seed;
    let val = (!xva.is_empty()).then_some((xva.as_slice(), yva.as_slice()));
    let (model, report) = train_regressor(t.model.clone(), table.columns.clone(), (&xtr, &ytr), val, &schedule)?;
    let mut history = String::from("epoch,train_mse,fit_mse,val_mse\n");
    for (i, (tr, fit)) in report.train_mse.iter().zip(&report.fit_mse).enumerate() {
        let v = report.val_mse.get(i).copied().unwrap_or(f64::NAN);
        history.push_str(&format!("{i},{tr},{fit},{v}\n"));
    }
    write(&out.join("history.csv"), &history)?;
    let extra = json!({
        "creator": ctx.creator,
        "inputs": {
            "probabilities": file_sha256(&probs_path)?,
            "scores": file_sha256(&scores_path)?,
            "manifest": data.digest,
        },
        "registry_digest": table.meta.get("registry_digest"),
        "checkpoint_digest": table.meta.get("checkpoint_digest"),
        "split_seed": ctx.config.split_seed,
        "schedule": schedule,
        "best_epoch": report.best_epoch,
    });
    let path = out.join("regressor.ckpt");
    model.to_checkpoint(extra).save(&path, DType::F64)?;
    println!(
        "regressor on {} rows, best epoch {} (val mse {:.5}) -> {}",
        xtr.len(),
        report.best_epoch,
        report.val_mse.get(report.best_epoch).copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

/// `record_id,<distortion>,...` strength predictions.
pub fn write_predictions(path: &Path, distortions: &[DistortionType], ids: &[String], m: &StrengthMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(std::iter::once("record_id").chain(distortions.iter().map(|d| d.id())))
        .map_err(err)?;
    for (i, id) in ids.iter().enumerate() {
        w.write_record(std::iter::once(id.clone()).chain(m.row(i).iter().map(|v| v.to_string())))
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write(path, bytes)
}

pub fn read_predictions(path: &Path, ids: &[String]) -> Result<(Vec<DistortionType>, StrengthMatrix)> {
    let origin = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{origin}: {e}")))?;
    let header = reader.headers().map_err(|e| Error::Data(format!("{origin}: {e}")))?.clone();
    if header.get(0) != Some("record_id") {
        return Err(Error::Config(format!("{origin}: first column must be record_id")));
    }
    let distortions = header
        .iter()
        .skip(1)
        .map(str::parse::<DistortionType>)
        .collect::<Result<Vec<_>>>()?;
    let mut by_id = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{origin}: {e}")))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    path: origin.clone(),
                    line: i + 2,
                    msg: format!("`{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        by_id.insert(rec[0].to_string(), row);
    }
    let rows = ids
        .iter()
        .map(|id| {
            by_id
                .remove(id)
                .ok_or_else(|| Error::Data(format!("{origin}: no prediction for `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((distortions, StrengthMatrix::from_rows(&rows)?))
}

pub fn eval_cmd(ctx: &Context) -> Result<()> {
    let e = &ctx.config.eval;
    let data = load_dataset(ctx, &e.manifest)?;
    let records = data.part(ctx.config.split_seed, e.split);
    if records.is_empty() {
        return Err(Error::Data(format!("split {:?} holds no records", e.split)));
    }
    let ids: Vec<String> = records.iter().map(ManifestRecord::id).collect();
    let out = ctx.prepare_out(&e.out)?;
    let mut inputs = BTreeMap::from([("manifest".to_string(), data.digest.clone())]);
    let mut doc = json!({
        "format": EVAL_FORMAT,
        "version": 1,
        "creator": ctx.creator,
        "split": e.split,
        "split_seed": ctx.config.split_seed,
    });
    let scheme = IntervalScheme::new(e.levels)?;

    let mut checkpoint_digest = None;
    let distortion_part = if let Some(p) = &e.predictions {
        let p = ctx.path(p);
        inputs.insert("predictions".into(), file_sha256(&p)?);
        Some(read_predictions(&p, &ids)?)
    } else if let Some(ck) = &e.checkpoint {
        let (registry, _) = load_registry(ctx, &e.registry)?;
        let (model, digest) = load_model(ctx, ck, &registry)?;
        inputs.insert("checkpoint".into(), digest.clone());
        checkpoint_digest = Some(digest);
        let rows = records
            .par_iter()
            .map(|r| Ok(model.predict(&load_at(&data.root.join(&r.output_path), model.config.vit.image_size)?)?.dist_probs))
            .collect::<Result<Vec<_>>>()?;
        let m = StrengthMatrix::from_rows(&rows)?;
        write_predictions(&out.join("predictions.csv"), &model.distortions, &ids, &m)?;
        Some((model.distortions.clone(), m))
    } else {
        None
    };
    if let Some((distortions, predicted)) = distortion_part {
        let truth = ground_truth_matrix(&records, &distortions)?;
        let report = MetricReport {
            accuracy: Some(interval_accuracy(&predicted, &truth, scheme)?),
            rmse: Some(strength_rmse(&predicted, &truth)?),
            images: records.len(),
            cells: records.len() * distortions.len(),
            dataset_digest: data.digest.clone(),
            checkpoint_digest: checkpoint_digest.clone(),
            ..MetricReport::default()
        };
        println!("distortion: {}", report.summary());
        doc["distortion"] = json!(report);
    }

    if let Some(reg_path) = &e.regressor {
        let reg_path = ctx.path(reg_path);
        let ck = Checkpoint::load(&reg_path)?;
        let bound_registry = ck.metadata["extra"]["registry_digest"].as_str().map(str::to_string);
        let bound_checkpoint = ck.metadata["extra"]["checkpoint_digest"].as_str().map(str::to_string);
        let regressor = Regressor::from_checkpoint(ck)?;
        let probs = e
            .probabilities
            .as_ref()
            .ok_or_else(|| Error::Config("score evaluation needs `probabilities`".into()))?;
        let probs = ctx.path(probs);
        let table = ProbabilityTable::load(&probs)?;
        regressor.check_columns(&table.columns)?;
        let table_registry = table.meta.get("registry_digest").cloned().unwrap_or_default();
        check_digest("attribute registry", bound_registry.as_deref(), &table_registry)?;
        if let Some(ckd) = &checkpoint_digest {
            check_digest(
                "distortion checkpoint",
                table.meta.get("checkpoint_digest").map(String::as_str),
                ckd,
            )?;
        }
        check_digest(
            "distortion checkpoint",
            bound_checkpoint.as_deref(),
            table.meta.get("checkpoint_digest").map_or("", String::as_str),
        )?;
        let scores = ScoresFile::load(ctx.path(&e.scores))?;
        let (x, y) = score_rows(&table, &scores, &records)?;
        let pred: Vec<f64> = regressor.predict(&x)?.iter().map(|p| p.score).collect();
        let rmse = (pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        inputs.insert("regressor".into(), file_sha256(&reg_path)?);
        inputs.insert("probabilities".into(), file_sha256(&probs)?);
        let report = MetricReport {
            rmse: Some(rmse),
            plcc: Some(plcc(&pred, &y)?),
            srcc: Some(srcc(&pred, &y)?),
            images: records.len(),
            cells: records.len(),
            dataset_digest: data.digest.clone(),
            checkpoint_digest: Some(file_sha256(&reg_path)?),
            ..MetricReport::default()
        };
        println!("score: {}", report.summary());
        let mut csv = String::from("record_id,predicted,target\n");
        for ((id, p), t) in ids.iter().zip(&pred).zip(&y) {
            csv.push_str(&format!("{id},{p},{t}\n"));
        }
        write(&out.join("scores.csv"), csv)?;
        doc["score"] = json!(report);
    }
    if doc.get("distortion").is_none() && doc.get("score").is_none() {
        return Err(Error::Config(
            "eval needs `predictions`, `checkpoint` or `regressor` to have something to measure".into(),
        ));
    }
    doc["inputs"] = json!(inputs);
    write(&out.join("report.json"), json_string(&doc))?;
    Ok(())
}

pub fn saliency_cmd(ctx: &Context) -> Result<()> {
    let s = &ctx.config.saliency;
    let (registry, _) = load_registry(ctx, &s.registry)?;
    let (model, checkpoint_digest) = load_model(ctx, &s.checkpoint, &registry)?;
    let data = load_dataset(ctx, &s.manifest)?;
    let mut records = data.part(ctx.config.split_seed, s.split);
    if s.limit > 0 {
        records.truncate(s.limit);
    }
    let distortions = if s.distortions.is_empty() {
        model.distortions.clone()
    } else {
        s.distortions.clone()
    };
    let out = ctx.prepare_out(&s.out)?;
    let entries = records
        .par_iter()
        .map(|r| {
            let img = Image::load_png(data.root.join(&r.output_path))?;
            let stem = Path::new(&r.output_path)
                .file_stem()
                .and_then(|x| x.to_str())
                .unwrap_or("image")
                .to_string();
            distortions
                .iter()
                .map(|&d| {
                    let map = saliency_map(&model, &img, d, &r.id(), s.sigma)?;
                    let max = map.max();
                    if (map.height, map.width) != (img.height(), img.width()) || !(max == 0.0 || max == 1.0) {
                        return Err(Error::Invariant(format!(
                            "saliency map for `{}` is {}x{} with max {max}",
                            r.id(),
                            map.height,
                            map.width
                        )));
                    }
                    let base = format!("{stem}_{}", d.id());
                    map.heatmap()?.save_png(out.join(format!("{base}_map.png")))?;
                    render_overlay(&img, &map, s.blend, out.join(format!("{base}_overlay.png")))?;
                    map.save_csv(out.join(format!("{base}_map.csv")))?;
                    Ok(json!({
                        "record_id": r.id(),
                        "distortion": d,
                        "probability": map.probability,
                        "height": map.height,
                        "width": map.width,
                        "max": max,
                        "zero_gradient": map.zero_gradient,
                        "map": format!("{base}_map.png"),
                        "overlay": format!("{base}_overlay.png"),
                        "values": format!("{base}_map.csv"),
                    }))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<serde_json::Value> = entries.into_iter().flatten().collect();
    let flagged = entries.iter().filter(|e| e["zero_gradient"] == true).count();
    let doc = json!({
        "format": SALIENCY_FORMAT,
        "version": 1,
        "creator": ctx.creator,
        "inputs": {"checkpoint": checkpoint_digest, "manifest": data.digest, "registry": registry.digest()},
        "sigma": s.sigma,
        "maps": entries,
    });
    write(&out.join("index.json"), json_string(&doc))?;
    println!(
        "{} saliency maps for {} images ({flagged} with zero gradient) -> {}",
        doc["maps"].as_array().map_or(0, Vec::len),
        records.len(),
        out.display()
    );
    Ok(())
}
