//! Quality-score regression from attribute probabilities alone.

mod scores;

pub use scores::{Polarity, ScoreEntry, ScoreNormalizer, ScoresFile};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::layers::linear;
use crate::diffcore::{randn, Adam, Checkpoint, CosineSchedule, Grads, Mode, ParamStore, Tape, Tensor, Var};
use crate::digest::sha256_parts;
use crate::error::{Error, Result};
use crate::imaging::RandomStream;

pub const REGRESSOR_KIND: &str = "attriqa-regressor";
pub const GROUP_MLP: &str = "regressor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: [128, 64],
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorSchedule {
    pub epochs: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub max_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RegressorSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 5,
            max_lr: 1e-3,
            min_lr: 0.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Regressor {
    pub config: RegressorConfig,
    /// Probability columns the network was trained on, in order.
    pub columns: Vec<String>,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePrediction {
    /// Network output before clamping.
    pub raw: f64,
    /// `raw` clamped to `[0, 1]` for reporting.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    /// Mean minibatch loss of each epoch (dropout active).
    pub train_mse: Vec<f64>,
    /// Eval-mode MSE on the whole training set after each epoch.
    pub fit_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Epoch whose weights were kept (lowest validation MSE, or the last
    /// epoch without validation data).
    pub best_epoch: usize,
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Config(format!("row {i} has {} features, regressor expects {dim}", r.len())));
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("row {i} contains a non-finite feature")));
        }
    }
    Ok(())
}

fn to_tensor(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    Tensor::matrix(rows.len(), dim, rows.iter().flatten().copied().collect())
}

impl Regressor {
    pub fn new(config: RegressorConfig, columns: Vec<String>, seed: u64) -> Result<Self> {
        if columns.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Config("regressor needs inputs and non-empty hidden layers".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut rng = RandomStream::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = [columns.len(), config.hidden[0], config.hidden[1], 1];
        for (l, w) in dims.windows(2).enumerate() {
            // LeCun normal, the initialization SELU is designed around
            params.insert(format!("fc{l}.w"), GROUP_MLP, randn(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), &mut rng))?;
            params.insert(format!("fc{l}.b"), GROUP_MLP, Tensor::zeros(&[1, w[1]]))?;
        }
        Ok(Self { config, columns, params })
    }

    pub fn input_dim(&self) -> usize {
        self.columns.len()
    }

    /// Records the network on `x: [n, input_dim]`, returning `[n, 1]`.
    pub fn record(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..3 {
            let w = tape.param_by_name(&format!("fc{l}.w"))?;
            let b = tape.param_by_name(&format!("fc{l}.b"))?;
            h = linear(tape, h, w, Some(b))?;
            if l < 2 {
                h = tape.selu(h);
                h = tape.dropout(h, self.config.dropout)?;
            }
        }
        Ok(h)
    }

    /// Eval-mode predictions; each row must have `input_dim` features.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<ScorePrediction>> {
        check_rows(rows, self.input_dim())?;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.constant(to_tensor(rows, self.input_dim())?);
        let y = self.record(&mut tape, x)?;
        tape.value(y)
            .data()
            .iter()
            .map(|&raw| {
                if !raw.is_finite() {
                    return Err(Error::Numerical("regressor produced a non-finite score".into()));
                }
                Ok(ScorePrediction {
                    raw,
                    score: raw.clamp(0.0, 1.0),
                })
            })
            .collect()
    }

    pub fn mse(&self, rows: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
        let p = self.predict(rows)?;
        Ok(p.iter().zip(targets).map(|(p, t)| (p.raw - t).powi(2)).sum::<f64>() / p.len().max(1) as f64)
    }

    /// One optimizer-free pass: mean squared error and its gradients on a
    /// batch, with dropout driven by `rng` in train mode.
    pub fn loss_and_grads(
        &self,
        rows: &[Vec<f64>],
        targets: &[f64],
        mode: Mode,
        rng: RandomStream,
    ) -> Result<(f64, Grads)> {
        let mut tape = Tape::new(&self.params, mode).with_rng(rng);
        let x = tape.constant(to_tensor(rows, self.input_dim())?);
        let y = self.record(&mut tape, x)?;
        let t = Tensor::matrix(targets.len(), 1, targets.to_vec())?;
        let loss = tape.mse_mean(y, &t)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let mut grads = Grads::zeros_like(&self.params);
        tape.accumulate_param_grads(&mut grads)?;
        Ok((value, grads))
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({
                "kind": REGRESSOR_KIND,
                "config": self.config,
                "columns": self.columns,
                "extra": extra,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta["kind"] != REGRESSOR_KIND {
            return Err(Error::Config(format!("checkpoint kind {} is not {REGRESSOR_KIND}", meta["kind"])));
        }
        let config: RegressorConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let columns: Vec<String> =
            serde_json::from_value(meta["columns"].clone()).map_err(|e| Error::Config(format!("checkpoint columns: {e}")))?;
        let w0 = ck.params.by_name("fc0.w")?;
        if w0.rows() != columns.len() {
            return Err(Error::Config(format!(
                "checkpoint header lists {} inputs but fc0 takes {}",
                columns.len(),
                w0.rows()
            )));
        }
        Ok(Self {
            config,
            columns,
            params: ck.params,
        })
    }

    /// Confirms a probability table's columns are exactly this network's inputs.
    pub fn check_columns(&self, columns: &[String]) -> Result<()> {
        if columns != self.columns.as_slice() {
            return Err(Error::Config(format!(
                "probability columns ({} starting {:?}) differ from the regressor inputs ({} starting {:?})",
                columns.len(),
                columns.first(),
                self.columns.len(),
                self.columns.first()
            )));
        }
        Ok(())
    }
}

/// Trains a fresh regressor on `(rows, targets)`, keeping the weights of the
/// epoch with the lowest validation MSE when validation data is given.
pub fn train_regressor(
    config: RegressorConfig,
    columns: Vec<String>,
    train: (&[Vec<f64>], &[f64]),
    val: Option<(&[Vec<f64>], &[f64])>,
    schedule: &RegressorSchedule,
) -> Result<(Regressor, RegressorReport)> {
    let (rows, targets) = train;
    if rows.len() != targets.len() {
        return Err(Error::Config(format!("{} feature rows for {} scores", rows.len(), targets.len())));
    }
    if rows.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    if schedule.epochs == 0 || schedule.batch_size == 0 || !(schedule.max_lr > 0.0) {
        return Err(Error::Config("regressor schedule needs positive epochs, batch size and learning rate".into()));
    }
    let mut model = Regressor::new(config, columns, schedule.seed)?;
    check_rows(rows, model.input_dim())?;
    if let Some((vr, vt)) = val {
        check_rows(vr, model.input_dim())?;
        if vr.len() != vt.len() {
            return Err(Error::Config("validation rows and scores differ in length".into()));
        }
    }
    let per_epoch = rows.len().div_ceil(schedule.batch_size);
    let cosine = CosineSchedule {
        max_lr: schedule.max_lr,
        min_lr: schedule.min_lr,
        warmup_steps: schedule.warmup_epochs * per_epoch,
        total_steps: schedule.epochs * per_epoch,
    };
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut shuffle = RandomStream::seed_from_u64(schedule.seed ^ 0x5eed);
    let mut report = RegressorReport {
        train_mse: Vec::new(),
        fit_mse: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0usize;
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let br: Vec<Vec<f64>> = batch.iter().map(|&i| rows[i].clone()).collect();
            let bt: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let key = sha256_parts([
                b"attriqa/dropout".as_slice(),
                &schedule.seed.to_le_bytes(),
                &(step as u64).to_le_bytes(),
            ]);
            let (loss, grads) = model.loss_and_grads(&br, &bt, Mode::Train, RandomStream::from_seed(key))?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!("non-finite regressor loss at epoch {epoch}, step {step}")));
            }
            adam.step(&mut model.params, &grads, cosine.lr(step))?;
            total += loss * batch.len() as f64;
            step += 1;
        }
        let train_mse = total / rows.len() as f64;
        report.train_mse.push(train_mse);
        report.fit_mse.push(model.mse(rows, targets)?);
        if let Some((vr, vt)) = val {
            let v = model.mse(vr, vt)?;
            report.val_mse.push(v);
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                report.best_epoch = epoch;
            }
        } else {
            report.best_epoch = epoch;
        }
        if epoch % 10 == 9 || epoch + 1 == schedule.epochs {
            info!(
                "regressor epoch {epoch}: train mse {train_mse:.6}{}",
                report.val_mse.last().map(|v| format!(", val mse {v:.6}")).unwrap_or_default()
            );
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, report))
}
