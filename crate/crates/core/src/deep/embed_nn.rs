//! Feedforward regressor on calendar covariates and learned profession and
//! module embeddings. Direct multi-horizon: one forward pass per future day.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep::{non_finite, panel_series, require_epochs, DeepConfig, GlobalModel, SeriesStats, TrainingLog, Vocabulary};
use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;
use crate::panel::{covariates_for, Panel, SeriesKey, COVARIATE_WIDTH};
use crate::seed::derive_seed;
use crate::tensor::nn::{Dense, Embedding};
use crate::tensor::{AdamState, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedNnConfig {
    /// Widths of the ReLU and sigmoid hidden layers.
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedNnConfig {
    fn default() -> Self {
        Self {
            hidden: [1000, 500],
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 42,
        }
    }
}

impl EmbedNnConfig {
    pub fn validate(&self) -> Result<()> {
        require_epochs(self.epochs)?;
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("batch size and layer widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) struct Arch {
    profession: Embedding,
    module: Embedding,
    l1: Dense,
    l2: Dense,
    out: Dense,
}

pub(crate) fn build(config: &EmbedNnConfig, vocab: &Vocabulary) -> (ParamStore, Arch) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "embed_nn.init"));
    let mut store = ParamStore::new();
    let profession = Embedding::new(&mut store, &mut rng, "profession", vocab.professions.len());
    let module = Embedding::new(&mut store, &mut rng, "module", vocab.modules.len());
    let inputs = COVARIATE_WIDTH + profession.dim + module.dim;
    let l1 = Dense::new(&mut store, &mut rng, "hidden1", inputs, config.hidden[0]);
    let l2 = Dense::new(&mut store, &mut rng, "hidden2", config.hidden[0], config.hidden[1]);
    let out = Dense::new(&mut store, &mut rng, "output", config.hidden[1], 1);
    (store, Arch { profession, module, l1, l2, out })
}

/// One input row: normalized covariates plus profession/module indices.
#[derive(Clone, Copy)]
struct Row {
    cov: [f64; COVARIATE_WIDTH],
    profession: usize,
    module: usize,
}

fn forward(g: &mut Graph, store: &ParamStore, arch: &Arch, rows: &[Row]) -> Result<crate::tensor::Var> {
    let mut cov = Vec::with_capacity(rows.len() * COVARIATE_WIDTH);
    for r in rows {
        cov.extend_from_slice(&r.cov);
    }
    let x = g.constant(Tensor::new([rows.len(), COVARIATE_WIDTH], cov)?);
    let p: Vec<usize> = rows.iter().map(|r| r.profession).collect();
    let m: Vec<usize> = rows.iter().map(|r| r.module).collect();
    let ep = arch.profession.forward(g, store, &p)?;
    let em = arch.module.forward(g, store, &m)?;
    let x = g.concat(&[x, ep, em])?;
    let h = arch.l1.forward(g, store, x)?;
    let h = g.relu(h);
    let h = arch.l2.forward(g, store, h)?;
    let h = g.sigmoid(h);
    arch.out.forward(g, store, h)
}

/// Scaled predictions for many rows, in evaluation mode.
fn predict_rows(store: &ParamStore, arch: &Arch, rows: &[Row]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(1024) {
        let mut g = Graph::eval();
        let y = forward(&mut g, store, arch, chunk)?;
        out.extend_from_slice(&g.value(y).values);
    }
    Ok(out)
}

struct Prepared {
    keys: Vec<SeriesKey>,
    rows: Vec<Row>,
    targets: Vec<f64>,
    /// Series index of every row.
    owner: Vec<usize>,
}

fn prepare(panel: &Panel, vocab: &Vocabulary, scales: &[f64], cal_panel: &Panel) -> Result<Prepared> {
    let offset = cal_panel.calendar().offset_of(panel.calendar().start);
    let offset = usize::try_from(offset).map_err(|_| Error::Contract("slice starts before the training calendar".into()))?;
    let cov = covariates_for(cal_panel.calendar(), offset, offset + panel.calendar().length).normalized;
    let mut p = Prepared { keys: Vec::new(), rows: Vec::new(), targets: Vec::new(), owner: Vec::new() };
    for (i, (key, values)) in panel_series(panel).into_iter().enumerate() {
        let [prof, module, _] = vocab.indices(&key)?;
        for (t, y) in values.iter().enumerate() {
            p.rows.push(Row { cov: cov[t], profession: prof, module });
            p.targets.push(y / scales[i]);
            p.owner.push(i);
        }
        p.keys.push(key);
    }
    Ok(p)
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Train on `train`; `validation` (same keys, the days right after) selects
/// the best epoch and supplies the residuals behind the intervals.
pub fn fit_embed_nn(train: &Panel, validation: &Panel, config: &EmbedNnConfig) -> Result<GlobalModel> {
    config.validate()?;
    if train.is_empty() || train.calendar().length == 0 {
        return Err(Error::History("embedding network needs a non-empty training panel".into()));
    }
    let vocab = Vocabulary::from_keys(train.keys());
    let (mut store, arch) = build(config, &vocab);
    let series = panel_series(train);
    let scales: Vec<f64> = series
        .iter()
        .map(|(_, v)| {
            let m = v.iter().copied().fold(0.0, f64::max);
            if m > 0.0 { m } else { 1.0 }
        })
        .collect();
    let data = prepare(train, &vocab, &scales, train)?;
    let has_validation = validation.calendar().length > 0;
    let val = if has_validation {
        Some(prepare(&validation.select(&data.keys)?, &vocab, &scales, train)?)
    } else {
        None
    };

    let mut adam = AdamState::new(&store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "embed_nn.shuffle"));
    let mut order: Vec<usize> = (0..data.rows.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<Row> = chunk.iter().map(|&i| data.rows[i]).collect();
            let target: Vec<f64> = chunk.iter().map(|&i| data.targets[i]).collect();
            let mut g = Graph::new(0);
            let pred = forward(&mut g, &store, &arch, &rows)?;
            let y = g.constant(Tensor::new([rows.len(), 1], target)?);
            let diff = g.sub(pred, y)?;
            let abs = g.abs(diff);
            let loss = g.mean(abs);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite("embed_nn", epoch, b + 1, value));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut store, &grads)?;
            total += value;
            batches += 1;
        }
        log.epoch_loss.push(total / batches as f64);
        let score = match &val {
            Some(v) => {
                let s = mae(&predict_rows(&store, &arch, &v.rows)?, &v.targets);
                log.validation_loss.push(s);
                s
            }
            None => total / batches as f64,
        };
        log::debug!("embed_nn epoch {epoch}: train {:.5}, selection {score:.5}", total / batches as f64);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, store.clone()));
            log.best_epoch = epoch;
        }
    }
    let store = best.map(|(_, s)| s).unwrap_or(store);

    // Residuals on the validation slice, or the training tail without one.
    let (res_data, tail_from) = match &val {
        Some(v) => (v, 0),
        None => (&data, train.calendar().length.saturating_sub(30)),
    };
    let preds = predict_rows(&store, &arch, &res_data.rows)?;
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); data.keys.len()];
    let days = res_data.rows.len() / data.keys.len().max(1);
    for (i, (&owner, (p, y))) in res_data.owner.iter().zip(preds.iter().zip(&res_data.targets)).enumerate() {
        if i % days.max(1) >= tail_from {
            residuals[owner].push((y - p) * scales[owner]);
        }
    }
    let mut stats = BTreeMap::new();
    for ((key, scale), mut res) in data.keys.iter().zip(&scales).zip(residuals) {
        res.sort_by(f64::total_cmp);
        stats.insert(key.to_string(), SeriesStats { scale: *scale, residuals: res, cdf: None });
    }
    Ok(GlobalModel {
        config: DeepConfig::EmbedNn(config.clone()),
        vocab,
        calendar: *train.calendar(),
        series: stats,
        dropped: BTreeMap::new(),
        training: log,
        params: store,
    })
}

/// Forecast `key` over the days described by `future` (normalized
/// covariate rows, see [`GlobalModel::covariates`]).
pub fn predict_embed_nn(model: &GlobalModel, key: &SeriesKey, future: &[[f64; COVARIATE_WIDTH]]) -> Result<ForecastDistribution> {
    let DeepConfig::EmbedNn(config) = &model.config else {
        return Err(Error::Contract(format!("expected an embed_nn model, got {}", model.config.name())));
    };
    let [profession, module, _] = model.vocab.indices(key)?;
    let stats = model.stats(key)?;
    let (_, arch) = build(config, &model.vocab);
    let rows: Vec<Row> = future.iter().map(|&cov| Row { cov, profession, module }).collect();
    let point: Vec<f64> = predict_rows(&model.params, &arch, &rows)?
        .into_iter()
        .map(|p| p * stats.scale)
        .collect();
    Ok(ForecastDistribution::with_residuals(point, stats.residuals.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{parse_date, Calendar};

    fn small() -> EmbedNnConfig {
        EmbedNnConfig { hidden: [64, 32], epochs: 60, batch_size: 32, learning_rate: 3e-3, seed: 1 }
    }

    fn panel(levels: &[(&str, &str, u32)], days: usize) -> Panel {
        let cal = Calendar::new(parse_date("2020-01-01").unwrap(), days);
        let series = levels
            .iter()
            .map(|(p, m, v)| (SeriesKey::new(p, m, None).unwrap(), vec![*v; days]))
            .collect();
        Panel::new(cal, series).unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let p = panel(&[("a", "x", 5)], 20);
        let cfg = EmbedNnConfig { epochs: 0, ..small() };
        assert!(matches!(fit_embed_nn(&p, &p.slice(0, 0).unwrap(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn learns_a_constant() {
        let p = panel(&[("a", "x", 40)], 90);
        let (train, val) = (p.slice(0, 60).unwrap(), p.slice(60, 90).unwrap());
        let model = fit_embed_nn(&train, &val, &small()).unwrap();
        let key = train.keys().next().unwrap().clone();
        let fd = predict_embed_nn(&model, &key, &model.covariates(parse_date("2020-03-31").unwrap(), 10)).unwrap();
        for p in &fd.point {
            assert!((p - 40.0).abs() < 0.05 * 40.0, "{p}");
        }
    }

    #[test]
    fn embeddings_separate_disjoint_levels() {
        let p = panel(&[("a", "x", 10), ("b", "y", 80)], 90);
        let (train, val) = (p.slice(0, 60).unwrap(), p.slice(60, 90).unwrap());
        let cfg = EmbedNnConfig { epochs: 80, ..small() };
        let model = fit_embed_nn(&train, &val, &cfg).unwrap();
        let future = model.covariates(parse_date("2020-03-31").unwrap(), 5);
        for (key, level) in train.keys().zip([10.0, 80.0]) {
            let fd = predict_embed_nn(&model, key, &future).unwrap();
            for p in &fd.point {
                assert!((p - level).abs() < 0.10 * level, "{key}: {p} vs {level}");
            }
        }
        let (_, arch) = build(&cfg, &model.vocab);
        let table = model.params.get(arch.profession.table);
        let dim = table.cols();
        let d: f64 = (0..dim).map(|j| (table.at(0, j) - table.at(1, j)).powi(2)).sum();
        assert!(d.sqrt() > 0.0);
    }

    #[test]
    fn unseen_category_rejected() {
        let p = panel(&[("a", "x", 10)], 40);
        let cfg = EmbedNnConfig { epochs: 1, ..small() };
        let model = fit_embed_nn(&p.slice(0, 30).unwrap(), &p.slice(30, 40).unwrap(), &cfg).unwrap();
        let other = SeriesKey::new("zz", "x", None).unwrap();
        let future = model.covariates(parse_date("2020-02-10").unwrap(), 3);
        assert!(matches!(predict_embed_nn(&model, &other, &future), Err(Error::Category(_))));
    }

    #[test]
    fn interval_is_residual_iqr_and_nonnegative() {
        let model_point = vec![5.0, 0.1];
        let fd = ForecastDistribution::with_residuals(model_point, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        let (lo, hi) = fd.band50();
        assert_eq!(hi[0] - lo[0], 2.0);
        assert_eq!(lo[1], 0.0);
    }
}
