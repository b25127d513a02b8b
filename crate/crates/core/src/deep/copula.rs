//! Gaussian copula over all series with a low-rank covariance produced by a
//! shared LSTM. Marginals are empirical distribution functions of the
//! training counts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::deep::{non_finite, panel_series, require_epochs, DeepConfig, GlobalModel, SeriesStats, TrainingLog, Vocabulary};
use crate::error::{Error, Result};
use crate::forecast::{normal_cdf, normal_quantile, ForecastDistribution};
use crate::panel::{covariates_for, Panel, SeriesKey, COVARIATE_WIDTH};
use crate::seed::{derive_indexed, derive_seed};
use crate::tensor::nn::{Dense, Embedding};
use crate::tensor::{lstm_step, AdamState, Graph, LstmParams, LstmState, ParamStore, Tensor, Var};

/// Floor added to the softplus diagonal.
const MIN_DIAG: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpCopulaConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Series per training block.
    pub series_batch: usize,
    pub context: usize,
    pub horizon: usize,
    pub samples: usize,
    /// Rank of the covariance factor.
    pub rank: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for GpCopulaConfig {
    fn default() -> Self {
        Self {
            hidden: 20,
            layers: 2,
            dropout: 0.01,
            epochs: 5,
            batches_per_epoch: 50,
            series_batch: 8,
            context: 30,
            horizon: 30,
            samples: 100,
            rank: 5,
            learning_rate: 1e-3,
            clip_norm: 10.0,
            seed: 42,
        }
    }
}

impl GpCopulaConfig {
    pub fn validate(&self) -> Result<()> {
        require_epochs(self.epochs)?;
        if self.hidden == 0 || self.layers == 0 || self.batches_per_epoch == 0 || self.series_batch < 2 {
            return Err(Error::Config("hidden size, layers and batches must be positive; series batch at least 2".into()));
        }
        if self.context == 0 || self.horizon == 0 || self.samples == 0 || self.rank == 0 {
            return Err(Error::Config("context, horizon, samples and rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("dropout must lie in [0, 1); learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Empirical distribution of one series' training counts with mid-rank
/// handling of ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    /// Training values in ascending order.
    pub sorted: Vec<f64>,
}

impl EmpiricalCdf {
    /// `None` when fewer than two distinct values exist.
    pub fn fit(values: &[f64]) -> Option<Self> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        (sorted.first() != sorted.last()).then_some(Self { sorted })
    }

    fn n(&self) -> f64 {
        self.sorted.len() as f64
    }

    /// `(#{x < y} + ½·#{x = y}) / n`, clamped to `[1/2n, 1 − 1/2n]`.
    pub fn cdf(&self, y: f64) -> f64 {
        let below = self.sorted.partition_point(|&x| x < y);
        let upto = self.sorted.partition_point(|&x| x <= y);
        let n = self.n();
        let u = (below as f64 + 0.5 * (upto - below) as f64) / n;
        u.clamp(0.5 / n, 1.0 - 0.5 / n)
    }

    /// Distinct values with their mid-rank CDF.
    pub fn knots(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &v in &self.sorted {
            if out.last().is_none_or(|(x, _)| *x != v) {
                out.push((v, self.cdf(v)));
            }
        }
        out
    }

    /// Piecewise-linear inverse through the knots; beyond them the end
    /// slopes continue, clamped to `[0, 2·max]`.
    pub fn inverse(&self, u: f64) -> f64 {
        let k = self.knots();
        let max = *self.sorted.last().unwrap_or(&0.0);
        let interp = |a: (f64, f64), b: (f64, f64)| a.0 + (u - a.1) * (b.0 - a.0) / (b.1 - a.1);
        let y = if k.len() < 2 {
            k.first().map_or(0.0, |p| p.0)
        } else if u <= k[0].1 {
            interp(k[0], k[1])
        } else if u >= k[k.len() - 1].1 {
            interp(k[k.len() - 2], k[k.len() - 1])
        } else {
            let j = k.partition_point(|p| p.1 <= u);
            interp(k[j - 1], k[j])
        };
        y.clamp(0.0, 2.0 * max)
    }

    pub fn to_normal(&self, y: f64) -> f64 {
        normal_quantile(self.cdf(y))
    }

    pub fn from_normal(&self, z: f64) -> f64 {
        self.inverse(normal_cdf(z))
    }
}

pub(crate) struct Arch {
    profession: Embedding,
    module: Embedding,
    region: Embedding,
    lstm: LstmParams,
    mean: Dense,
    diag: Dense,
    pub(crate) factor: Dense,
}

pub(crate) fn build(config: &GpCopulaConfig, vocab: &Vocabulary) -> (ParamStore, Arch) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "gp_copula.init"));
    let mut store = ParamStore::new();
    let profession = Embedding::new(&mut store, &mut rng, "profession", vocab.professions.len());
    let module = Embedding::new(&mut store, &mut rng, "module", vocab.modules.len());
    let region = Embedding::new(&mut store, &mut rng, "region", vocab.regions.len());
    let inputs = COVARIATE_WIDTH + 1 + profession.dim + module.dim + region.dim;
    let lstm = LstmParams::new(&mut store, &mut rng, "lstm", inputs, config.hidden, config.layers);
    let mean = Dense::new(&mut store, &mut rng, "mean", config.hidden, 1);
    let diag = Dense::new(&mut store, &mut rng, "diag", config.hidden, 1);
    let factor = Dense::new(&mut store, &mut rng, "factor", config.hidden, config.rank);
    (store, Arch { profession, module, region, lstm, mean, diag, factor })
}

struct Net<'a> {
    store: &'a ParamStore,
    arch: &'a Arch,
    dropout: f64,
}

impl Net<'_> {
    fn embeddings(&self, g: &mut Graph, idx: &[[usize; 3]]) -> Result<Var> {
        let col = |j: usize| idx.iter().map(|i| i[j]).collect::<Vec<_>>();
        let p = self.arch.profession.forward(g, self.store, &col(0))?;
        let m = self.arch.module.forward(g, self.store, &col(1))?;
        let r = self.arch.region.forward(g, self.store, &col(2))?;
        g.concat(&[p, m, r])
    }

    /// One step for a batch of rows; returns `(μ [B,1], d [B,1], V [B,r])`.
    fn step(
        &self,
        g: &mut Graph,
        emb: Var,
        cov: &[[f64; COVARIATE_WIDTH]],
        lagged_z: &[f64],
        state: &LstmState,
    ) -> Result<(Var, Var, Var, LstmState)> {
        let b = cov.len();
        let mut x = Vec::with_capacity(b * (COVARIATE_WIDTH + 1));
        for (c, z) in cov.iter().zip(lagged_z) {
            x.extend_from_slice(c);
            x.push(*z);
        }
        let x = g.constant(Tensor::new([b, COVARIATE_WIDTH + 1], x)?);
        let x = g.concat(&[x, emb])?;
        let (h, next) = lstm_step(g, self.store, &self.arch.lstm, x, state, self.dropout)?;
        let mu = self.arch.mean.forward(g, self.store, h)?;
        let d = self.arch.diag.forward(g, self.store, h)?;
        let d = g.softplus(d);
        let floor = g.constant(Tensor::scalar(MIN_DIAG));
        let d = g.add(d, floor)?;
        let v = self.arch.factor.forward(g, self.store, h)?;
        Ok((mu, d, v, next))
    }
}

struct CopulaSeries {
    idx: [usize; 3],
    z: Vec<f64>,
}

/// Train the copula on `train`. Series whose training values are constant
/// have no usable marginal; they are excluded and listed in
/// [`GlobalModel::dropped`].
pub fn fit_gp_copula(train: &Panel, config: &GpCopulaConfig) -> Result<GlobalModel> {
    config.validate()?;
    let window = config.context + config.horizon;
    let train_len = train.calendar().length;
    if train_len < window + 1 {
        return Err(Error::History(format!("copula training needs {} days, got {train_len}", window + 1)));
    }
    let vocab = Vocabulary::from_keys(train.keys());
    let (mut store, arch) = build(config, &vocab);
    let mut stats = BTreeMap::new();
    let mut dropped = BTreeMap::new();
    let mut series = Vec::new();
    for (key, values) in panel_series(train) {
        match EmpiricalCdf::fit(&values) {
            Some(cdf) => {
                let z = values.iter().map(|&y| cdf.to_normal(y)).collect();
                series.push(CopulaSeries { idx: vocab.indices(&key)?, z });
                stats.insert(key.to_string(), SeriesStats { scale: 1.0, residuals: Vec::new(), cdf: Some(cdf) });
            }
            None => {
                log::warn!("gp_copula: {key} is constant over the training slice and is left out");
                dropped.insert(key.to_string(), "constant training values".to_string());
            }
        }
    }
    if series.len() < 2 {
        return Err(Error::History(format!("copula needs at least two non-constant series, got {}", series.len())));
    }
    if config.rank > series.len() {
        return Err(Error::Config(format!("rank {} exceeds the {} usable series", config.rank, series.len())));
    }
    let block = config.series_batch.min(series.len());
    let cov = covariates_for(train.calendar(), 0, train_len).normalized;

    let mut adam = AdamState::new(&store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "gp_copula.batches"));
    let mut order: Vec<usize> = (0..series.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainingLog::default();
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for b in 0..config.batches_per_epoch {
            // Shuffled blocks; every series is visited before any repeats.
            let mut members = Vec::with_capacity(block);
            while members.len() < block {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                if !members.contains(&order[cursor]) {
                    members.push(order[cursor]);
                }
                cursor += 1;
            }
            let t0 = rng.random_range(1..=train_len - window);
            let net = Net { store: &store, arch: &arch, dropout: config.dropout };
            let mut g = Graph::new(derive_indexed(config.seed, (epoch * config.batches_per_epoch + b) as u64));
            let idx: Vec<[usize; 3]> = members.iter().map(|&m| series[m].idx).collect();
            let emb = net.embeddings(&mut g, &idx)?;
            let mut state = arch.lstm.zero_state(&mut g, block);
            let mut loss: Option<Var> = None;
            for k in 0..window {
                let t = t0 + k;
                let lag: Vec<f64> = members.iter().map(|&m| series[m].z[t - 1]).collect();
                let (mu, d, v, next) = net.step(&mut g, emb, &vec![cov[t]; block], &lag, &state)?;
                state = next;
                let z: Vec<f64> = members.iter().map(|&m| series[m].z[t]).collect();
                let nll = g.lowrank_gaussian_nll(&z, mu, d, v)?;
                loss = Some(match loss {
                    Some(acc) => g.add(acc, nll)?,
                    None => nll,
                });
            }
            let loss = g.scale(loss.expect("window is non-empty"), 1.0 / (window * block) as f64);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite("gp_copula", epoch, b + 1, value));
            }
            let mut grads = g.backward(loss)?;
            grads.clip_global_norm(config.clip_norm);
            adam.step(&mut store, &grads)?;
            total += value;
        }
        let mean = total / config.batches_per_epoch as f64;
        log::debug!("gp_copula epoch {epoch}: nll {mean:.5}");
        log.epoch_loss.push(mean);
    }
    log.best_epoch = config.epochs;
    Ok(GlobalModel {
        config: DeepConfig::GpCopula(config.clone()),
        vocab,
        calendar: *train.calendar(),
        series: stats,
        dropped,
        training: log,
        params: store,
    })
}

/// Joint forecast of every trained series in `history` (values up to the
/// origin). Sample paths share the low-rank factor draws across series, so
/// path `s` of one series is correlated with path `s` of every other.
pub fn forecast_gp_copula(
    model: &GlobalModel,
    history: &Panel,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<BTreeMap<SeriesKey, ForecastDistribution>> {
    let DeepConfig::GpCopula(config) = &model.config else {
        return Err(Error::Contract(format!("expected a gp_copula model, got {}", model.config.name())));
    };
    if samples == 0 || horizon == 0 {
        return Err(Error::Config("samples and horizon must be positive".into()));
    }
    let n = history.calendar().length;
    if n < config.context + 1 {
        return Err(Error::History(format!("forecasting needs {} days of history, got {n}", config.context + 1)));
    }
    let (_, arch) = build(config, &model.vocab);
    let net = Net { store: &model.params, arch: &arch, dropout: 0.0 };
    let from = n - config.context;
    let cov = model.covariates(history.calendar().date(from), config.context + horizon);
    let rank = config.rank;
    let mut eta_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gp_copula.factor"));
    let eta: Vec<f64> = (0..samples * horizon * rank).map(|_| eta_rng.sample(StandardNormal)).collect();

    let mut out = BTreeMap::new();
    for (key, values) in history.iter() {
        let Ok(stats) = model.stats(key) else { continue };
        let Some(cdf) = &stats.cdf else { continue };
        let idx = model.vocab.indices(key)?;
        let z: Vec<f64> = values.iter().map(|&y| cdf.to_normal(y as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &key.to_string()));
        let mut g = Graph::eval();
        let emb = net.embeddings(&mut g, &vec![idx; samples])?;
        let mut state = arch.lstm.zero_state(&mut g, samples);
        for k in 0..config.context {
            let (_, _, _, next) = net.step(&mut g, emb, &vec![cov[k]; samples], &vec![z[from + k - 1]; samples], &state)?;
            state = next;
        }
        let mut prev = vec![z[n - 1]; samples];
        let mut paths = vec![Vec::with_capacity(horizon); samples];
        for h in 0..horizon {
            let (mu, d, v, next) = net.step(&mut g, emb, &vec![cov[config.context + h]; samples], &prev, &state)?;
            state = next;
            let (mu, d, v) = (&g.value(mu).values, &g.value(d).values, &g.value(v).values);
            for s in 0..samples {
                let e: f64 = rng.sample(StandardNormal);
                let shared: f64 = (0..rank).map(|j| v[s * rank + j] * eta[(s * horizon + h) * rank + j]).sum();
                let zs = mu[s] + d[s].sqrt() * e + shared;
                if !zs.is_finite() {
                    return Err(Error::Numerics(format!("non-finite copula sample for {key}")));
                }
                prev[s] = zs;
                paths[s].push(cdf.from_normal(zs));
            }
        }
        out.insert(key.clone(), ForecastDistribution::from_samples(paths)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{parse_date, Calendar};

    fn tiny() -> GpCopulaConfig {
        GpCopulaConfig {
            hidden: 8,
            batches_per_epoch: 10,
            series_batch: 3,
            context: 7,
            horizon: 7,
            samples: 50,
            rank: 2,
            ..GpCopulaConfig::default()
        }
    }

    fn panel(days: usize) -> Panel {
        let cal = Calendar::new(parse_date("2020-01-01").unwrap(), days);
        let mut series = BTreeMap::new();
        for (i, m) in ["a", "b", "c", "d"].iter().enumerate() {
            let v = (0..days).map(|t| (3 + i + (t * (i + 1)) % 5) as u32).collect();
            series.insert(SeriesKey::new("p", m, None).unwrap(), v);
        }
        series.insert(SeriesKey::new("p", "flat", None).unwrap(), vec![4; days]);
        Panel::new(cal, series).unwrap()
    }

    #[test]
    fn mid_rank_cdf() {
        let c = EmpiricalCdf::fit(&[1.0, 2.0, 3.0]).unwrap();
        assert!((c.cdf(2.0) - 0.5).abs() < 1e-15);
        let ties = EmpiricalCdf::fit(&[0.0, 0.0, 0.0, 5.0]).unwrap();
        assert!((ties.cdf(0.0) - 0.375).abs() < 1e-15);
        assert!(EmpiricalCdf::fit(&[2.0, 2.0]).is_none());
    }

    #[test]
    fn inverse_recovers_in_sample_values() {
        let data = [0.0, 3.0, 3.0, 7.0, 10.0, 10.0, 10.0, 12.0];
        let c = EmpiricalCdf::fit(&data).unwrap();
        for &y in &data {
            assert!((c.inverse(c.cdf(y)) - y).abs() < 1e-12);
            assert!((c.from_normal(c.to_normal(y)) - y).abs() < 1e-9);
        }
        assert_eq!(c.inverse(0.0), 0.0);
        assert!(c.inverse(1.0) <= 24.0);
    }

    #[test]
    fn constant_series_dropped() {
        let p = panel(40);
        let m = fit_gp_copula(&p, &GpCopulaConfig { epochs: 1, ..tiny() }).unwrap();
        assert!(m.dropped.contains_key("p/flat/all"));
        let key = SeriesKey::new("p", "flat", None).unwrap();
        assert!(matches!(m.stats(&key), Err(Error::Category(_))));
        let fc = forecast_gp_copula(&m, &p, 5, 10, 1).unwrap();
        assert_eq!(fc.len(), 4);
        assert!(fc.values().all(|f| f.samples().unwrap().iter().flatten().all(|v| *v >= 0.0)));
    }

    #[test]
    fn rank_above_series_count_rejected() {
        let p = panel(40);
        assert!(matches!(fit_gp_copula(&p, &GpCopulaConfig { rank: 5, ..tiny() }), Err(Error::Config(_))));
    }

    #[test]
    fn zero_factor_gives_independent_series() {
        let p = panel(40);
        let mut m = fit_gp_copula(&p, &GpCopulaConfig { epochs: 1, ..tiny() }).unwrap();
        let DeepConfig::GpCopula(cfg) = &m.config else { unreachable!() };
        let (_, arch) = build(cfg, &m.vocab);
        for id in [arch.factor.weight, arch.factor.bias] {
            m.params.get_mut(id).values.fill(0.0);
        }
        let fc = forecast_gp_copula(&m, &p, 1, 2000, 3).unwrap();
        let a: Vec<f64> = fc.values().next().unwrap().samples().unwrap().iter().map(|p| p[0]).collect();
        let b: Vec<f64> = fc.values().nth(1).unwrap().samples().unwrap().iter().map(|p| p[0]).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let corr = cov / (va * vb).sqrt();
        // Standard error of a null correlation with 2000 draws is about 0.022.
        assert!(corr.abs() < 0.1, "{corr}");
    }

    #[test]
    fn training_is_reproducible() {
        let p = panel(40);
        let a = fit_gp_copula(&p, &GpCopulaConfig { epochs: 1, ..tiny() }).unwrap();
        let b = fit_gp_copula(&p, &GpCopulaConfig { epochs: 1, ..tiny() }).unwrap();
        assert_eq!(a.params, b.params);
    }
}
