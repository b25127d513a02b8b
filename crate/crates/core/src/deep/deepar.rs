//! Autoregressive LSTM with a negative-binomial output head.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep::{non_finite, panel_series, require_epochs, DeepConfig, GlobalModel, SeriesStats, TrainingLog, Vocabulary};
use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;
use crate::panel::{covariates_for, Panel, SeriesKey, COVARIATE_WIDTH};
use crate::seed::{derive_indexed, derive_seed};
use crate::tensor::dist::neg_binomial_sample;
use crate::tensor::nn::{Dense, Embedding};
use crate::tensor::{lstm_step, AdamState, Graph, LstmParams, LstmState, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepArConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradient steps per epoch; each draws a fresh batch of windows.
    pub batches_per_epoch: usize,
    pub context: usize,
    pub horizon: usize,
    /// Sample paths drawn per forecast.
    pub samples: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DeepArConfig {
    fn default() -> Self {
        Self {
            hidden: 20,
            layers: 2,
            dropout: 0.01,
            epochs: 300,
            batch_size: 30,
            batches_per_epoch: 50,
            context: 30,
            horizon: 30,
            samples: 100,
            learning_rate: 1e-3,
            clip_norm: 10.0,
            seed: 42,
        }
    }
}

impl DeepArConfig {
    pub fn validate(&self) -> Result<()> {
        require_epochs(self.epochs)?;
        if self.hidden == 0 || self.layers == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("hidden size, layers, batch size and batches per epoch must be positive".into()));
        }
        if self.context == 0 || self.horizon == 0 || self.samples == 0 {
            return Err(Error::Config("context, horizon and sample count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("dropout must lie in [0, 1); learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) struct Arch {
    profession: Embedding,
    module: Embedding,
    region: Embedding,
    lstm: LstmParams,
    head: Dense,
}

pub(crate) fn build(config: &DeepArConfig, vocab: &Vocabulary) -> (ParamStore, Arch) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "deepar.init"));
    let mut store = ParamStore::new();
    let profession = Embedding::new(&mut store, &mut rng, "profession", vocab.professions.len());
    let module = Embedding::new(&mut store, &mut rng, "module", vocab.modules.len());
    let region = Embedding::new(&mut store, &mut rng, "region", vocab.regions.len());
    let inputs = COVARIATE_WIDTH + 1 + profession.dim + module.dim + region.dim;
    let lstm = LstmParams::new(&mut store, &mut rng, "lstm", inputs, config.hidden, config.layers);
    let head = Dense::new(&mut store, &mut rng, "head", config.hidden, 2);
    (store, Arch { profession, module, region, lstm, head })
}

/// `1 + mean` of the training values.
pub fn series_scale(values: &[f64]) -> f64 {
    1.0 + values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// One sequence fed through the network: previous values `lagged[k]`
/// (raw counts) and covariates `cov[k]` produce the distribution of step k.
struct Sequence<'a> {
    idx: [usize; 3],
    scale: f64,
    lagged: &'a [f64],
    cov: &'a [[f64; COVARIATE_WIDTH]],
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

    /// Advance one step; returns `(μ, α)` as `[B, 1]` nodes.
    fn step(
        &self,
        g: &mut Graph,
        emb: Var,
        scale: Var,
        cov: &[[f64; COVARIATE_WIDTH]],
        lagged_scaled: &[f64],
        state: &LstmState,
    ) -> Result<(Var, Var, LstmState)> {
        let b = cov.len();
        let mut x = Vec::with_capacity(b * (COVARIATE_WIDTH + 1));
        for (c, y) in cov.iter().zip(lagged_scaled) {
            x.extend_from_slice(c);
            x.push(*y);
        }
        let x = g.constant(Tensor::new([b, COVARIATE_WIDTH + 1], x)?);
        let x = g.concat(&[x, emb])?;
        let (h, next) = lstm_step(g, self.store, &self.arch.lstm, x, state, self.dropout)?;
        let out = self.arch.head.forward(g, self.store, h)?;
        let out = g.softplus(out);
        let mu = g.slice_cols(out, 0, 1)?;
        let mu = g.mul(mu, scale)?;
        let alpha = g.slice_cols(out, 1, 2)?;
        Ok((mu, alpha, next))
    }

    /// Mean NB negative log-likelihood over steps `score_from..` of equal
    /// length sequences, teacher-forced.
    fn sequence_nll(&self, g: &mut Graph, seqs: &[Sequence], targets: &[&[f64]], score_from: usize) -> Result<Var> {
        let steps = seqs[0].lagged.len();
        let idx: Vec<[usize; 3]> = seqs.iter().map(|s| s.idx).collect();
        let emb = self.embeddings(g, &idx)?;
        let scale = g.constant(Tensor::new([seqs.len(), 1], seqs.iter().map(|s| s.scale).collect())?);
        let mut state = self.arch.lstm.zero_state(g, seqs.len());
        let mut terms = Vec::with_capacity(steps - score_from);
        for k in 0..steps {
            let cov: Vec<[f64; COVARIATE_WIDTH]> = seqs.iter().map(|s| s.cov[k]).collect();
            let lagged: Vec<f64> = seqs.iter().map(|s| s.lagged[k] / s.scale).collect();
            let (mu, alpha, next) = self.step(g, emb, scale, &cov, &lagged, &state)?;
            state = next;
            if k >= score_from {
                let y: Vec<f64> = targets.iter().map(|t| t[k]).collect();
                terms.push(g.neg_binomial_nll(&y, mu, alpha)?);
            }
        }
        let all = g.concat(&terms)?;
        Ok(g.mean(all))
    }
}

struct TrainSeries {
    key: SeriesKey,
    idx: [usize; 3],
    scale: f64,
    /// Training values followed by validation values.
    values: Vec<f64>,
}

/// Train on `train`, keeping the epoch with the lowest validation NLL on
/// `validation` (same keys, the days right after `train`).
pub fn fit_deepar(train: &Panel, validation: &Panel, config: &DeepArConfig) -> Result<GlobalModel> {
    config.validate()?;
    let window = config.context + config.horizon;
    let train_len = train.calendar().length;
    if train.is_empty() || train_len < window + 1 {
        return Err(Error::History(format!(
            "autoregressive training needs {} days per series, got {train_len}",
            window + 1
        )));
    }
    let vocab = Vocabulary::from_keys(train.keys());
    let (mut store, arch) = build(config, &vocab);
    let val_len = validation.calendar().length;
    let validation = if val_len > 0 { Some(validation.select(&train.keys().cloned().collect::<Vec<_>>())?) } else { None };
    let mut series = Vec::new();
    for (key, mut values) in panel_series(train) {
        let scale = series_scale(&values);
        if let Some(v) = &validation {
            values.extend(v.get(&key).unwrap_or(&[]).iter().map(|&x| x as f64));
        }
        series.push(TrainSeries { idx: vocab.indices(&key)?, key, scale, values });
    }
    let cov = covariates_for(train.calendar(), 0, train_len + val_len).normalized;

    let mut adam = AdamState::new(&store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "deepar.windows"));
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for b in 0..config.batches_per_epoch {
            // Windows end inside the training slice: targets t0..t0+window
            // with t0 + window <= train_len.
            let picks: Vec<(usize, usize)> = (0..config.batch_size)
                .map(|_| (rng.random_range(0..series.len()), rng.random_range(1..=train_len - window)))
                .collect();
            let seqs: Vec<Sequence> = picks
                .iter()
                .map(|&(s, t0)| Sequence {
                    idx: series[s].idx,
                    scale: series[s].scale,
                    lagged: &series[s].values[t0 - 1..t0 - 1 + window],
                    cov: &cov[t0..t0 + window],
                })
                .collect();
            let targets: Vec<&[f64]> = picks.iter().map(|&(s, t0)| &series[s].values[t0..t0 + window]).collect();
            let net = Net { store: &store, arch: &arch, dropout: config.dropout };
            let mut g = Graph::new(derive_indexed(config.seed, (epoch * config.batches_per_epoch + b) as u64));
            let loss = net.sequence_nll(&mut g, &seqs, &targets, 0)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite("deepar", epoch, b + 1, value));
            }
            let mut grads = g.backward(loss)?;
            grads.clip_global_norm(config.clip_norm);
            adam.step(&mut store, &grads)?;
            total += value;
        }
        let train_loss = total / config.batches_per_epoch as f64;
        log.epoch_loss.push(train_loss);
        let score = if val_len > 0 {
            let v = validation_nll(&store, &arch, config, &series, &cov, train_len, val_len)?;
            log.validation_loss.push(v);
            v
        } else {
            train_loss
        };
        log::debug!("deepar epoch {epoch}: train {train_loss:.5}, selection {score:.5}");
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, store.clone()));
            log.best_epoch = epoch;
        }
    }
    let store = best.map(|(_, s)| s).unwrap_or(store);
    let stats = series
        .iter()
        .map(|s| (s.key.to_string(), SeriesStats { scale: s.scale, ..SeriesStats::default() }))
        .collect();
    Ok(GlobalModel {
        config: DeepConfig::DeepAr(config.clone()),
        vocab,
        calendar: *train.calendar(),
        series: stats,
        dropped: BTreeMap::new(),
        training: log,
        params: store,
    })
}

/// NLL of the validation days given the preceding context, all series.
fn validation_nll(
    store: &ParamStore,
    arch: &Arch,
    config: &DeepArConfig,
    series: &[TrainSeries],
    cov: &[[f64; COVARIATE_WIDTH]],
    train_len: usize,
    val_len: usize,
) -> Result<f64> {
    let ctx = config.context.min(train_len - 1);
    let from = train_len - ctx;
    let to = train_len + val_len;
    let seqs: Vec<Sequence> = series
        .iter()
        .map(|s| Sequence { idx: s.idx, scale: s.scale, lagged: &s.values[from - 1..to - 1], cov: &cov[from..to] })
        .collect();
    let targets: Vec<&[f64]> = series.iter().map(|s| &s.values[from..to]).collect();
    let net = Net { store, arch, dropout: 0.0 };
    let mut g = Graph::eval();
    let loss = net.sequence_nll(&mut g, &seqs, &targets, ctx)?;
    Ok(g.scalar(loss))
}

/// Mean NB negative log-likelihood the model assigns to `values` of `key`
/// (teacher-forced, every step after the first scored).
pub fn deepar_nll(model: &GlobalModel, key: &SeriesKey, values: &[f64], start: NaiveDate) -> Result<f64> {
    let DeepConfig::DeepAr(config) = &model.config else {
        return Err(Error::Contract(format!("expected a deepar model, got {}", model.config.name())));
    };
    if values.len() < 2 {
        return Err(Error::History("need at least two values".into()));
    }
    let idx = model.vocab.indices(key)?;
    let scale = model.stats(key)?.scale;
    let (_, arch) = build(config, &model.vocab);
    let cov = model.covariates(start, values.len());
    let seq = Sequence { idx, scale, lagged: &values[..values.len() - 1], cov: &cov[1..] };
    let net = Net { store: &model.params, arch: &arch, dropout: 0.0 };
    let mut g = Graph::eval();
    let loss = net.sequence_nll(&mut g, &[seq], &[&values[1..]], 0)?;
    Ok(g.scalar(loss))
}

/// Draw `samples` ancestral paths of length `horizon` following `history`
/// (whose first day is `history_start`). The point forecast is the
/// per-step median.
pub fn forecast_deepar(
    model: &GlobalModel,
    key: &SeriesKey,
    history: &[f64],
    history_start: NaiveDate,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<ForecastDistribution> {
    let DeepConfig::DeepAr(config) = &model.config else {
        return Err(Error::Contract(format!("expected a deepar model, got {}", model.config.name())));
    };
    if history.len() < config.context + 1 {
        return Err(Error::History(format!(
            "forecasting needs {} days of history, got {}",
            config.context + 1,
            history.len()
        )));
    }
    if samples == 0 || horizon == 0 {
        return Err(Error::Config("samples and horizon must be positive".into()));
    }
    let idx = model.vocab.indices(key)?;
    let scale = model.stats(key)?.scale;
    let (_, arch) = build(config, &model.vocab);
    let net = Net { store: &model.params, arch: &arch, dropout: 0.0 };
    let n = history.len();
    let from = n - config.context;
    let first = history_start + chrono::Duration::days(from as i64);
    let cov = model.covariates(first, config.context + horizon);

    let mut g = Graph::eval();
    let emb = net.embeddings(&mut g, &vec![idx; samples])?;
    let scale_v = g.constant(Tensor::new([samples, 1], vec![scale; samples])?);
    let mut state = arch.lstm.zero_state(&mut g, samples);
    for k in 0..config.context {
        let lag = vec![history[from + k - 1] / scale; samples];
        let (_, _, next) = net.step(&mut g, emb, scale_v, &vec![cov[k]; samples], &lag, &state)?;
        state = next;
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..samples)
        .map(|s| ChaCha8Rng::seed_from_u64(derive_indexed(seed, s as u64)))
        .collect();
    let mut paths = vec![Vec::with_capacity(horizon); samples];
    let mut prev = vec![history[n - 1]; samples];
    for h in 0..horizon {
        let lag: Vec<f64> = prev.iter().map(|y| y / scale).collect();
        let (mu, alpha, next) = net.step(&mut g, emb, scale_v, &vec![cov[config.context + h]; samples], &lag, &state)?;
        state = next;
        let (mu, alpha) = (&g.value(mu).values, &g.value(alpha).values);
        for s in 0..samples {
            if !mu[s].is_finite() || !alpha[s].is_finite() {
                return Err(Error::Numerics(format!("non-finite forecast parameters for {key}")));
            }
            let y = neg_binomial_sample(&mut rngs[s], mu[s].max(1e-10), alpha[s]) as f64;
            paths[s].push(y);
            prev[s] = y;
        }
    }
    ForecastDistribution::from_samples(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{parse_date, Calendar};
    use crate::tensor::dist::neg_binomial_logpdf;

    fn tiny() -> DeepArConfig {
        DeepArConfig {
            hidden: 8,
            layers: 2,
            epochs: 2,
            batch_size: 8,
            batches_per_epoch: 5,
            context: 7,
            horizon: 7,
            samples: 20,
            ..DeepArConfig::default()
        }
    }

    fn panel(days: usize) -> Panel {
        let cal = Calendar::new(parse_date("2020-01-01").unwrap(), days);
        let mut series = std::collections::BTreeMap::new();
        for (i, m) in ["a", "b", "c"].iter().enumerate() {
            let v = (0..days).map(|t| (5 + i * 3 + (t % 7)) as u32).collect();
            series.insert(SeriesKey::new("p", m, None).unwrap(), v);
        }
        Panel::new(cal, series).unwrap()
    }

    #[test]
    fn scale_of_fives_is_six() {
        assert_eq!(series_scale(&[5.0; 10]), 6.0);
    }

    #[test]
    fn short_series_rejected() {
        let p = panel(10);
        assert!(matches!(
            fit_deepar(&p, &p.slice(0, 0).unwrap(), &tiny()),
            Err(Error::History(_))
        ));
    }

    #[test]
    fn one_epoch_beats_untrained() {
        let p = panel(80);
        let (train, val) = (p.slice(0, 60).unwrap(), p.slice(60, 80).unwrap());
        let key = p.keys().next().unwrap().clone();
        let values = p.values_f64(&key).unwrap();
        let start = p.calendar().start;
        let untrained = {
            let cfg = tiny();
            let vocab = Vocabulary::from_keys(train.keys());
            let (store, _) = build(&cfg, &vocab);
            let mut m = fit_deepar(&train, &val, &DeepArConfig { epochs: 1, ..cfg }).unwrap();
            m.params = store;
            deepar_nll(&m, &key, &values[..60], start).unwrap()
        };
        let cfg = DeepArConfig { epochs: 1, batches_per_epoch: 40, learning_rate: 1e-2, ..tiny() };
        let trained = fit_deepar(&train, &val, &cfg).unwrap();
        let after = deepar_nll(&trained, &key, &values[..60], start).unwrap();
        assert!(after < untrained, "{after} vs {untrained}");
    }

    #[test]
    fn window_loss_matches_hand_sum() {
        let p = panel(40);
        let model = fit_deepar(&p.slice(0, 30).unwrap(), &p.slice(30, 40).unwrap(), &DeepArConfig { epochs: 1, ..tiny() }).unwrap();
        let DeepConfig::DeepAr(cfg) = &model.config else { unreachable!() };
        let key = p.keys().next().unwrap().clone();
        let values = p.values_f64(&key).unwrap()[..15].to_vec();
        let nll = deepar_nll(&model, &key, &values, p.calendar().start).unwrap();

        // Recompute μ, α step by step and sum the log-pmf by hand.
        let (_, arch) = build(cfg, &model.vocab);
        let net = Net { store: &model.params, arch: &arch, dropout: 0.0 };
        let scale = model.stats(&key).unwrap().scale;
        let cov = model.covariates(p.calendar().start, values.len());
        let mut g = Graph::eval();
        let emb = net.embeddings(&mut g, &[model.vocab.indices(&key).unwrap()]).unwrap();
        let sv = g.constant(Tensor::scalar(scale));
        let mut state = arch.lstm.zero_state(&mut g, 1);
        let mut total = 0.0;
        for t in 1..values.len() {
            let (mu, alpha, next) = net.step(&mut g, emb, sv, &[cov[t]], &[values[t - 1] / scale], &state).unwrap();
            state = next;
            total -= neg_binomial_logpdf(values[t], g.scalar(mu), g.scalar(alpha)).unwrap();
        }
        let hand = total / (values.len() - 1) as f64;
        assert!((nll - hand).abs() < 1e-10, "{nll} vs {hand}");
    }

    #[test]
    fn forecast_is_deterministic_and_monotone() {
        let p = panel(50);
        let model = fit_deepar(&p.slice(0, 40).unwrap(), &p.slice(40, 50).unwrap(), &tiny()).unwrap();
        let key = p.keys().next().unwrap().clone();
        let v = p.values_f64(&key).unwrap();
        let a = forecast_deepar(&model, &key, &v, p.calendar().start, 5, 1, 9).unwrap();
        let b = forecast_deepar(&model, &key, &v, p.calendar().start, 5, 1, 9).unwrap();
        assert_eq!(a, b);
        let fd = forecast_deepar(&model, &key, &v, p.calendar().start, 5, 50, 9).unwrap();
        let (q10, q50, q90) = (fd.quantile(0.1), fd.quantile(0.5), fd.quantile(0.9));
        for h in 0..5 {
            assert!(q10[h] <= q50[h] && q50[h] <= q90[h]);
            assert_eq!(q50[h], fd.point[h]);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let p = panel(50);
        let (train, val) = (p.slice(0, 40).unwrap(), p.slice(40, 50).unwrap());
        let a = fit_deepar(&train, &val, &tiny()).unwrap();
        let b = fit_deepar(&train, &val, &tiny()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.training, b.training);
    }
}
