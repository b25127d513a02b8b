//! Global neural forecasters trained jointly over every series of a panel.

pub mod copula;
pub mod deepar;
pub mod embed_nn;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{covariates_from, Calendar, Panel, SeriesKey, COVARIATE_WIDTH};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::ParamStore;

pub use copula::{fit_gp_copula, forecast_gp_copula, EmpiricalCdf, GpCopulaConfig};
pub use deepar::{fit_deepar, forecast_deepar, DeepArConfig};
pub use embed_nn::{fit_embed_nn, predict_embed_nn, EmbedNnConfig};

/// Ordered category labels for each key field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub professions: Vec<String>,
    pub modules: Vec<String>,
    pub regions: Vec<String>,
}

impl Vocabulary {
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a SeriesKey>) -> Self {
        let mut v = Self::default();
        for k in keys {
            v.professions.push(k.profession.clone());
            v.modules.push(k.module.clone());
            v.regions.push(k.region.clone());
        }
        for list in [&mut v.professions, &mut v.modules, &mut v.regions] {
            list.sort();
            list.dedup();
        }
        v
    }

    /// `[profession, module, region]` indices of `key`.
    pub fn indices(&self, key: &SeriesKey) -> Result<[usize; 3]> {
        let find = |list: &[String], label: &str, field: &str| {
            list.binary_search_by(|x| x.as_str().cmp(label))
                .map_err(|_| Error::Category(format!("{field} '{label}' was not seen in training")))
        };
        Ok([
            find(&self.professions, &key.profession, "profession")?,
            find(&self.modules, &key.module, "module")?,
            find(&self.regions, &key.region, "region")?,
        ])
    }
}

/// Hyperparameters of whichever network a [`GlobalModel`] holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DeepConfig {
    EmbedNn(EmbedNnConfig),
    #[serde(rename = "deepar")]
    DeepAr(DeepArConfig),
    GpCopula(GpCopulaConfig),
}

impl DeepConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DeepConfig::EmbedNn(_) => "embed_nn",
            DeepConfig::DeepAr(_) => "deepar",
            DeepConfig::GpCopula(_) => "gp_copula",
        }
    }
}

/// Per-series statistics kept next to the shared weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    /// Input/output scale: training max for the embedding network,
    /// `1 + mean` for the autoregressive network, unused by the copula.
    pub scale: f64,
    /// Sorted validation residuals (embedding network only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residuals: Vec<f64>,
    /// Empirical marginal distribution (copula only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdf: Option<EmpiricalCdf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation loss after every epoch, when a validation slice exists.
    pub validation_loss: Vec<f64>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
}

/// One trained network serving every series of the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub config: DeepConfig,
    pub vocab: Vocabulary,
    /// Calendar of the training slice; fixes covariate normalization.
    pub calendar: Calendar,
    /// Keyed by the `profession/module/region` form of the series key.
    pub series: BTreeMap<String, SeriesStats>,
    /// Series left out of training, with the reason.
    pub dropped: BTreeMap<String, String>,
    pub training: TrainingLog,
    #[serde(skip)]
    pub params: ParamStore,
}

const CHECKPOINT_FILE: &str = "weights.ckpt";
const MANIFEST_FILE: &str = "manifest.json";

impl GlobalModel {
    pub fn stats(&self, key: &SeriesKey) -> Result<&SeriesStats> {
        if let Some(reason) = self.dropped.get(&key.to_string()) {
            return Err(Error::Category(format!("series {key} was excluded from training: {reason}")));
        }
        self.series
            .get(&key.to_string())
            .ok_or_else(|| Error::Category(format!("series {key} was not seen in training")))
    }

    /// Normalized calendar covariates for `len` days from `first`.
    pub fn covariates(&self, first: NaiveDate, len: usize) -> Vec<[f64; COVARIATE_WIDTH]> {
        covariates_from(&self.calendar, first, len).normalized
    }

    /// Write `weights.ckpt` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
        write_checkpoint(&mut w, self.config.name(), &self.params)?;
        w.flush()?;
        let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut m, self)?;
        m.flush()?;
        Ok(())
    }

    /// Inverse of [`GlobalModel::save`]. The architecture is rebuilt from
    /// the manifest and every tensor must match it by name and shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = BufReader::new(File::open(dir.join(MANIFEST_FILE))?);
        let mut model: GlobalModel = serde_json::from_reader(m)?;
        let (name, stored) = read_checkpoint(BufReader::new(File::open(dir.join(CHECKPOINT_FILE))?))?;
        if name != model.config.name() {
            return Err(Error::Format(format!(
                "checkpoint holds a {name} model but the manifest describes {}",
                model.config.name()
            )));
        }
        let mut fresh = match &model.config {
            DeepConfig::EmbedNn(c) => embed_nn::build(c, &model.vocab).0,
            DeepConfig::DeepAr(c) => deepar::build(c, &model.vocab).0,
            DeepConfig::GpCopula(c) => copula::build(c, &model.vocab).0,
        };
        if fresh.len() != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                stored.len(),
                fresh.len()
            )));
        }
        for id in fresh.ids().collect::<Vec<_>>() {
            let name = fresh.name(id).to_string();
            let src = stored
                .find(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            let t = stored.get(src);
            if t.shape != fresh.get(id).shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape,
                    fresh.get(id).shape
                )));
            }
            *fresh.get_mut(id) = t.clone();
        }
        model.params = fresh;
        Ok(model)
    }
}

/// Series of `panel` as `(key, values)` in key order.
pub(crate) fn panel_series(panel: &Panel) -> Vec<(SeriesKey, Vec<f64>)> {
    panel
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|&x| x as f64).collect()))
        .collect()
}

pub(crate) fn non_finite(model: &str, epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Numerics(format!("{model} loss became {loss} at epoch {epoch}, batch {batch}"))
}

pub(crate) fn require_epochs(epochs: usize) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_lookup() {
        let keys = [
            SeriesKey::new("nurse", "b", None).unwrap(),
            SeriesKey::new("midwife", "a", None).unwrap(),
        ];
        let v = Vocabulary::from_keys(&keys);
        assert_eq!(v.professions, vec!["midwife", "nurse"]);
        assert_eq!(v.indices(&keys[0]).unwrap(), [1, 1, 0]);
        let unseen = SeriesKey::new("doctor", "a", None).unwrap();
        assert!(matches!(v.indices(&unseen), Err(Error::Category(_))));
    }

    fn tiny_panel() -> Panel {
        use crate::ingest::{synth_panel, SynthSpec};
        synth_panel(&SynthSpec {
            n_professions: 2,
            n_modules: 2,
            days: 90,
            shock_day: None,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn roundtrip(model: &GlobalModel, tag: &str) -> GlobalModel {
        let dir = std::env::temp_dir().join(format!("demandcast-ckpt-{tag}-{}", std::process::id()));
        model.save(&dir).unwrap();
        let back = GlobalModel::load(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        back
    }

    #[test]
    fn saved_models_forecast_identically() {
        let panel = tiny_panel();
        let train = panel.slice(0, 70).unwrap();
        let val = panel.slice(70, 90).unwrap();
        let key = panel.keys().next().unwrap().clone();
        let hist = panel.values_f64(&key).unwrap();
        let start = panel.calendar().start;

        let cfg = DeepArConfig { hidden: 4, epochs: 1, batches_per_epoch: 2, batch_size: 4, context: 10, horizon: 10, ..Default::default() };
        let m = fit_deepar(&train, &val, &cfg).unwrap();
        let back = roundtrip(&m, "deepar");
        assert_eq!(back, m);
        let f = |g: &GlobalModel| forecast_deepar(g, &key, &hist, start, 5, 10, 3).unwrap();
        assert_eq!(f(&m), f(&back));

        let cfg = EmbedNnConfig { hidden: [6, 3], epochs: 1, ..Default::default() };
        let m = fit_embed_nn(&train, &val, &cfg).unwrap();
        let back = roundtrip(&m, "embed");
        let cov = m.covariates(val.calendar().start, 5);
        assert_eq!(predict_embed_nn(&m, &key, &cov).unwrap(), predict_embed_nn(&back, &key, &cov).unwrap());

        let cfg = GpCopulaConfig { hidden: 4, epochs: 1, batches_per_epoch: 2, series_batch: 2, context: 10, horizon: 10, rank: 2, ..Default::default() };
        let m = fit_gp_copula(&panel, &cfg).unwrap();
        let back = roundtrip(&m, "copula");
        assert_eq!(back.series, m.series);
        assert_eq!(
            forecast_gp_copula(&m, &panel, 5, 10, 4).unwrap(),
            forecast_gp_copula(&back, &panel, 5, 10, 4).unwrap()
        );
    }

    #[test]
    fn load_rejects_mismatched_architecture() {
        let panel = tiny_panel();
        let cfg = DeepArConfig { hidden: 4, epochs: 1, batches_per_epoch: 1, batch_size: 2, context: 10, horizon: 10, ..Default::default() };
        let m = fit_deepar(&panel.slice(0, 70).unwrap(), &panel.slice(70, 90).unwrap(), &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("demandcast-ckpt-bad-{}", std::process::id()));
        m.save(&dir).unwrap();
        let mut tampered = m.clone();
        if let DeepConfig::DeepAr(c) = &mut tampered.config {
            c.hidden = 5;
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec(&tampered).unwrap()).unwrap();
        assert!(matches!(GlobalModel::load(&dir), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
