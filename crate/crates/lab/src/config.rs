//! Run configuration: a TOML document with one table per pipeline stage.
//!
//! Every field has a default, so an empty file (or no file) is a valid
//! config. Unknown keys are rejected. Stage seeds left unset are derived
//! from `master_seed` and the stage label with
//! [`tmle_lens_core::rng::derive_seed`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmle_lens_core::decomp::{SaeConfig, SaeVariant};
use tmle_lens_core::dgp::{DgpSpec, Family};
use tmle_lens_core::intervene::AblationScheme;
use tmle_lens_core::nnet::{Activation, NetConfig, TrainConfig};
use tmle_lens_core::rng::derive_seed;
use tmle_lens_core::trace::TraceConfig;

use crate::error::LabError;

pub const OUTPUT_DIR_ENV: &str = "TMLE_LENS_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Where artifacts go. Not part of the resolved copy or the fingerprint.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub dgp: DgpSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub tmle: TmleSection,
    pub probe: ProbeSection,
    pub ablate: AblateSection,
    pub trace: TraceSection,
    pub sae: SaeSection,
    pub synthgen: SynthgenSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 42,
            output_dir: PathBuf::from("tmle-lens-out"),
            dgp: DgpSection::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            tmle: TmleSection::default(),
            probe: ProbeSection::default(),
            ablate: AblateSection::default(),
            trace: TraceSection::default(),
            sae: SaeSection::default(),
            synthgen: SynthgenSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSection {
    pub family: Family,
    pub n: usize,
    pub seed: Option<u64>,
}

impl Default for DgpSection {
    fn default() -> Self {
        Self {
            family: Family::Ds1,
            n: 10_000,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    /// 9 for DS1 and 5 for DS2 when unset.
    pub hidden_layers: Option<usize>,
    pub hidden_size: usize,
    pub seed: Option<u64>,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            hidden_layers: None,
            hidden_size: 30,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub test_fraction: f64,
    pub standardize_outcome: bool,
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            alpha: t.alpha,
            test_fraction: t.test_fraction,
            standardize_outcome: t.standardize_outcome,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmleSection {
    pub truncation: f64,
}

impl Default for TmleSection {
    fn default() -> Self {
        Self {
            truncation: tmle_lens_core::causal::DEFAULT_TRUNCATION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// Covariate column the probes predict (0 = W1).
    pub target: usize,
    pub seed: Option<u64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { target: 0, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Share of neurons for the top, bottom and random schemes.
    pub fraction: f64,
    /// Number of random draws.
    pub random_repeats: usize,
    /// One band sweep per width.
    pub band_widths: Vec<f64>,
    pub seed: Option<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            random_repeats: 5,
            band_widths: vec![0.20, 0.05],
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    pub perturbation_sd_multiple: f64,
    pub relative_threshold: f64,
    pub probe_batch: usize,
    pub seed: Option<u64>,
}

impl Default for TraceSection {
    fn default() -> Self {
        let t = TraceConfig::default();
        Self {
            perturbation_sd_multiple: t.perturbation_sd_multiple,
            relative_threshold: t.relative_threshold,
            probe_batch: t.probe_batch,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaeKind {
    L1,
    TopK,
    JumpRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    /// Trunk layer (1-based); the deepest when unset.
    pub layer: Option<usize>,
    pub latent_dim: usize,
    pub variant: SaeKind,
    pub lambda: f64,
    pub k_active: usize,
    pub theta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Rows listed per latent in the top-activation table.
    pub top_rows: usize,
    /// Also fit a transcoder from the previous layer into `layer`.
    pub transcoder: bool,
    pub seed: Option<u64>,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            layer: None,
            latent_dim: 64,
            variant: SaeKind::L1,
            lambda: 0.01,
            k_active: 5,
            theta: 0.1,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 256,
            top_rows: 5,
            transcoder: true,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthgenSection {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Covariate whose first-layer weights the confounding sweep scales.
    pub confounder: usize,
    pub write_datasets: bool,
    pub seed: Option<u64>,
}

impl Default for SynthgenSection {
    fn default() -> Self {
        Self {
            alphas: tmle_lens_core::synthgen::DEFAULT_ALPHAS.to_vec(),
            betas: tmle_lens_core::synthgen::DEFAULT_BETAS.to_vec(),
            confounder: 0,
            write_datasets: true,
            seed: None,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // `key = <raw>` parses numbers, booleans, arrays and quoted strings;
    // anything else is taken as a bare string
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), LabError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Validation(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::Validation(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Validation(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, LabError> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| LabError::Validation(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, LabError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| LabError::Validation(format!("config file {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Resolved configuration as TOML, without the output directory.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`RunConfig::resolved_toml`], hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_toml().as_bytes()))
    }

    pub fn stage_seed(&self, explicit: Option<u64>, label: &str) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.master_seed, label))
    }

    pub fn dgp_spec(&self) -> DgpSpec {
        DgpSpec::for_family(self.dgp.family, self.dgp.n)
    }

    pub fn dgp_seed(&self) -> u64 {
        self.stage_seed(self.dgp.seed, "dgp")
    }

    pub fn net_config(&self) -> NetConfig {
        let layers = self.net.hidden_layers.unwrap_or(match self.dgp.family {
            Family::Ds1 => 9,
            Family::Ds2 => 5,
        });
        NetConfig {
            input_dim: self.dgp.family.dim(),
            hidden_layers: layers,
            hidden_size: self.net.hidden_size,
            activation: Activation::Relu,
            seed: self.stage_seed(self.net.seed, "net"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            alpha: t.alpha,
            test_fraction: t.test_fraction,
            seed: self.stage_seed(t.seed, "train"),
            standardize_outcome: t.standardize_outcome,
        }
    }

    pub fn trace_config(&self) -> TraceConfig {
        TraceConfig {
            perturbation_sd_multiple: self.trace.perturbation_sd_multiple,
            relative_threshold: self.trace.relative_threshold,
            probe_batch: self.trace.probe_batch,
            seed: self.stage_seed(self.trace.seed, "trace"),
        }
    }

    pub fn sae_config(&self, input_dim: usize) -> SaeConfig {
        let s = &self.sae;
        let variant = match s.variant {
            SaeKind::L1 => SaeVariant::L1 { lambda: s.lambda },
            SaeKind::TopK => SaeVariant::TopK { k_active: s.k_active },
            SaeKind::JumpRelu => SaeVariant::JumpRelu {
                theta: s.theta,
                lambda: s.lambda,
            },
        };
        SaeConfig {
            input_dim,
            latent_dim: s.latent_dim,
            variant,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            seed: self.stage_seed(s.seed, "sae"),
        }
    }

    /// Top, bottom and random schemes at `ablate.fraction`.
    pub fn ablation_schemes(&self) -> Vec<AblationScheme> {
        let f = self.ablate.fraction;
        let base = self.stage_seed(self.ablate.seed, "ablate");
        let mut s = vec![
            AblationScheme::Top { fraction: f },
            AblationScheme::Bottom { fraction: f },
        ];
        s.extend((0..self.ablate.random_repeats as u64).map(|r| AblationScheme::Random {
            fraction: f,
            seed: base.wrapping_add(r),
        }));
        s
    }

    /// Same config for another data family, as the experiment replays use.
    pub fn with_family(&self, family: Family) -> Self {
        let mut c = self.clone();
        c.dgp.family = family;
        c
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |key: &str, why: String| Err(LabError::Validation(format!("{key}: {why}")));
        if self.dgp.n < 10 {
            return bad("dgp.n", format!("{} rows is too few", self.dgp.n));
        }
        if let Err(e) = self.net_config().validate() {
            return bad("net", e.to_string());
        }
        if let Err(e) = self.train_config().validate() {
            return bad("train", e.to_string());
        }
        let t = self.tmle.truncation;
        if !(t > 0.0 && t < 0.5) {
            return bad("tmle.truncation", format!("{t} outside (0, 0.5)"));
        }
        if self.probe.target >= self.dgp.family.dim() {
            return bad("probe.target", format!("no covariate column {}", self.probe.target));
        }
        if !(0.0..=1.0).contains(&self.ablate.fraction) {
            return bad("ablate.fraction", format!("{} outside [0, 1]", self.ablate.fraction));
        }
        for &w in &self.ablate.band_widths {
            if let Err(e) = AblationScheme::bands(w) {
                return bad("ablate.band_widths", e.to_string());
            }
        }
        if let Err(e) = self.trace_config().validate() {
            return bad("trace", e.to_string());
        }
        if self.trace.probe_batch > self.dgp.n {
            return bad("trace.probe_batch", format!("exceeds dgp.n = {}", self.dgp.n));
        }
        let layers = self.net_config().hidden_layers;
        if let Some(l) = self.sae.layer {
            if l == 0 || l > layers {
                return bad("sae.layer", format!("{l} outside 1..={layers}"));
            }
        }
        if let Err(e) = self.sae_config(self.net.hidden_size).validate() {
            return bad("sae", e.to_string());
        }
        if self.synthgen.alphas.is_empty() || !self.synthgen.alphas.contains(&1.0) {
            return bad("synthgen.alphas", "must be non-empty and contain 1".into());
        }
        if self.synthgen.betas.is_empty() || !self.synthgen.betas.contains(&1.0) || !self.synthgen.betas.contains(&0.0)
        {
            return bad("synthgen.betas", "must be non-empty and contain 0 and 1".into());
        }
        if self.synthgen.confounder >= self.dgp.family.dim() {
            return bad(
                "synthgen.confounder",
                format!("no covariate column {}", self.synthgen.confounder),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::from_toml("", &["train.epochs=3".into(), "dgp.family=ds2".into()]).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.dgp.family, Family::Ds2);
        assert_eq!(c.net_config().hidden_layers, 5);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nepochz = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = RunConfig::from_toml("", &["probe.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_value_names_key() {
        let err = RunConfig::from_toml("", &["tmle.truncation=0.7".into()]).unwrap_err();
        assert!(err.to_string().contains("tmle.truncation"), "{err}");
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.master_seed = 7;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn resolved_copy_round_trips() {
        let c = RunConfig::from_toml("", &["sae.variant=\"topk\"".into()]).unwrap();
        let back = RunConfig::from_toml(&c.resolved_toml(), &[]).unwrap();
        assert_eq!(back.fingerprint(), c.fingerprint());
    }
}
