use serde::{Deserialize, Serialize};

use crate::error::{FeatError, Result};
use crate::sampleaxis::{AfbmOptions, SampleAxisOptions, ScanMode};

/// Every hyperparameter of a model. Serialized verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Stacked dual-axis blocks.
    pub layers: usize,
    /// Cell embedding width; a multiple of 4 and of `heads`.
    pub d: usize,
    pub d_state: usize,
    /// Hidden width of the scalar embedding maps and the heads.
    pub d_hidden: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Odd smoothing-kernel width of the Conv-GLA layer.
    pub kernel: usize,
    /// Width of the classification head; tasks may use fewer classes.
    pub max_classes: usize,
    /// Feature-axis sub-blocks per dual-axis block.
    pub feature_subblocks: usize,
    /// AFBM layers before the Conv-GLA layer in each sample-axis block.
    pub afbm_layers: usize,
    pub scan_mode: ScanMode,
    pub bidirectional: bool,
    pub tie_directions: bool,
    /// Disable cross-row mixing entirely (rows become independent).
    pub sample_axis: bool,
    /// Reuse one seeded column-identity draw on every pass.
    pub freeze_sdfe: bool,
    /// Fail instead of falling back when columns outnumber `d/4`.
    pub sdfe_strict: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d: 64,
            d_state: 16,
            d_hidden: 128,
            d_ff: 256,
            heads: 4,
            kernel: 5,
            max_classes: 10,
            feature_subblocks: 2,
            afbm_layers: 3,
            scan_mode: ScanMode::Selective,
            bidirectional: true,
            tie_directions: false,
            sample_axis: true,
            freeze_sdfe: false,
            sdfe_strict: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 1,
            d: 8,
            d_state: 3,
            d_hidden: 6,
            d_ff: 12,
            heads: 2,
            kernel: 3,
            max_classes: 3,
            feature_subblocks: 1,
            afbm_layers: 1,
            freeze_sdfe: true,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d", self.d),
            ("d_state", self.d_state),
            ("d_hidden", self.d_hidden),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("kernel", self.kernel),
            ("afbm_layers", self.afbm_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(FeatError::config(field, "must be at least 1"));
            }
        }
        if self.d % 4 != 0 {
            return Err(FeatError::config("d", format!("{} is not a multiple of 4", self.d)));
        }
        if self.d % self.heads != 0 {
            return Err(FeatError::config("heads", format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if self.kernel % 2 == 0 {
            return Err(FeatError::config("kernel", format!("{} is not odd", self.kernel)));
        }
        if self.max_classes < 2 {
            return Err(FeatError::config("max_classes", "must be at least 2"));
        }
        if !(1..=2).contains(&self.feature_subblocks) {
            return Err(FeatError::config("feature_subblocks", "must be 1 or 2"));
        }
        Ok(())
    }

    pub fn sample_axis_options(&self) -> SampleAxisOptions {
        SampleAxisOptions {
            afbm: AfbmOptions {
                d: self.d,
                d_state: self.d_state,
                mode: self.scan_mode,
                bidirectional: self.bidirectional,
                tie_directions: self.tie_directions,
            },
            afbm_layers: self.afbm_layers,
            kernel: self.kernel,
        }
    }

    /// Name of the first field whose value differs from `other`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<String> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter().find(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases: Vec<(&str, ModelConfig)> = vec![
            ("d", ModelConfig { d: 66, ..Default::default() }),
            ("heads", ModelConfig { heads: 3, ..Default::default() }),
            ("kernel", ModelConfig { kernel: 4, ..Default::default() }),
            ("layers", ModelConfig { layers: 0, ..Default::default() }),
            ("feature_subblocks", ModelConfig { feature_subblocks: 3, ..Default::default() }),
        ];
        for (field, cfg) in cases {
            match cfg.validate() {
                Err(FeatError::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_json_fields_are_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"depth": 3}"#).is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"layers": 2}"#).unwrap();
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.d, 64);
    }

    #[test]
    fn first_difference_names_the_field() {
        let a = ModelConfig::default();
        let b = ModelConfig { d_state: 8, ..a.clone() };
        assert_eq!(a.first_difference(&b).as_deref(), Some("d_state"));
        assert_eq!(a.first_difference(&a), None);
    }
}
