use serde::{Deserialize, Serialize};

use crate::alignment::{AggregationMode, RfaMode};
use crate::error::{Error, Result};

/// Every hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HimeConfig {
    /// Upscaling factor: 2, 4 or 8.
    pub scale: usize,
    /// References used during training (inference accepts any count).
    pub n_refs: usize,
    /// Residual blocks in the LR extractor.
    pub k_l: usize,
    /// Residual blocks in the reference extractor.
    pub k_h: usize,
    /// Residual blocks in the reconstructor.
    pub k_r: usize,
    /// Feature width shared by every stage.
    pub c_f: usize,
    /// Kernel size of the deformable sampling conv.
    pub deform_kernel: usize,
    pub rfa_mode: RfaMode,
    pub aggregation: AggregationMode,
    pub seed: u64,
}

impl HimeConfig {
    /// Full-size network.
    pub fn full(scale: usize) -> Self {
        Self {
            scale,
            n_refs: 3,
            k_l: 5,
            k_h: 3,
            k_r: 20,
            c_f: 64,
            deform_kernel: 3,
            rfa_mode: RfaMode::Small,
            aggregation: AggregationMode::Cofa,
            seed: 0,
        }
    }

    /// Desk-scale network used for training experiments and gradient checks.
    pub fn toy(scale: usize) -> Self {
        Self {
            k_l: 2,
            k_h: 1,
            k_r: 4,
            c_f: 16,
            ..Self::full(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4 | 8) {
            return Err(Error::Configuration(format!(
                "scale must be 2, 4 or 8, got {}",
                self.scale
            )));
        }
        if self.c_f == 0 {
            return Err(Error::Configuration("feature width c_f must be positive".into()));
        }
        if self.deform_kernel.is_multiple_of(2) {
            return Err(Error::Configuration(format!(
                "deformable kernel must be odd, got {}",
                self.deform_kernel
            )));
        }
        Ok(())
    }

    /// Number of ×2 upsampling stages.
    pub fn up_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    /// Canonical JSON: sorted keys, no whitespace.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }
}

impl Default for HimeConfig {
    fn default() -> Self {
        Self::toy(4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_must_be_power_of_two_up_to_eight() {
        for s in [2, 4, 8] {
            HimeConfig::toy(s).validate().unwrap();
        }
        for s in [0, 1, 3, 16] {
            assert!(matches!(HimeConfig::toy(s).validate(), Err(Error::Configuration(_))));
        }
        assert_eq!(HimeConfig::toy(8).up_stages(), 3);
    }

    #[test]
    fn canonical_json_is_sorted_and_round_trips() {
        let cfg = HimeConfig::toy(4);
        let json = cfg.canonical_json().unwrap();
        assert!(json.starts_with("{\"aggregation\":\"cofa\",\"c_f\":16,"));
        let back: HimeConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<HimeConfig>(&json.replace("\"seed\"", "\"sed\"")).is_err());
    }
}
