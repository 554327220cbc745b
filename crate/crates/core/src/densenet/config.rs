use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::engine::PoolKind;

/// Every structural knob of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Square input side in pixels.
    pub input_hw: usize,
    pub stem_channels: usize,
    /// Dense layers per block.
    pub blocks: Vec<usize>,
    pub growth_rate: usize,
    /// Transition compression θ in (0, 1].
    pub compression: f64,
    pub transition_pool: PoolKind,
    pub se_reduction: usize,
    pub se_in_blocks: bool,
    pub se_after_transitions: bool,
    pub dropout_rate: f32,
    pub num_classes: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_hw: 32,
            stem_channels: 16,
            blocks: vec![4, 4, 4],
            growth_rate: 12,
            compression: 0.5,
            transition_pool: PoolKind::Max,
            se_reduction: 4,
            se_in_blocks: true,
            se_after_transitions: true,
            dropout_rate: 0.25,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Stem,
    Dense,
    Transition,
    Head,
}

/// Structural description of one layer, derived without executing anything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial side of the layer's input.
    pub in_hw: usize,
    /// Channel count the SE module at this layer recalibrates, if any.
    pub se_channels: Option<usize>,
}

impl ArchitectureConfig {
    /// Output channels of a transition fed `channels` maps: `floor(θ·C)`.
    pub fn transition_channels(&self, channels: usize) -> usize {
        // Nudge up before flooring so exact products like 0.5·64 are not lost to rounding.
        ((self.compression * channels as f64) + 1e-9).floor() as usize
    }

    /// Walks the layer sequence, checking every structural constraint.
    pub fn plan(&self) -> Result<Vec<LayerPlan>, ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.blocks.is_empty() {
            return bad("blocks must be non-empty".into());
        }
        if let Some(i) = self.blocks.iter().position(|&b| b == 0) {
            return bad(format!("block {} has zero layers", i + 1));
        }
        if self.input_hw == 0 || self.stem_channels == 0 || self.growth_rate == 0 || self.se_reduction == 0 {
            return bad("input_hw, stem_channels, growth_rate and se_reduction must be positive".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let check_se = |site: &str, channels: usize| -> Result<(), ModelError> {
            if channels % self.se_reduction != 0 {
                return Err(ModelError::SeDivisibility {
                    site: site.to_string(),
                    channels,
                    reduction: self.se_reduction,
                });
            }
            Ok(())
        };

        let mut plan = vec![LayerPlan {
            name: "stem".into(),
            kind: LayerKind::Stem,
            in_channels: 3,
            out_channels: self.stem_channels,
            in_hw: self.input_hw,
            se_channels: None,
        }];
        let mut channels = self.stem_channels;
        let mut hw = self.input_hw;
        for (b, &layers) in self.blocks.iter().enumerate() {
            for l in 0..layers {
                let name = format!("block{}/layer{}", b + 1, l + 1);
                let se = self.se_in_blocks.then_some(self.growth_rate);
                if se.is_some() {
                    check_se(&format!("{name}/se"), self.growth_rate)?;
                }
                plan.push(LayerPlan {
                    name,
                    kind: LayerKind::Dense,
                    in_channels: channels,
                    out_channels: channels + self.growth_rate,
                    in_hw: hw,
                    se_channels: se,
                });
                channels += self.growth_rate;
            }
            if b + 1 < self.blocks.len() {
                let name = format!("transition{}", b + 1);
                if hw % 2 != 0 {
                    return bad(format!("{name} needs an even spatial size, got {hw}x{hw}"));
                }
                let out = self.transition_channels(channels);
                if out == 0 {
                    return bad(format!("{name} compresses {channels} channels to zero"));
                }
                let se = self.se_after_transitions.then_some(out);
                if se.is_some() {
                    check_se(&format!("{name}/se"), out)?;
                }
                plan.push(LayerPlan {
                    name,
                    kind: LayerKind::Transition,
                    in_channels: channels,
                    out_channels: out,
                    in_hw: hw,
                    se_channels: se,
                });
                channels = out;
                hw /= 2;
            }
        }
        plan.push(LayerPlan {
            name: "head".into(),
            kind: LayerKind::Head,
            in_channels: channels,
            out_channels: self.num_classes,
            in_hw: hw,
            se_channels: None,
        });
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.plan().map(|_| ())
    }

    /// Hex SHA-256 of the canonical (sorted-key) JSON of every field that
    /// shapes the parameter set. Dropout rate is excluded: it changes no tensor.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("dropout_rate");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
