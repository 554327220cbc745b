//! DenseNet with squeeze-and-excitation modules inside dense blocks and behind
//! transition layers.
//!
//! Layer order is `stem`, `block{b}/layer{l}` ..., `transition{b}` between
//! blocks, and `head`. Parameter names are hierarchical under the layer name,
//! e.g. `block1/layer2/conv/w` or `transition1/se/fc1/w`.

mod config;
mod model;

pub use config::{ArchitectureConfig, LayerKind, LayerPlan};
pub use model::{se_forward, se_gates, BnBuffer, BnUpdate, Layer, Model, SeWeights};

use crate::engine::EngineError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("SE site {site}: {channels} channels not divisible by reduction {reduction}")]
    SeDivisibility {
        site: String,
        channels: usize,
        reduction: usize,
    },
    #[error("input shape {got:?} does not match expected {expected}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("layer {layer}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchitectureConfig {
        ArchitectureConfig {
            input_hw: 8,
            stem_channels: 4,
            blocks: vec![2, 1],
            growth_rate: 2,
            se_reduction: 2,
            ..Default::default()
        }
    }

    fn batch(n: usize, hw: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * hw * hw).map(|_| rng.random::<f32>()).collect();
        Tensor::new(vec![n, 3, hw, hw], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(&tiny(), 7).unwrap();
        let b = Model::build(&tiny(), 7).unwrap();
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.name == y.name && x.value.bit_eq(&y.value)));
        let c = Model::build(&tiny(), 8).unwrap();
        assert!(!a.params[0].value.bit_eq(&c.params[0].value));
    }

    #[test]
    fn entering_transition_channels() {
        let cfg = ArchitectureConfig {
            blocks: vec![2, 1],
            growth_rate: 4,
            stem_channels: 8,
            ..tiny()
        };
        let plan = cfg.plan().unwrap();
        let t = plan.iter().find(|p| p.kind == LayerKind::Transition).unwrap();
        assert_eq!(t.in_channels, 16);
    }

    #[test]
    fn parameter_names_unique_and_counted() {
        let m = Model::build(&ArchitectureConfig::default(), 0).unwrap();
        let mut names: Vec<_> = m.params.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.params.len());
        let total: usize = m.params.iter().map(|p| p.value.numel()).sum();
        assert_eq!(m.count_parameters(false), total);
    }

    #[test]
    fn logits_shape_and_inference_determinism() {
        let m = Model::build(&tiny(), 1).unwrap();
        let x = batch(3, 8, 2);
        let a = m.infer(&x).unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert!(a.bit_eq(&m.infer(&x).unwrap()));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let m = Model::build(&tiny(), 1).unwrap();
        assert!(matches!(m.infer(&batch(1, 16, 0)), Err(ModelError::InputShape { .. })));
        let gray = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(m.infer(&gray).is_err());
    }

    #[test]
    fn train_forward_moves_running_stats_only_when_trainable() {
        let mut m = Model::build(&tiny(), 1).unwrap();
        let x = batch(2, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in m.params.iter_mut() {
            p.trainable = false;
        }
        let before = m.buffer_tensors();
        m.forward(&x, Mode::Train, &mut rng).unwrap();
        assert!(before.iter().zip(m.buffer_tensors()).all(|(a, b)| a.1.bit_eq(&b.1)));
        for p in m.params.iter_mut() {
            p.trainable = true;
        }
        m.forward(&x, Mode::Train, &mut rng).unwrap();
        assert!(!before.iter().zip(m.buffer_tensors()).all(|(a, b)| a.1.bit_eq(&b.1)));
    }

    #[test]
    fn zero_se_weights_halve_features() {
        let u = batch(2, 4, 5);
        let u = Tensor::new(vec![2, 6, 2, 2], u.data()[..48].to_vec()).unwrap();
        let out = se_forward(&u, &SeWeights::zeros(6, 3)).unwrap();
        for (o, i) in out.data().iter().zip(u.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }
}
